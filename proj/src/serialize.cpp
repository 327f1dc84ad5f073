#include "pemp/serialize.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace pemp {

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

namespace {

constexpr char kTensorMagic[6] = {'P', 'E', 'M', 'P', 'T', '1'};
constexpr char kCheckpointMagic[6] = {'P', 'E', 'M', 'P', 'C', '1'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("truncated tensor stream");
  return v;
}

void expect_magic(std::istream& is, const char (&magic)[6], const char* what) {
  char buf[6];
  is.read(buf, 6);
  if (!is || std::memcmp(buf, magic, 6) != 0) throw IoError(std::string("bad ") + what + " magic");
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic, 6);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint64_t>(os, d);
  auto data = t.data();
  os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
}

Tensor read_tensor(std::istream& is) {
  expect_magic(is, kTensorMagic, "tensor");
  const auto rank = get<std::uint32_t>(is);
  if (rank == 0 || rank > 8) throw IoError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(is));
  std::vector<double> values(shape_numel(shape));
  is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!is) throw IoError("truncated tensor payload");
  return Tensor(std::move(shape), std::move(values));
}

std::string tensor_to_bytes(const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  return os.str();
}

Tensor tensor_from_bytes(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  return read_tensor(is);
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, 6);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing checkpoint file " + path.string());
  expect_magic(is, kCheckpointMagic, "checkpoint");
  const auto count = get<std::uint32_t>(is);
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw IoError("truncated checkpoint entry name");
    out.emplace_back(std::move(name), read_tensor(is));
  }
  return out;
}

void assign_from(const NamedTensors& source, const NamedTensors& targets) {
  std::unordered_map<std::string, const Tensor*> index;
  for (const auto& [name, t] : source) index[name] = &t;
  for (const auto& [name, target] : targets) {
    auto it = index.find(name);
    if (it == index.end()) throw IoError("checkpoint lacks tensor '" + name + "'");
    if (it->second->shape() != target.shape()) {
      throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second->shape()) +
                    ", expected " + shape_str(target.shape()));
    }
    Tensor dst = target;
    auto values = it->second->data();
    std::copy(values.begin(), values.end(), dst.mutable_data().begin());
  }
}

}  // namespace pemp
