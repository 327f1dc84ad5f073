#include "pemp/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

namespace pemp {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw DataError("config key '" + key + "': not a number: '" + v + "'");
  }
}

template <typename T>
T parse_int(const std::string& key, const std::string& v) {
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw DataError("config key '" + key + "': not an integer: '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw DataError("config key '" + key + "': not a boolean: '" + v + "'");
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define PEMP_DOUBLE(name) \
  Field{#name, [](const RunConfig& c) { return fmt_double(c.name); }, \
        [](RunConfig& c, const std::string& v) { c.name = parse_double(#name, v); }}
#define PEMP_INT(name, type) \
  Field{#name, [](const RunConfig& c) { return std::to_string(c.name); }, \
        [](RunConfig& c, const std::string& v) { c.name = parse_int<type>(#name, v); }}
#define PEMP_BOOL(name) \
  Field{#name, [](const RunConfig& c) { return std::string(c.name ? "true" : "false"); }, \
        [](RunConfig& c, const std::string& v) { c.name = parse_bool(#name, v); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      PEMP_DOUBLE(gamma),
      PEMP_INT(prototypes, std::size_t),
      PEMP_BOOL(use_mpm),
      PEMP_DOUBLE(sigma),
      PEMP_BOOL(weight_sq_dist),
      PEMP_BOOL(use_weight_map),
      PEMP_DOUBLE(momentum),
      PEMP_DOUBLE(weight_decay),
      PEMP_DOUBLE(clip_norm),
      PEMP_DOUBLE(lr_prior),
      PEMP_DOUBLE(lr_seg),
      PEMP_INT(epochs_prior, std::size_t),
      PEMP_INT(epochs_seg, std::size_t),
      PEMP_INT(episodes_per_epoch, std::size_t),
      PEMP_BOOL(random_flip),
      PEMP_BOOL(channel_shuffle),
      Field{"widths",
            [](const RunConfig& c) {
              std::string s;
              for (std::size_t i = 0; i < c.widths.size(); ++i) s += (i ? "," : "") + std::to_string(c.widths[i]);
              return s;
            },
            [](RunConfig& c, const std::string& v) {
              std::vector<std::size_t> w;
              std::stringstream ss(v);
              std::string item;
              while (std::getline(ss, item, ',')) w.push_back(parse_int<std::size_t>("widths", trim(item)));
              c.widths = std::move(w);
            }},
      PEMP_INT(feature_dim, std::size_t),
      PEMP_DOUBLE(dropout_prior),
      PEMP_DOUBLE(dropout_seg),
      PEMP_BOOL(use_purifier),
      PEMP_BOOL(use_seg_stage),
      PEMP_BOOL(use_comm),
      PEMP_BOOL(comm_masked_mean),
      PEMP_INT(shots, int),
      PEMP_INT(fold, int),
      PEMP_INT(seed, std::uint64_t),
      PEMP_INT(eval_episodes, std::size_t),
      PEMP_INT(eval_runs, std::size_t),
      PEMP_INT(eval_seed, std::uint64_t),
      PEMP_INT(num_classes, int),
      PEMP_INT(per_class, int),
      PEMP_INT(image_side, int),
      PEMP_INT(data_seed, std::uint64_t),
      Field{"data_dir", [](const RunConfig& c) { return c.data_dir; },
            [](RunConfig& c, const std::string& v) { c.data_dir = v; }},
  };
  return table;
}

#undef PEMP_DOUBLE
#undef PEMP_INT
#undef PEMP_BOOL

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.emplace_back(f.key);
  return out;
}

NetworkConfig RunConfig::prior_network() const {
  NetworkConfig n;
  n.backbone.in_channels = 3;
  n.backbone.widths = widths;
  n.backbone.feature_dim = feature_dim;
  n.backbone.dropout = dropout_prior;
  n.backbone.comm_channels = false;
  n.backbone.purifier = use_purifier;
  n.prototypes = effective_prototypes();
  n.gamma = gamma;
  n.comm = false;
  return n;
}

NetworkConfig RunConfig::seg_network() const {
  NetworkConfig n = prior_network();
  n.backbone.in_channels = 4;
  n.backbone.dropout = dropout_seg;
  n.backbone.comm_channels = true;
  n.comm = use_comm;
  n.comm_masked_mean = comm_masked_mean;
  return n;
}

SgdConfig RunConfig::sgd(double lr) const { return {lr, momentum, weight_decay, clip_norm}; }

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(*this, trim(value));
      return;
    }
  }
  throw DataError("unknown config key '" + key + "'");
}

void RunConfig::validate() const {
  auto fail = [](const std::string& msg) { throw DataError("invalid config: " + msg); };
  if (!(gamma > 0.0)) fail("gamma must be > 0");
  if (prototypes < 1) fail("prototypes must be >= 1");
  if (!(sigma > 0.0)) fail("sigma must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) fail("momentum must be in [0,1)");
  if (weight_decay < 0.0) fail("weight_decay must be >= 0");
  if (!(lr_prior > 0.0) || !(lr_seg > 0.0)) fail("learning rates must be > 0");
  if (widths.empty()) fail("widths must list at least one block");
  if (feature_dim < 1) fail("feature_dim must be >= 1");
  if (dropout_prior < 0.0 || dropout_prior >= 1.0 || dropout_seg < 0.0 || dropout_seg >= 1.0) fail("dropout in [0,1)");
  if (shots < 1) fail("shots must be >= 1");
  if (fold < 0 || fold > 3) fail("fold must be in 0..3");
  if (eval_runs < 1 || eval_episodes < 1) fail("eval_runs and eval_episodes must be >= 1");
  if (num_classes <= 0 || num_classes % 4) fail("num_classes must be a positive multiple of 4");
  if (per_class < 8) fail("per_class must be >= 8");
  if (image_side < 32 || image_side % 4) fail("image_side must be >= 32 and divisible by 4");
}

std::map<std::string, std::string> RunConfig::to_map() const {
  std::map<std::string, std::string> out;
  for (const auto& f : fields()) out[f.key] = f.get(*this);
  return out;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + "=" + f.get(*this) + "\n";
  return out;
}

std::string RunConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : to_text()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  cfg.merge(text);
  return cfg;
}

void RunConfig::merge(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw DataError("config line " + std::to_string(lineno) + ": expected key=value");
    }
    set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

}  // namespace pemp
