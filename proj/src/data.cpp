#include "pemp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pemp/png_io.hpp"

namespace pemp {

namespace {

constexpr const char* kFamilyNames[kShapeFamilies] = {
    "disk", "square", "triangle", "ring",    "cross",    "ellipse",
    "bar",  "star",   "l-shape",  "diamond", "crescent", "checker-disk"};

constexpr double kMinFraction = 0.05;
constexpr double kMaxFraction = 0.6;

// Inside test in shape-local coordinates scaled so the shape spans ~[-1,1].
bool inside_family(int family, double u, double v) {
  const double rr = u * u + v * v;
  switch (family) {
    case 0:
      return rr <= 1.0;
    case 1:
      return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 2: {
      // Equilateral triangle with circumradius 1.
      for (double ang : {-M_PI / 2, M_PI / 6, 5 * M_PI / 6}) {
        if (u * std::cos(ang) + v * std::sin(ang) > 0.5) return false;
      }
      return true;
    }
    case 3:
      return rr <= 1.0 && rr >= 0.55 * 0.55;
    case 4:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(u) <= 1.0 && std::abs(v) <= 0.3);
    case 5:
      return u * u + (v / 0.5) * (v / 0.5) <= 1.0;
    case 6:
      return std::abs(u) <= 1.0 && std::abs(v) <= 0.25;
    case 7: {
      const double rho = std::sqrt(rr);
      const double phi = std::atan2(v, u);
      return rho <= 0.55 + 0.45 * std::cos(5.0 * phi);
    }
    case 8:
      return (u >= -0.8 && u <= -0.2 && v >= -0.8 && v <= 0.8) ||
             (u >= -0.8 && u <= 0.8 && v >= 0.2 && v <= 0.8);
    case 9:
      return std::abs(u) + std::abs(v) <= 1.0;
    case 10:
      return rr <= 1.0 && (u - 0.45) * (u - 0.45) + v * v > 0.75 * 0.75;
    case 11: {
      if (rr > 1.0) return false;
      const auto cu = static_cast<int>(std::floor((u + 1.0) * 2.0));
      const auto cv = static_cast<int>(std::floor((v + 1.0) * 2.0));
      return (cu + cv) % 2 == 0;
    }
    default:
      return false;
  }
}

struct Placement {
  int family;
  double cx, cy, radius, angle;

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    return inside_family(family, (c * dx + s * dy) / radius, (-s * dx + c * dy) / radius);
  }
};

struct Texture {
  double rgb[3];
  int pattern;  // 0 solid, 1 stripes, 2 checker, 3 dots
  double frequency;
  double orientation;

  double modulation(double x, double y) const {
    const double c = std::cos(orientation), s = std::sin(orientation);
    const double a = (c * x + s * y) * frequency, b = (-s * x + c * y) * frequency;
    switch (pattern) {
      case 1:
        return 0.5 + 0.5 * std::sin(2 * M_PI * a);
      case 2:
        return ((static_cast<long>(std::floor(a)) + static_cast<long>(std::floor(b))) & 1) ? 1.0 : 0.2;
      case 3: {
        const double fa = a - std::floor(a) - 0.5, fb = b - std::floor(b) - 0.5;
        return fa * fa + fb * fb < 0.09 ? 1.0 : 0.25;
      }
      default:
        return 1.0;
    }
  }
};

void hsv_to_rgb(double h, double s, double v, double out[3]) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  const double table[6][3] = {{v, t, p}, {q, v, p}, {p, v, t}, {p, q, v}, {t, p, v}, {v, p, q}};
  for (int k = 0; k < 3; ++k) out[k] = table[i][k];
}

Texture class_texture(int class_id) {
  Texture t{};
  const double golden = 0.6180339887498949;
  hsv_to_rgb(0.07 + class_id * golden, 0.55 + 0.35 * ((class_id * 7) % 3) / 2.0, 0.9, t.rgb);
  t.pattern = (class_id + class_id / kShapeFamilies) % 4;
  t.frequency = 0.12 + 0.05 * (class_id % 3);
  t.orientation = (class_id % 5) * M_PI / 5.0;
  return t;
}

Placement random_placement(Rng& rng, int family, int side, double rmin, double rmax) {
  Placement p{};
  p.family = family;
  p.radius = uniform(rng, rmin, rmax) * side;
  p.cx = uniform(rng, p.radius * 0.8, side - p.radius * 0.8);
  p.cy = uniform(rng, p.radius * 0.8, side - p.radius * 0.8);
  p.angle = uniform(rng, 0.0, 2 * M_PI);
  return p;
}

std::vector<double> rasterize(const Placement& p, int side) {
  std::vector<double> m(static_cast<std::size_t>(side) * side, 0.0);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      if (p.contains(x + 0.5, y + 0.5)) m[static_cast<std::size_t>(y) * side + x] = 1.0;
  return m;
}

void paint(std::vector<double>& img, const std::vector<double>& mask, const Texture& tex, double gain, int side) {
  const std::size_t hw = static_cast<std::size_t>(side) * side;
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * side + x;
      if (mask[p] == 0.0) continue;
      const double mod = 0.55 + 0.45 * tex.modulation(x, y);
      for (int c = 0; c < 3; ++c) img[c * hw + p] = std::clamp(tex.rgb[c] * mod * gain, 0.0, 1.0);
    }
  }
}

LabeledImage generate_one(int class_id, int index, int num_classes, int side, std::uint64_t seed) {
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(class_id), static_cast<std::uint64_t>(index)));
  const std::size_t hw = static_cast<std::size_t>(side) * side;
  const int family = class_id % kShapeFamilies;

  std::vector<double> img(3 * hw);
  const double base = uniform(rng, 0.3, 0.7);
  double tint[3];
  for (double& t : tint) t = uniform(rng, -0.05, 0.05);
  for (int c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < hw; ++p) img[c * hw + p] = std::clamp(base + tint[c] + 0.04 * normal(rng), 0.0, 1.0);

  // Distractors come from classes of other shape families.
  std::vector<int> others;
  for (int c = 0; c < num_classes; ++c) {
    if (c % kShapeFamilies != family) others.push_back(c);
  }
  const int distractors = others.empty() ? 0 : 1 + static_cast<int>(uniform_index(rng, 2));
  for (int k = 0; k < distractors; ++k) {
    const int other = others[uniform_index(rng, others.size())];
    const Placement p = random_placement(rng, other % kShapeFamilies, side, 0.10, 0.22);
    paint(img, rasterize(p, side), class_texture(other), uniform(rng, 0.9, 1.1), side);
  }

  std::vector<double> mask;
  for (int attempt = 0;; ++attempt) {
    if (attempt == 200) throw DataError("could not place a shape with a valid foreground fraction");
    const Placement p = random_placement(rng, family, side, 0.16, 0.40);
    mask = rasterize(p, side);
    double area = 0.0;
    for (double v : mask) area += v;
    const double frac = area / static_cast<double>(hw);
    if (frac >= kMinFraction && frac <= kMaxFraction) break;
  }
  paint(img, mask, class_texture(class_id), uniform(rng, 0.9, 1.1), side);

  const auto s = static_cast<std::size_t>(side);
  LabeledImage item;
  item.image = Tensor({3, s, s}, std::move(img));
  item.mask = Tensor({1, s, s}, std::move(mask));
  item.class_id = class_id;
  std::ostringstream name;
  name << std::setw(4) << std::setfill('0') << index;
  item.name = name.str();
  return item;
}

}  // namespace

const char* shape_family_name(int family) {
  if (family < 0 || family >= kShapeFamilies) throw DataError("unknown shape family");
  return kFamilyNames[family];
}

std::vector<LabeledImage> generate_synthetic_dataset(int num_classes, int per_class, int side, std::uint64_t seed) {
  if (num_classes <= 0 || num_classes % 4 != 0) throw DataError("num_classes must be a positive multiple of 4");
  if (per_class < 8) throw DataError("per_class must be at least 8");
  // Smallest target radius is 0.16*side; below 32 pixels it drops under ~5.
  if (side < 32 || 0.16 * side < 4.0) throw DataError("side too small to place the minimum shape radius");
  std::vector<LabeledImage> items;
  items.reserve(static_cast<std::size_t>(num_classes) * per_class);
  for (int c = 0; c < num_classes; ++c)
    for (int i = 0; i < per_class; ++i) items.push_back(generate_one(c, i, num_classes, side, seed));
  return items;
}

FoldSplit split_classes(int num_classes, int fold) {
  if (fold < 0 || fold > 3) throw DataError("fold must be in 0..3, got " + std::to_string(fold));
  if (num_classes <= 0 || num_classes % 4 != 0) throw DataError("num_classes must be a positive multiple of 4");
  const int q = num_classes / 4;
  FoldSplit split;
  split.fold = fold;
  for (int c = 0; c < num_classes; ++c) {
    if (c >= fold * q && c < (fold + 1) * q) {
      split.novel_classes.push_back(c);
    } else {
      split.base_classes.push_back(c);
    }
  }
  return split;
}

LabeledImage hflip(const LabeledImage& item) {
  auto flip = [](const Tensor& t) {
    const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
    std::vector<double> out(t.numel());
    auto in = t.data();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = in[(ch * h + y) * w + (w - 1 - x)];
    return Tensor(t.shape(), std::move(out));
  };
  LabeledImage out = item;
  out.image = flip(item.image);
  out.mask = flip(item.mask);
  return out;
}

double foreground_fraction(const Tensor& mask) {
  double s = 0.0;
  for (double v : mask.data()) s += v;
  return s / static_cast<double>(mask.numel());
}

EpisodeSampler::EpisodeSampler(const std::vector<LabeledImage>& dataset, std::vector<int> class_pool, int shots,
                               bool random_flip)
    : dataset_(&dataset), pool_(std::move(class_pool)), shots_(shots), flip_(random_flip) {
  if (pool_.empty()) throw DataError("episode class pool is empty");
  if (shots_ < 1) throw DataError("shots must be >= 1");
  std::sort(pool_.begin(), pool_.end());
  pool_.erase(std::unique(pool_.begin(), pool_.end()), pool_.end());
  std::map<int, std::size_t> slot;
  for (std::size_t i = 0; i < pool_.size(); ++i) slot[pool_[i]] = i;
  members_.resize(pool_.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    auto it = slot.find(dataset[i].class_id);
    if (it != slot.end()) members_[it->second].push_back(i);
  }
  for (std::size_t i = 0; i < pool_.size(); ++i) {
    if (members_[i].size() < static_cast<std::size_t>(shots_) + 1) {
      throw DataError("class " + std::to_string(pool_[i]) + " has " + std::to_string(members_[i].size()) +
                      " images, need " + std::to_string(shots_ + 1));
    }
  }
}

Episode EpisodeSampler::sample(Rng& rng) const { return sample_slot(rng, uniform_index(rng, pool_.size())); }

Episode EpisodeSampler::sample_slot(Rng& rng, std::size_t slot) const {
  if (slot >= pool_.size()) throw DataError("episode class slot out of range");
  std::vector<std::size_t> idx = members_[slot];
  const std::size_t need = static_cast<std::size_t>(shots_) + 1;
  for (std::size_t i = 0; i < need; ++i) {
    const std::size_t j = i + uniform_index(rng, idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
  Episode ep;
  ep.class_id = pool_[slot];
  auto take = [&](std::size_t i) {
    const LabeledImage& src = (*dataset_)[i];
    if (flip_ && uniform01(rng) < 0.5) return hflip(src);
    return src;
  };
  for (int k = 0; k < shots_; ++k) {
    ep.support_indices.push_back(idx[k]);
    ep.supports.push_back(take(idx[k]));
  }
  ep.query_index = idx[need - 1];
  ep.query = take(ep.query_index);
  return ep;
}

std::vector<LabeledImage> ingest_external(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  std::vector<LabeledImage> items;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<fs::path> images;
    for (const auto& e : fs::directory_iterator(class_dirs[c])) {
      const auto& p = e.path();
      if (p.extension() != ".png") continue;
      const std::string stem = p.stem().string();
      if (stem.size() >= 5 && stem.compare(stem.size() - 5, 5, "_mask") == 0) continue;
      images.push_back(p);
    }
    std::sort(images.begin(), images.end());
    for (const auto& img_path : images) {
      const fs::path mask_path = img_path.parent_path() / (img_path.stem().string() + "_mask.png");
      if (!fs::exists(mask_path)) throw IoError("missing mask for " + img_path.string());
      const Raster rgb = read_png(img_path, 3);
      const Raster gray = read_png(mask_path, 1);
      if (rgb.width != gray.width || rgb.height != gray.height) {
        throw DataError("size mismatch between " + img_path.string() + " and its mask");
      }
      const std::size_t h = rgb.height, w = rgb.width, hw = h * w;
      std::vector<double> img(3 * hw), mask(hw);
      for (std::size_t p = 0; p < hw; ++p) {
        for (std::size_t ch = 0; ch < 3; ++ch) img[ch * hw + p] = rgb.pixels[p * 3 + ch] / 255.0;
        mask[p] = gray.pixels[p] >= 128 ? 1.0 : 0.0;
      }
      LabeledImage item;
      item.image = Tensor({3, h, w}, std::move(img));
      item.mask = Tensor({1, h, w}, std::move(mask));
      item.class_id = static_cast<int>(c);
      item.name = img_path.stem().string();
      items.push_back(std::move(item));
    }
  }
  return items;
}

void save_dataset(const std::filesystem::path& dir, const std::vector<LabeledImage>& items,
                  const DatasetManifest& manifest) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::map<int, int> counts;
  for (const auto& item : items) {
    std::ostringstream cls;
    cls << std::setw(2) << std::setfill('0') << item.class_id;
    const fs::path class_dir = dir / cls.str();
    fs::create_directories(class_dir);
    const std::size_t h = item.image.dim(1), w = item.image.dim(2), hw = h * w;
    Raster rgb{w, h, 3, std::vector<std::uint8_t>(3 * hw)};
    Raster gray{w, h, 1, std::vector<std::uint8_t>(hw)};
    auto img = item.image.data();
    auto mask = item.mask.data();
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        rgb.pixels[p * 3 + ch] = static_cast<std::uint8_t>(std::lround(std::clamp(img[ch * hw + p], 0.0, 1.0) * 255.0));
      }
      gray.pixels[p] = mask[p] >= 0.5 ? 255 : 0;
    }
    write_png(class_dir / (item.name + ".png"), rgb);
    write_png(class_dir / (item.name + "_mask.png"), gray);
    ++counts[item.class_id];
  }
  nlohmann::json j;
  j["generator_version"] = kGeneratorVersion;
  j["seed"] = manifest.seed;
  j["num_classes"] = manifest.num_classes;
  j["per_class"] = manifest.per_class;
  j["side"] = manifest.side;
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& [id, n] : counts) {
    classes.push_back({{"id", id}, {"family", shape_family_name(id % kShapeFamilies)}, {"count", n}});
  }
  j["classes"] = classes;
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write manifest in " + dir.string());
  os << j.dump(2) << '\n';
}

}  // namespace pemp
