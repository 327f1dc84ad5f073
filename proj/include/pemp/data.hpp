#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "pemp/rng.hpp"
#include "pemp/tensor.hpp"

namespace pemp {

/// Image [3,H,W] in [0,1] with its binary mask [1,H,W].
struct LabeledImage {
  Tensor image;
  Tensor mask;
  int class_id = 0;
  std::string name;
};

struct Episode {
  std::vector<LabeledImage> supports;
  LabeledImage query;
  int class_id = 0;
  std::vector<std::size_t> support_indices;  // positions in the source dataset
  std::size_t query_index = 0;
};

struct FoldSplit {
  int fold = 0;
  std::vector<int> base_classes;
  std::vector<int> novel_classes;
};

inline constexpr int kGeneratorVersion = 1;
inline constexpr int kShapeFamilies = 12;

const char* shape_family_name(int family);

/// Class c is shape family c % 12 with its own texture; masks are the exact
/// rasterization of the target shape. Deterministic in `seed`.
std::vector<LabeledImage> generate_synthetic_dataset(int num_classes, int per_class, int side,
                                                     std::uint64_t seed);

/// Novel classes are the contiguous block [fold*q, (fold+1)*q), q = num_classes/4.
FoldSplit split_classes(int num_classes, int fold);

LabeledImage hflip(const LabeledImage& item);

double foreground_fraction(const Tensor& mask);

/// Draws 1-way K-shot episodes from a fixed class pool.
class EpisodeSampler {
 public:
  EpisodeSampler(const std::vector<LabeledImage>& dataset, std::vector<int> class_pool, int shots,
                 bool random_flip);

  Episode sample(Rng& rng) const;
  /// Episode of class pool()[slot].
  Episode sample_slot(Rng& rng, std::size_t slot) const;
  const std::vector<int>& pool() const { return pool_; }
  int shots() const { return shots_; }

 private:
  const std::vector<LabeledImage>* dataset_;
  std::vector<int> pool_;
  std::vector<std::vector<std::size_t>> members_;  // parallel to pool_
  int shots_;
  bool flip_;
};

/// Reads `<class>/<name>.png` + `<class>/<name>_mask.png`. Class ids follow
/// the sorted class directory names.
std::vector<LabeledImage> ingest_external(const std::filesystem::path& dir);

struct DatasetManifest {
  int num_classes = 0;
  int per_class = 0;
  int side = 0;
  std::uint64_t seed = 0;
};

/// Writes the dataset in the ingestion layout plus manifest.json.
void save_dataset(const std::filesystem::path& dir, const std::vector<LabeledImage>& items,
                  const DatasetManifest& manifest);

}  // namespace pemp
