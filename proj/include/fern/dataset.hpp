#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fern/augment.hpp"
#include "fern/common.hpp"
#include "fern/tensor.hpp"

namespace fern {

struct Dataset {
  int height = 0;
  int width = 0;
  std::vector<std::vector<uint8_t>> images;  // CHW, 3 channels
  std::vector<int> class_labels;
  std::vector<int> perm_labels;  // empty means all-identity; filled by offline expansion
  std::vector<std::string> class_names;
  std::string split;  // "train" or "test"

  size_t size() const { return images.size(); }
};

struct NormalizationStats {
  std::array<double, 3> mean{0, 0, 0};
  std::array<double, 3> std{1, 1, 1};
};

// CIFAR-10 binary batches: 3073-byte records, label byte then 3072 planar
// RGB bytes of a 32x32 image.
constexpr int kCifarRecordBytes = 3073;
constexpr int kCifarSide = 32;

Dataset load_cifar10_binary(const std::vector<std::string>& paths, const std::string& split);
void write_cifar10_binary(const Dataset& dataset, const std::string& path);

// Seeded per-class subsample without replacement; default reproduces the
// 100-per-class mini training set. Output is ordered by class, then by
// original index.
Dataset make_mini_cifar10(const Dataset& train, int per_class, uint64_t seed);

// Manifest: one "relative/path.ppm,classname" per line. Images are binary P6
// and get nearest-neighbor resized to target_size x target_size. Class names
// map to labels in first-appearance order.
Dataset load_image_folder(const std::string& root, const std::string& manifest_path,
                          int target_size, const std::string& split);

// All 24 permutations of every image; perm labels are exactly balanced.
Dataset expand_dataset_offline(const Dataset& dataset);

// Per-channel mean and population std of the training pixels scaled to [0,1];
// std is floored at 1e-6.
NormalizationStats compute_normalization(const Dataset& train);

struct Batch {
  Tensor images;  // [B,3,H,W], normalized
  std::vector<int> class_labels;
  std::vector<int> perm_labels;
};

// Deterministic epoch stream: the order is a (seed, epoch)-keyed shuffle,
// augmentation draws come from the same keyed stream, the final short batch
// is kept. Normalization happens after augmentation.
class BatchStream {
 public:
  BatchStream(const Dataset& dataset, int batch_size, uint64_t shuffle_seed, AugmentMode mode,
              int epoch, const NormalizationStats& stats);

  std::optional<Batch> next();
  size_t batches_per_epoch() const;

 private:
  const Dataset& dataset_;
  int batch_size_;
  AugmentMode mode_;
  NormalizationStats stats_;
  std::vector<int> order_;
  size_t pos_ = 0;
  Rng rng_;
};

// One normalized eval batch from dataset rows [first, first+count).
Batch assemble_eval_batch(const Dataset& dataset, size_t first, size_t count,
                          const NormalizationStats& stats);

}  // namespace fern
