#include "fern/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "fern/image_io.hpp"

namespace fern {

namespace {

const std::vector<std::string> kCifarClassNames = {"airplane", "automobile", "bird",  "cat",
                                                   "deer",     "dog",        "frog",  "horse",
                                                   "ship",     "truck"};

}  // namespace

Dataset load_cifar10_binary(const std::vector<std::string>& paths, const std::string& split) {
  Dataset out;
  out.height = kCifarSide;
  out.width = kCifarSide;
  out.class_names = kCifarClassNames;
  out.split = split;
  const size_t pixels = 3 * kCifarSide * kCifarSide;
  for (const std::string& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(path + ": cannot open");
    in.seekg(0, std::ios::end);
    const int64_t bytes = in.tellg();
    in.seekg(0, std::ios::beg);
    if (bytes % kCifarRecordBytes != 0)
      throw DataError(path + ": size " + std::to_string(bytes) + " is not a multiple of " +
                      std::to_string(kCifarRecordBytes) + " (corrupt file)");
    const int64_t records = bytes / kCifarRecordBytes;
    for (int64_t r = 0; r < records; ++r) {
      uint8_t label = 0;
      in.read(reinterpret_cast<char*>(&label), 1);
      std::vector<uint8_t> img(pixels);
      in.read(reinterpret_cast<char*>(img.data()), static_cast<std::streamsize>(pixels));
      if (!in) throw DataError(path + ": truncated record " + std::to_string(r));
      if (label >= 10)
        throw DataError(path + ": record " + std::to_string(r) + " has label " +
                        std::to_string(label) + " (corrupt record)");
      out.images.push_back(std::move(img));
      out.class_labels.push_back(label);
    }
  }
  return out;
}

void write_cifar10_binary(const Dataset& dataset, const std::string& path) {
  const size_t pixels = 3 * kCifarSide * kCifarSide;
  if (dataset.height != kCifarSide || dataset.width != kCifarSide)
    contract_fail("write_cifar10_binary: images must be 32x32");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path + ": cannot open for writing");
  for (size_t i = 0; i < dataset.size(); ++i) {
    const uint8_t label = static_cast<uint8_t>(dataset.class_labels[i]);
    out.write(reinterpret_cast<const char*>(&label), 1);
    out.write(reinterpret_cast<const char*>(dataset.images[i].data()),
              static_cast<std::streamsize>(pixels));
  }
  if (!out) throw DataError(path + ": write failed");
}

Dataset make_mini_cifar10(const Dataset& train, int per_class, uint64_t seed) {
  if (per_class < 1) contract_fail("make_mini_cifar10: per_class must be >= 1");
  const int num_classes = static_cast<int>(train.class_names.size());
  std::vector<std::vector<int>> by_class(static_cast<size_t>(num_classes));
  for (size_t i = 0; i < train.size(); ++i)
    by_class[static_cast<size_t>(train.class_labels[i])].push_back(static_cast<int>(i));

  Dataset out;
  out.height = train.height;
  out.width = train.width;
  out.class_names = train.class_names;
  out.split = train.split;
  Rng rng(derive_seed(seed, 0xM1N1));
  for (int c = 0; c < num_classes; ++c) {
    std::vector<int>& pool = by_class[static_cast<size_t>(c)];
    if (static_cast<int>(pool.size()) < per_class)
      contract_fail("make_mini_cifar10: class " + std::to_string(c) + " has only " +
                    std::to_string(pool.size()) + " images, need " + std::to_string(per_class));
    rng.shuffle(pool);
    std::vector<int> chosen(pool.begin(), pool.begin() + per_class);
    std::sort(chosen.begin(), chosen.end());
    for (int idx : chosen) {
      out.images.push_back(train.images[static_cast<size_t>(idx)]);
      out.class_labels.push_back(c);
    }
  }
  return out;
}

Dataset load_image_folder(const std::string& root, const std::string& manifest_path,
                          int target_size, const std::string& split) {
  if (target_size < 2 || target_size % 2 != 0)
    contract_fail("load_image_folder: target size must be even and >= 2");
  std::ifstream in(manifest_path);
  if (!in) throw DataError(manifest_path + ": cannot open manifest");
  Dataset out;
  out.height = target_size;
  out.width = target_size;
  out.split = split;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const size_t comma = line.rfind(',');
    if (comma == std::string::npos || comma == 0 || comma + 1 >= line.size())
      throw DataError(manifest_path + ":" + std::to_string(lineno) +
                      ": expected 'relative/path.ppm,classname'");
    const std::string rel = line.substr(0, comma);
    const std::string cls = line.substr(comma + 1);
    int label = -1;
    for (size_t i = 0; i < out.class_names.size(); ++i)
      if (out.class_names[i] == cls) label = static_cast<int>(i);
    if (label < 0) {
      label = static_cast<int>(out.class_names.size());
      out.class_names.push_back(cls);
    }
    const std::string path = (std::filesystem::path(root) / rel).string();
    PpmImage img = read_ppm(path);
    std::vector<uint8_t> chw = interleaved_to_chw(img);
    out.images.push_back(
        resize_nearest_chw(chw, 3, img.height, img.width, target_size, target_size));
    out.class_labels.push_back(label);
  }
  return out;
}

Dataset expand_dataset_offline(const Dataset& dataset) {
  if (dataset.height % 2 != 0 || dataset.width % 2 != 0)
    contract_fail("expand_dataset_offline: image sides must be even");
  Dataset out;
  out.height = dataset.height;
  out.width = dataset.width;
  out.class_names = dataset.class_names;
  out.split = dataset.split;
  out.images.reserve(dataset.size() * kNumPatchPerms);
  for (size_t i = 0; i < dataset.size(); ++i) {
    for (int p = 0; p < kNumPatchPerms; ++p) {
      std::vector<uint8_t> img(dataset.images[i].size());
      permute_patches_u8(dataset.images[i].data(), img.data(), 3, dataset.height, dataset.width,
                         permutation_at(p));
      out.images.push_back(std::move(img));
      out.class_labels.push_back(dataset.class_labels[i]);
      out.perm_labels.push_back(p);
    }
  }
  return out;
}

NormalizationStats compute_normalization(const Dataset& train) {
  if (train.size() == 0) contract_fail("compute_normalization: empty dataset");
  NormalizationStats stats;
  const size_t hw = static_cast<size_t>(train.height) * train.width;
  const double n = static_cast<double>(train.size() * hw);
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0;
    for (const auto& img : train.images) {
      const uint8_t* plane = img.data() + static_cast<size_t>(c) * hw;
      for (size_t i = 0; i < hw; ++i) sum += plane[i];
    }
    const double mean = sum / n / 255.0;
    double var = 0.0;
    for (const auto& img : train.images) {
      const uint8_t* plane = img.data() + static_cast<size_t>(c) * hw;
      for (size_t i = 0; i < hw; ++i) {
        const double d = plane[i] / 255.0 - mean;
        var += d * d;
      }
    }
    stats.mean[static_cast<size_t>(c)] = mean;
    stats.std[static_cast<size_t>(c)] = std::max(std::sqrt(var / n), 1e-6);
  }
  return stats;
}

namespace {

// writes one CHW u8 image into a [3,H,W] slot of the batch tensor, scaling to
// [0,1] and normalizing
void emit_image(const uint8_t* img, double* dst, size_t hw, const NormalizationStats& stats) {
  for (size_t c = 0; c < 3; ++c) {
    const double mean = stats.mean[c];
    const double inv_std = 1.0 / stats.std[c];
    const uint8_t* plane = img + c * hw;
    double* out = dst + c * hw;
    for (size_t i = 0; i < hw; ++i) out[i] = (plane[i] / 255.0 - mean) * inv_std;
  }
}

}  // namespace

BatchStream::BatchStream(const Dataset& dataset, int batch_size, uint64_t shuffle_seed,
                         AugmentMode mode, int epoch, const NormalizationStats& stats)
    : dataset_(dataset),
      batch_size_(batch_size),
      mode_(mode),
      stats_(stats),
      rng_(derive_seed(shuffle_seed, 0xA0000000ull + static_cast<uint64_t>(epoch))) {
  check(batch_size >= 1, "BatchStream: batch_size must be >= 1");
  if (mode == AugmentMode::online_uniform &&
      (dataset.height % 2 != 0 || dataset.width % 2 != 0))
    contract_fail("BatchStream: online augmentation needs even image sides");
  order_.resize(dataset.size());
  for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
  Rng shuffle_rng(derive_seed(shuffle_seed, 0x50000000ull + static_cast<uint64_t>(epoch)));
  shuffle_rng.shuffle(order_);
}

size_t BatchStream::batches_per_epoch() const {
  return (dataset_.size() + static_cast<size_t>(batch_size_) - 1) /
         static_cast<size_t>(batch_size_);
}

std::optional<Batch> BatchStream::next() {
  if (pos_ >= order_.size()) return std::nullopt;
  const size_t count = std::min(static_cast<size_t>(batch_size_), order_.size() - pos_);
  const size_t hw = static_cast<size_t>(dataset_.height) * dataset_.width;
  Batch batch;
  batch.images = Tensor::zeros({static_cast<int>(count), 3, dataset_.height, dataset_.width});
  batch.class_labels.resize(count);
  batch.perm_labels.resize(count);
  std::vector<uint8_t> permuted(3 * hw);
  for (size_t i = 0; i < count; ++i) {
    const size_t src = static_cast<size_t>(order_[pos_ + i]);
    const std::vector<uint8_t>& img = dataset_.images[src];
    batch.class_labels[i] = dataset_.class_labels[src];
    int perm_label = dataset_.perm_labels.empty() ? 0 : dataset_.perm_labels[src];
    const uint8_t* pixels = img.data();
    if (mode_ == AugmentMode::online_uniform) {
      perm_label = static_cast<int>(rng_.below(kNumPatchPerms));
      permute_patches_u8(img.data(), permuted.data(), 3, dataset_.height, dataset_.width,
                         permutation_at(perm_label));
      pixels = permuted.data();
    }
    batch.perm_labels[i] = perm_label;
    emit_image(pixels, batch.images.data() + i * 3 * hw, hw, stats_);
  }
  pos_ += count;
  return batch;
}

Batch assemble_eval_batch(const Dataset& dataset, size_t first, size_t count,
                          const NormalizationStats& stats) {
  check(first + count <= dataset.size(), "assemble_eval_batch: range out of bounds");
  const size_t hw = static_cast<size_t>(dataset.height) * dataset.width;
  Batch batch;
  batch.images = Tensor::zeros({static_cast<int>(count), 3, dataset.height, dataset.width});
  batch.class_labels.resize(count);
  batch.perm_labels.assign(count, 0);
  for (size_t i = 0; i < count; ++i) {
    batch.class_labels[i] = dataset.class_labels[first + i];
    emit_image(dataset.images[first + i].data(), batch.images.data() + i * 3 * hw, hw, stats);
  }
  return batch;
}

}  // namespace fern
