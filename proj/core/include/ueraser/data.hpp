#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "ueraser/tensor.hpp"

namespace ueraser {

enum class DatasetTag : std::uint8_t { clean = 0, poisoned = 1, train = 2, test = 3 };

struct LabeledDataset {
  std::vector<Tensor> images;  // each {3,H,W}, values in [0,1]
  std::vector<int> labels;
  int num_classes = 0;
  DatasetTag tag = DatasetTag::clean;

  std::size_t size() const { return images.size(); }
  int height() const { return images.empty() ? 0 : images.front().dim(1); }
  int width() const { return images.empty() ? 0 : images.front().dim(2); }

  void validate() const;  // len/label-range/pixel-range invariants
  std::vector<int> class_histogram() const;
};

// Desk-scale synthetic stand-in for CIFAR: per-class blockwise +-1 spatial
// template shared across channels, plus i.i.d. gaussian pixel noise,
// clamped to [0,1].
struct SynthSpec {
  int height = 16;
  int width = 16;
  int num_classes = 4;
  int train_per_class = 500;
  int test_per_class = 200;
  float class_strength = 0.22f;
  float noise_std = 0.18f;
  std::uint64_t seed = 1;

  void validate() const;
};

std::pair<LabeledDataset, LabeledDataset> synth_dataset(const SynthSpec& spec);

// Standard CIFAR-10 binary batches: 6 files of exactly 10000 records, each
// 1 label byte + 3072 pixel bytes (R plane, G plane, B plane, row-major).
std::pair<LabeledDataset, LabeledDataset> load_cifar10(const std::filesystem::path& dir);

// Writes a dataset back to the CIFAR record layout (train split across
// data_batch_1..5.bin, test into test_batch.bin). Inverse of load_cifar10.
void save_cifar10(const std::filesystem::path& dir, const LabeledDataset& train,
                  const LabeledDataset& test);

// Dataset file: the CIFAR record layout under a small header carrying
// H, W, class count and record count.
void save_dataset(const std::filesystem::path& path, const LabeledDataset& ds);
LabeledDataset load_dataset(const std::filesystem::path& path);

struct Minibatch {
  Tensor images;                    // {B,3,H,W}
  std::vector<int> labels;          // B
  std::vector<std::size_t> indices; // dataset-global image indices
};

// Epoch-keyed deterministic shuffle; the last short batch is kept. Each
// epoch's batches partition the dataset exactly once.
std::vector<Minibatch> minibatches(const LabeledDataset& ds, int batch_size, int epoch,
                                   std::uint64_t seed);

// The shuffle order used by minibatches, exposed for tests.
std::vector<std::size_t> epoch_permutation(std::size_t n, int epoch, std::uint64_t seed);

std::uint8_t pixel_to_byte(float v);
float byte_to_pixel(std::uint8_t b);

}  // namespace ueraser
