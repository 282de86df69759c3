#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ueraser/augment.hpp"
#include "ueraser/data.hpp"
#include "ueraser/model.hpp"
#include "ueraser/perturb.hpp"

namespace ueraser {

enum class Variant : std::uint8_t { plain = 0, lite = 1, ueraser = 2, max = 3, at = 4 };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct TrainConfig {
  Variant variant = Variant::plain;
  int epochs = 30;       // E
  int warmup = 0;        // W: epochs 1..W use error-maximizing selection
  int repeats = 1;       // K
  int batch_size = 128;  // B
  float lr = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  std::uint64_t seed = 1;
  int eval_every = 1;
  float grad_clip = 10.0f;  // global-norm guard for large K

  // PGD baseline settings (variant == at)
  float at_epsilon = 4.0f / 255.0f;
  int at_steps = 7;

  void validate() const;  // throws ConfigError on inconsistent settings
};

struct MetricsRecord {
  int epoch = 0;
  std::string split;  // "train" | "test"
  double accuracy = 0.0;
  double mean_loss = 0.0;
  double wall_ms = 0.0;
  // train split only: mean of the max-over-K losses and of the first-sample
  // losses. The former dominates the latter per batch.
  std::optional<double> selected_loss_mean;
  std::optional<double> preselect_loss_mean;
};

struct SelectResult {
  Tensor images;                        // selected augmented batch {B,3,H,W}
  std::vector<PolicySample> samples;    // winning sample per image
  std::vector<int> winner_index;        // argmax j, ties to lowest j
  std::vector<float> selected_losses;   // per image
  std::vector<float> first_losses;      // loss of sample j=0 per image
  std::vector<std::vector<float>> all_losses;  // B x K
};

// For each image draw K policies, evaluate each augmented copy's loss under
// frozen params, and keep the argmax (ties to the lowest sample index).
// full_pipeline=false restricts sampling to crop/flip.
SelectResult max_loss_select(const ModelParams& params, const Tensor& images,
                             const std::vector<int>& labels, int k, std::uint64_t seed,
                             int epoch, const std::vector<std::size_t>& image_indices,
                             bool full_pipeline);

struct TrainResult {
  ModelParams params;
  std::vector<MetricsRecord> metrics;
  double final_test_accuracy = 0.0;
  double best_test_accuracy = 0.0;
  int best_epoch = 0;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;
using CheckpointSink = std::function<void(const ModelParams&, int epoch)>;

// Runs the configured variant. Deterministic in (config, datasets) and
// independent of the worker-thread count. resume_params/start_epoch pick a
// run up from a checkpoint. Throws DivergenceError (after invoking the
// checkpoint sink) if an update goes non-finite.
TrainResult train(const TrainConfig& config, const LabeledDataset& train_ds,
                  const LabeledDataset& test_ds, const MetricsSink& on_metrics = {},
                  const CheckpointSink& on_checkpoint = {},
                  const ModelParams* resume_params = nullptr, int start_epoch = 0);

// PGD adversarial training: per batch, at_steps sign-gradient ascent steps
// of size 2.5*eps/steps from a random start in the linf ball, projected
// each step, then one SGD step on the adversarial batch. steps=0 reduces
// to plain training.
TrainResult adversarial_train(const TrainConfig& config, const LabeledDataset& train_ds,
                              const LabeledDataset& test_ds, const MetricsSink& on_metrics = {},
                              const CheckpointSink& on_checkpoint = {},
                              const ModelParams* resume_params = nullptr, int start_epoch = 0);

struct Evaluation {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::vector<std::vector<int>> confusion;  // [true][predicted]
};

// Clean evaluation: no augmentation; confusion[i][j] counts true i
// predicted j; accuracy is trace/total.
Evaluation evaluate(const ModelParams& params, const LabeledDataset& ds);

}  // namespace ueraser
