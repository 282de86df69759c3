#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "ueraser/data.hpp"
#include "ueraser/perturb.hpp"
#include "ueraser/tensor.hpp"
#include "ueraser/trainer.hpp"

namespace ueraser {

enum class PoisonKind : std::uint8_t { em = 0, lsp = 1, adaptive_em = 2 };

enum class Granularity : std::uint8_t { sample_wise = 0, class_wise = 1 };

// Augmentation stages the adaptive attacker folds into its inner loss.
struct AdaptiveAugs {
  bool plasma = false;
  bool channel_shuffle = false;
  bool trivial = false;

  bool any() const { return plasma || channel_shuffle || trivial; }
};

struct PerturbationSet {
  PoisonKind kind = PoisonKind::em;
  NormKind norm = NormKind::linf;
  float epsilon = 8.0f / 255.0f;
  Granularity granularity = Granularity::sample_wise;
  std::uint64_t seed = 0;
  bool converged = true;  // false: optimizer returned best-so-far at the cap
  double fit_accuracy = 0.0;  // surrogate accuracy on x+delta; not persisted
  std::vector<Tensor> deltas;  // sample-wise: one per image; class-wise: one per class

  // Header (kind, norm, eps, granularity, seed) + raw little-endian floats.
  void save(const std::filesystem::path& path) const;
  static PerturbationSet load(const std::filesystem::path& path);
};

struct PoisonSpec {
  PoisonKind kind = PoisonKind::em;
  float epsilon = 8.0f / 255.0f;  // lsp convention: l2 radius, default 1.0
  NormKind norm = NormKind::linf;
  int surrogate_steps_per_round = 10;  // M SGD steps per outer round
  int delta_steps = 20;                // signed-gradient steps per image per round
  float step_size = 0.0f;              // 0 selects epsilon/10
  int max_rounds = 30;
  float stop_train_accuracy = 0.99f;
  TrainConfig surrogate;               // B, lr, momentum, weight decay
  AdaptiveAugs adaptive;               // adaptive_em only
  double fraction = 1.0;
  std::optional<int> targeted_class;
  std::uint64_t seed = 1;

  void validate() const;
};

// Error-minimizing poison: alternate M surrogate SGD steps on x+delta with
// per-image signed-gradient descent on the loss w.r.t. delta (projected to
// the norm ball, x+delta clamped to [0,1]); stops once the surrogate fits
// the perturbed data to stop_train_accuracy or the round cap is reached.
PerturbationSet em_poison(const LabeledDataset& ds, const PoisonSpec& spec);

// Class-wise blockwise-constant gaussian patterns rescaled to l2 radius
// epsilon; every image of a class receives the same delta.
PerturbationSet lsp_poison(const LabeledDataset& ds, const PoisonSpec& spec);

// em_poison with a freshly sampled augmentation pipeline applied before
// every inner loss evaluation; gradients flow through the differentiable
// ops and straight through the rest. An empty stage subset reproduces
// em_poison exactly.
PerturbationSet adaptive_em_poison(const LabeledDataset& ds, const PoisonSpec& spec);

// Applies deltas to a seeded random subset of size round(fraction*N), or to
// exactly the images of targeted_class when given. Outputs clamp to [0,1].
LabeledDataset apply_poison(const LabeledDataset& ds, const PerturbationSet& pset,
                            double fraction, std::optional<int> targeted_class = std::nullopt,
                            std::uint64_t seed = 1);

}  // namespace ueraser
