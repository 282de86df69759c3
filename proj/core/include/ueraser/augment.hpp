#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "ueraser/rng.hpp"
#include "ueraser/tensor.hpp"

namespace ueraser {

enum class PlasmaKind : std::uint8_t { brightness = 0, contrast = 1 };

// TrivialAugment op set (fixed 14 ops).
enum class TaOp : std::uint8_t {
  identity = 0,
  shear_x,
  shear_y,
  translate_x,
  translate_y,
  rotate,
  brightness,
  color,
  contrast,
  sharpness,
  posterize,
  solarize,
  autocontrast,
  equalize,
};
constexpr int kTaOpCount = 14;
constexpr int kTaBins = 30;  // strength bins 0..30

// Strength at bin 30 for each parametric op; strength is linear in bin/30.
constexpr float kShearMax = 0.3f;
constexpr float kTranslateFracMax = 1.0f / 3.0f;
constexpr float kRotateDegPerUnit = 135.0f;  // capped below for small images
constexpr float kRotateCapDeg = 30.0f;
constexpr float kEnhanceDeltaMax = 0.99f;   // PIL-style factor = 1 +- delta
constexpr int kPosterizeMinBits = 2;

constexpr int kCropPad = 4;

// All 3! channel permutations; index 0 is the identity.
constexpr std::array<std::array<std::uint8_t, 3>, 6> kChannelPerms = {{
    {0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};

// One fully materialized draw of the augmentation pipeline. apply() is a
// pure function of (sample, image): replaying a sample is bit-exact.
struct PolicySample {
  // standard stage: pad-4 random crop (offsets relative to center) + flip
  int crop_dx = 0;  // [-kCropPad, kCropPad]
  int crop_dy = 0;
  bool flip = false;

  bool plasma_on = false;
  PlasmaKind plasma_kind = PlasmaKind::brightness;
  float roughness = 0.1f;   // [0.1, 0.7]
  float intensity = 0.0f;   // [0.0, 1.0]
  std::uint64_t field_seed = 0;

  TaOp ta_op = TaOp::identity;
  int ta_bin = 0;           // [0, 30]
  bool ta_positive = true;  // direction of signed ops

  bool shuffle_on = false;
  std::array<std::uint8_t, 3> channel_perm = {0, 1, 2};

  std::string to_json() const;
  static PolicySample from_json(const std::string& text);

  bool operator==(const PolicySample&) const = default;
};

// Diamond-square plasma field in [0,1], deterministic in (h, w, roughness,
// seed). Runs on the smallest (2^k+1)^2 grid covering (h,w): corner values
// U(0,1), displacement amplitude scaled by roughness after each subdivision
// level, min-max normalized, cropped.
Tensor plasma_field(int h, int w, float roughness, std::uint64_t seed);

// Internals exposed for the degenerate-normalization test: base_amplitude
// scales all displacements, corner_override pins the four corners.
Tensor plasma_field_detail(int h, int w, float roughness, std::uint64_t seed,
                           float base_amplitude, const float* corner_override);

// img' = clamp(img + intensity * (2*field - 1)); the field is shared
// across channels.
Tensor plasma_brightness(const Tensor& img, float intensity, const Tensor& field);

// img' = clamp(0.5 + (img - 0.5) * exp(2*field - 1)).
Tensor plasma_contrast(const Tensor& img, const Tensor& field);

// Output channel i reads input channel perm[i]; perm must be a bijection.
Tensor channel_shuffle(const Tensor& img, const std::array<std::uint8_t, 3>& perm);

Tensor trivial_augment(const Tensor& img, TaOp op, int bin, bool positive);

// Stream for the policy of (epoch, dataset-global image index, repeat j):
// counter-based, so batch augmentation is order- and thread-independent.
RngStream policy_stream(std::uint64_t seed, int epoch, std::uint64_t image_index, int repeat);

// Full pipeline draw: crop/flip, plasma gate p=0.5, one TA op, shuffle
// gate p=0.5.
PolicySample sample_policy(RngStream& rng);

// Crop/flip only (standard-training pipeline).
PolicySample sample_standard_policy(RngStream& rng);

// Attacker-side pipeline over a stage subset; no crop/flip, gates and
// parameter draws mirror the defender's.
PolicySample sample_adaptive_policy(RngStream& rng, bool use_plasma, bool use_trivial,
                                    bool use_shuffle);

// Pipeline order: crop/flip -> plasma -> TrivialAugment -> channel shuffle.
Tensor apply(const PolicySample& sample, const Tensor& img);

// Vector-Jacobian product of apply at img. Differentiable photometric and
// geometric ops backpropagate exactly; posterize, equalize and channel
// shuffle pass gradients straight through.
Tensor apply_vjp(const PolicySample& sample, const Tensor& img, const Tensor& upstream);

}  // namespace ueraser
