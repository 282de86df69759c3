#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ueraser/tensor.hpp"

namespace ueraser {

// Fixed small classifier: conv3x3(3->16, pad 1), relu, maxpool2,
// conv3x3(16->32, pad 1), relu, maxpool2, flatten, dense(->C).
// Input height/width must be divisible by 4. No normalization layers, so
// each image's activations are independent of the rest of the batch.
struct ModelParams {
  int in_h = 0;
  int in_w = 0;
  int num_classes = 0;

  Tensor conv1_w;  // {16,3,3,3}
  Tensor conv1_b;  // {16}
  Tensor conv2_w;  // {32,16,3,3}
  Tensor conv2_b;  // {32}
  Tensor fc_w;     // {C, 32*(H/4)*(W/4)}
  Tensor fc_b;     // {C}

  Tensor m_conv1_w, m_conv1_b, m_conv2_w, m_conv2_b, m_fc_w, m_fc_b;

  static constexpr int kConv1Out = 16;
  static constexpr int kConv2Out = 32;

  // Kaiming-uniform fan-in weights, zero biases, zero momentum.
  static ModelParams init(int in_h, int in_w, int num_classes, std::uint64_t seed);

  int flat_dim() const { return kConv2Out * (in_h / 4) * (in_w / 4); }

  std::vector<std::pair<std::string, Tensor*>> named_params();
  std::vector<std::pair<std::string, const Tensor*>> named_params() const;
  std::vector<std::pair<std::string, Tensor*>> named_momentum();

  bool all_finite() const;
};

// Activations recorded by one forward pass; consumed by one backward.
struct GradTape {
  bool recorded = false;
  Tensor input;      // {B,3,H,W}
  Tensor conv1_pre;  // {B,16,H,W} pre-relu
  Tensor pool1_out;  // {B,16,H/2,W/2} relu+maxpool
  std::vector<int> pool1_idx;
  Tensor conv2_pre;  // {B,32,H/2,W/2}
  Tensor pool2_out;  // {B,32,H/4,W/4}
  std::vector<int> pool2_idx;
  Tensor logits;     // {B,C}

  void clear();
};

// Logits for a batch {B,3,H,W}. Pure; records activations when tape given.
Tensor forward(const ModelParams& params, const Tensor& batch, GradTape* tape = nullptr);

// Per-example softmax cross-entropy losses {B}; log-sum-exp stabilized,
// accumulated in 64-bit.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Softmax probabilities per row (64-bit inner accumulation).
Tensor softmax_rows(const Tensor& logits);

// d(sum_b w_b * loss_b)/dlogits = w_b * (softmax - onehot). Empty weights
// means the mean loss (w_b = 1/B).
Tensor cross_entropy_logit_grad(const Tensor& logits, const std::vector<int>& labels,
                                const std::vector<float>& example_weights = {});

struct Gradients {
  Tensor conv1_w, conv1_b, conv2_w, conv2_b, fc_w, fc_b;
  Tensor input;  // d loss / d batch, {B,3,H,W}

  double param_norm() const;  // global l2 norm over parameter grads
  void scale(float s);
  std::vector<std::pair<std::string, const Tensor*>> named() const;
};

// Gradient of the weighted-sum loss (default: mean over the batch) with
// respect to every parameter and the input batch. Consumes the tape;
// calling again without a new forward is a state error.
Gradients backward(const ModelParams& params, GradTape& tape, const std::vector<int>& labels,
                   const std::vector<float>& example_weights = {});

// Input gradient only; skips all parameter-gradient work. Same tape contract.
Tensor backward_input(const ModelParams& params, GradTape& tape, const std::vector<int>& labels);

// v <- mu*v + g + wd*theta; theta <- theta - lr*v. Throws DivergenceError
// naming the parameter when an update goes non-finite.
void sgd_step(ModelParams& params, const Gradients& grads, float lr, float momentum,
              float weight_decay);

// Checkpoint container: magic "UERM", version, architecture descriptor,
// named little-endian float32 sections (weights, momentum, epoch counter).
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, int epoch);

struct Checkpoint {
  ModelParams params;
  int epoch = 0;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ueraser
