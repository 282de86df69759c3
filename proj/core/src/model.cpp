#include "ueraser/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "ueraser/parallel.hpp"
#include "ueraser/rng.hpp"

namespace ueraser {

namespace {

Tensor kaiming_uniform(std::vector<int> shape, int fan_in, RngStream rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<float>(rng.uniform(-bound, bound));
  return t;
}

// One image, 3x3 same-padding convolution. Inner loop over x is a shifted
// axpy so it vectorizes.
void conv3x3_same(const float* in, int ic_n, int h, int w, const float* weight,
                  const float* bias, float* out, int oc_n) {
  const int plane = h * w;
  for (int oc = 0; oc < oc_n; ++oc) {
    float* op = out + static_cast<std::size_t>(oc) * plane;
    std::fill(op, op + plane, bias[oc]);
    for (int ic = 0; ic < ic_n; ++ic) {
      const float* ip = in + static_cast<std::size_t>(ic) * plane;
      const float* wp = weight + (static_cast<std::size_t>(oc) * ic_n + ic) * 9;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const float wv = wp[ky * 3 + kx];
          const int y0 = std::max(0, 1 - ky), y1 = std::min(h, h + 1 - ky);
          const int x0 = std::max(0, 1 - kx), x1 = std::min(w, w + 1 - kx);
          for (int y = y0; y < y1; ++y) {
            float* orow = op + y * w;
            const float* irow = ip + (y + ky - 1) * w + (kx - 1);
            for (int x = x0; x < x1; ++x) orow[x] += wv * irow[x];
          }
        }
      }
    }
  }
}

// relu then 2x2 max pool, stride 2; records the argmax offset (y*w+x in the
// input plane). Ties resolve to the first position in scan order.
void relu_maxpool2(const float* in, int c_n, int h, int w, float* out, int* idx) {
  const int ho = h / 2, wo = w / 2;
  for (int c = 0; c < c_n; ++c) {
    const float* ip = in + static_cast<std::size_t>(c) * h * w;
    float* op = out + static_cast<std::size_t>(c) * ho * wo;
    int* xp = idx + static_cast<std::size_t>(c) * ho * wo;
    for (int y = 0; y < ho; ++y) {
      for (int x = 0; x < wo; ++x) {
        int best = (2 * y) * w + 2 * x;
        float bv = std::max(0.0f, ip[best]);
        const int cand[3] = {(2 * y) * w + 2 * x + 1, (2 * y + 1) * w + 2 * x,
                             (2 * y + 1) * w + 2 * x + 1};
        for (int k = 0; k < 3; ++k) {
          float v = std::max(0.0f, ip[cand[k]]);
          if (v > bv) {
            bv = v;
            best = cand[k];
          }
        }
        op[y * wo + x] = bv;
        xp[y * wo + x] = best;
      }
    }
  }
}

// Scatter pooled gradients back through argmax and the relu mask.
void relu_maxpool2_backward(const float* pre, const float* dout, const int* idx, int c_n,
                            int h, int w, float* din) {
  const int ho = h / 2, wo = w / 2;
  std::fill(din, din + static_cast<std::size_t>(c_n) * h * w, 0.0f);
  for (int c = 0; c < c_n; ++c) {
    const float* pp = pre + static_cast<std::size_t>(c) * h * w;
    const float* dp = dout + static_cast<std::size_t>(c) * ho * wo;
    const int* xp = idx + static_cast<std::size_t>(c) * ho * wo;
    float* gp = din + static_cast<std::size_t>(c) * h * w;
    for (int i = 0; i < ho * wo; ++i) {
      const int j = xp[i];
      if (pp[j] > 0.0f) gp[j] += dp[i];
    }
  }
}

// dL/din for a 3x3 same conv (full correlation with flipped kernel).
void conv3x3_same_input_grad(const float* dout, int oc_n, int h, int w, const float* weight,
                             float* din, int ic_n) {
  const int plane = h * w;
  std::fill(din, din + static_cast<std::size_t>(ic_n) * plane, 0.0f);
  for (int oc = 0; oc < oc_n; ++oc) {
    const float* dp = dout + static_cast<std::size_t>(oc) * plane;
    for (int ic = 0; ic < ic_n; ++ic) {
      float* gp = din + static_cast<std::size_t>(ic) * plane;
      const float* wp = weight + (static_cast<std::size_t>(oc) * ic_n + ic) * 9;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const float wv = wp[ky * 3 + kx];
          const int y0 = std::max(0, 1 - ky), y1 = std::min(h, h + 1 - ky);
          const int x0 = std::max(0, 1 - kx), x1 = std::min(w, w + 1 - kx);
          for (int y = y0; y < y1; ++y) {
            float* grow = gp + (y + ky - 1) * w + (kx - 1);
            const float* drow = dp + y * w;
            for (int x = x0; x < x1; ++x) grow[x] += wv * drow[x];
          }
        }
      }
    }
  }
}

// Weight/bias gradients for one image, accumulated into 64-bit scratch.
void conv3x3_same_param_grad(const float* in, int ic_n, int h, int w, const float* dout,
                             int oc_n, double* dweight, double* dbias) {
  const int plane = h * w;
  for (int oc = 0; oc < oc_n; ++oc) {
    const float* dp = dout + static_cast<std::size_t>(oc) * plane;
    double bsum = 0.0;
    for (int i = 0; i < plane; ++i) bsum += dp[i];
    dbias[oc] += bsum;
    for (int ic = 0; ic < ic_n; ++ic) {
      const float* ip = in + static_cast<std::size_t>(ic) * plane;
      double* wp = dweight + (static_cast<std::size_t>(oc) * ic_n + ic) * 9;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const int y0 = std::max(0, 1 - ky), y1 = std::min(h, h + 1 - ky);
          const int x0 = std::max(0, 1 - kx), x1 = std::min(w, w + 1 - kx);
          double acc = 0.0;
          for (int y = y0; y < y1; ++y) {
            const float* drow = dp + y * w;
            const float* irow = ip + (y + ky - 1) * w + (kx - 1);
            for (int x = x0; x < x1; ++x) acc += static_cast<double>(drow[x]) * irow[x];
          }
          wp[ky * 3 + kx] += acc;
        }
      }
    }
  }
}

struct LayerDims {
  int h, w, h2, w2, h4, w4, flat;
};

LayerDims dims_for(const ModelParams& p) {
  LayerDims d;
  d.h = p.in_h;
  d.w = p.in_w;
  d.h2 = d.h / 2;
  d.w2 = d.w / 2;
  d.h4 = d.h / 4;
  d.w4 = d.w / 4;
  d.flat = ModelParams::kConv2Out * d.h4 * d.w4;
  return d;
}

}  // namespace

ModelParams ModelParams::init(int in_h, int in_w, int num_classes, std::uint64_t seed) {
  if (in_h < 4 || in_w < 4 || in_h % 4 != 0 || in_w % 4 != 0)
    throw ConfigError("model input size must be >= 4 and divisible by 4");
  if (num_classes < 2) throw ConfigError("model needs at least 2 classes");

  ModelParams p;
  p.in_h = in_h;
  p.in_w = in_w;
  p.num_classes = num_classes;

  p.conv1_w = kaiming_uniform({kConv1Out, 3, 3, 3}, 3 * 9, derive_stream(seed, "model.init", 0));
  p.conv1_b = Tensor({kConv1Out});
  p.conv2_w =
      kaiming_uniform({kConv2Out, kConv1Out, 3, 3}, kConv1Out * 9, derive_stream(seed, "model.init", 1));
  p.conv2_b = Tensor({kConv2Out});
  const int flat = p.flat_dim();
  p.fc_w = kaiming_uniform({num_classes, flat}, flat, derive_stream(seed, "model.init", 2));
  p.fc_b = Tensor({num_classes});

  p.m_conv1_w = Tensor(p.conv1_w.shape());
  p.m_conv1_b = Tensor(p.conv1_b.shape());
  p.m_conv2_w = Tensor(p.conv2_w.shape());
  p.m_conv2_b = Tensor(p.conv2_b.shape());
  p.m_fc_w = Tensor(p.fc_w.shape());
  p.m_fc_b = Tensor(p.fc_b.shape());
  return p;
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::named_params() {
  return {{"conv1.weight", &conv1_w}, {"conv1.bias", &conv1_b}, {"conv2.weight", &conv2_w},
          {"conv2.bias", &conv2_b},   {"fc.weight", &fc_w},     {"fc.bias", &fc_b}};
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named_params() const {
  return {{"conv1.weight", &conv1_w}, {"conv1.bias", &conv1_b}, {"conv2.weight", &conv2_w},
          {"conv2.bias", &conv2_b},   {"fc.weight", &fc_w},     {"fc.bias", &fc_b}};
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::named_momentum() {
  return {{"momentum.conv1.weight", &m_conv1_w}, {"momentum.conv1.bias", &m_conv1_b},
          {"momentum.conv2.weight", &m_conv2_w}, {"momentum.conv2.bias", &m_conv2_b},
          {"momentum.fc.weight", &m_fc_w},       {"momentum.fc.bias", &m_fc_b}};
}

bool ModelParams::all_finite() const {
  for (const auto& [name, t] : named_params())
    if (!t->all_finite()) return false;
  return true;
}

void GradTape::clear() {
  recorded = false;
  input = Tensor();
  conv1_pre = Tensor();
  pool1_out = Tensor();
  pool1_idx.clear();
  conv2_pre = Tensor();
  pool2_out = Tensor();
  pool2_idx.clear();
  logits = Tensor();
}

Tensor forward(const ModelParams& params, const Tensor& batch, GradTape* tape) {
  if (batch.rank() != 4 || batch.dim(1) != 3 || batch.dim(2) != params.in_h ||
      batch.dim(3) != params.in_w)
    throw ConfigError("forward: batch shape does not match model input");

  const LayerDims d = dims_for(params);
  const int bsz = batch.dim(0);
  const int c1 = ModelParams::kConv1Out, c2 = ModelParams::kConv2Out;

  Tensor conv1_pre({bsz, c1, d.h, d.w});
  Tensor pool1({bsz, c1, d.h2, d.w2});
  std::vector<int> pool1_idx(static_cast<std::size_t>(bsz) * c1 * d.h2 * d.w2);
  Tensor conv2_pre({bsz, c2, d.h2, d.w2});
  Tensor pool2({bsz, c2, d.h4, d.w4});
  std::vector<int> pool2_idx(static_cast<std::size_t>(bsz) * c2 * d.h4 * d.w4);
  Tensor logits({bsz, params.num_classes});

  parallel_for(static_cast<std::size_t>(bsz), [&](std::size_t b) {
    const float* in = batch.data() + b * 3u * d.h * d.w;
    float* pre1 = conv1_pre.data() + b * static_cast<std::size_t>(c1) * d.h * d.w;
    conv3x3_same(in, 3, d.h, d.w, params.conv1_w.data(), params.conv1_b.data(), pre1, c1);

    float* p1 = pool1.data() + b * static_cast<std::size_t>(c1) * d.h2 * d.w2;
    int* i1 = pool1_idx.data() + b * static_cast<std::size_t>(c1) * d.h2 * d.w2;
    relu_maxpool2(pre1, c1, d.h, d.w, p1, i1);

    float* pre2 = conv2_pre.data() + b * static_cast<std::size_t>(c2) * d.h2 * d.w2;
    conv3x3_same(p1, c1, d.h2, d.w2, params.conv2_w.data(), params.conv2_b.data(), pre2, c2);

    float* p2 = pool2.data() + b * static_cast<std::size_t>(c2) * d.h4 * d.w4;
    int* i2 = pool2_idx.data() + b * static_cast<std::size_t>(c2) * d.h4 * d.w4;
    relu_maxpool2(pre2, c2, d.h2, d.w2, p2, i2);

    float* lg = logits.data() + b * static_cast<std::size_t>(params.num_classes);
    for (int c = 0; c < params.num_classes; ++c) {
      const float* wrow = params.fc_w.data() + static_cast<std::size_t>(c) * d.flat;
      float acc = params.fc_b[c];
      for (int k = 0; k < d.flat; ++k) acc += wrow[k] * p2[k];
      lg[c] = acc;
    }
  });

  if (!logits.all_finite()) throw DivergenceError("forward produced non-finite logits");

  if (tape) {
    tape->recorded = true;
    tape->input = batch;
    tape->conv1_pre = std::move(conv1_pre);
    tape->pool1_out = std::move(pool1);
    tape->pool1_idx = std::move(pool1_idx);
    tape->conv2_pre = std::move(conv2_pre);
    tape->pool2_out = std::move(pool2);
    tape->pool2_idx = std::move(pool2_idx);
    tape->logits = logits;
  }
  return logits;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ConfigError("cross_entropy: logits must be {B,C}");
  const int bsz = logits.dim(0), ncls = logits.dim(1);
  if (static_cast<int>(labels.size()) != bsz)
    throw ConfigError("cross_entropy: label count != batch size");

  Tensor losses({bsz});
  for (int b = 0; b < bsz; ++b) {
    const int y = labels[b];
    if (y < 0 || y >= ncls) throw InputError("cross_entropy: label out of range");
    const float* row = logits.data() + static_cast<std::size_t>(b) * ncls;
    float m = row[0];
    for (int c = 1; c < ncls; ++c) m = std::max(m, row[c]);
    double s = 0.0;
    for (int c = 0; c < ncls; ++c) s += std::exp(static_cast<double>(row[c]) - m);
    losses[b] = static_cast<float>(std::log(s) + m - row[y]);
  }
  return losses;
}

Tensor softmax_rows(const Tensor& logits) {
  const int bsz = logits.dim(0), ncls = logits.dim(1);
  Tensor probs({bsz, ncls});
  for (int b = 0; b < bsz; ++b) {
    const float* row = logits.data() + static_cast<std::size_t>(b) * ncls;
    float m = row[0];
    for (int c = 1; c < ncls; ++c) m = std::max(m, row[c]);
    double s = 0.0;
    for (int c = 0; c < ncls; ++c) s += std::exp(static_cast<double>(row[c]) - m);
    for (int c = 0; c < ncls; ++c)
      probs.at(b, c) = static_cast<float>(std::exp(static_cast<double>(row[c]) - m) / s);
  }
  return probs;
}

Tensor cross_entropy_logit_grad(const Tensor& logits, const std::vector<int>& labels,
                                const std::vector<float>& example_weights) {
  const int bsz = logits.dim(0), ncls = logits.dim(1);
  if (!example_weights.empty() && static_cast<int>(example_weights.size()) != bsz)
    throw ConfigError("cross_entropy_logit_grad: weight count != batch size");
  Tensor grad = softmax_rows(logits);
  for (int b = 0; b < bsz; ++b) {
    const int y = labels[b];
    if (y < 0 || y >= ncls) throw InputError("cross_entropy_logit_grad: label out of range");
    const float w = example_weights.empty() ? 1.0f / static_cast<float>(bsz) : example_weights[b];
    for (int c = 0; c < ncls; ++c) grad.at(b, c) = grad.at(b, c) * w;
    grad.at(b, y) -= w;
  }
  return grad;
}

namespace {

// Per-image backward. Parameter gradients go to 64-bit scratch (may be
// null when only the input gradient is wanted).
void backward_one_image(const ModelParams& p, const LayerDims& d, const GradTape& tape,
                        std::size_t b, const float* dlogits, float* dinput, double* dw1,
                        double* db1, double* dw2, double* db2, double* dwf, double* dbf) {
  const int c1 = ModelParams::kConv1Out, c2 = ModelParams::kConv2Out;
  const std::size_t plane1 = static_cast<std::size_t>(d.h) * d.w;
  const std::size_t plane2 = static_cast<std::size_t>(d.h2) * d.w2;

  const float* pool2 = tape.pool2_out.data() + b * c2 * static_cast<std::size_t>(d.h4) * d.w4;

  // dense
  std::vector<float> dflat(static_cast<std::size_t>(d.flat), 0.0f);
  for (int c = 0; c < p.num_classes; ++c) {
    const float g = dlogits[c];
    const float* wrow = p.fc_w.data() + static_cast<std::size_t>(c) * d.flat;
    for (int k = 0; k < d.flat; ++k) dflat[k] += g * wrow[k];
    if (dwf) {
      double* dwrow = dwf + static_cast<std::size_t>(c) * d.flat;
      for (int k = 0; k < d.flat; ++k) dwrow[k] += static_cast<double>(g) * pool2[k];
      dbf[c] += g;
    }
  }

  // pool2 + relu2
  std::vector<float> dpre2(static_cast<std::size_t>(c2) * plane2);
  relu_maxpool2_backward(tape.conv2_pre.data() + b * c2 * plane2, dflat.data(),
                         tape.pool2_idx.data() + b * static_cast<std::size_t>(c2) * d.h4 * d.w4,
                         c2, d.h2, d.w2, dpre2.data());

  const float* pool1 = tape.pool1_out.data() + b * c1 * plane2;
  if (dw2) conv3x3_same_param_grad(pool1, c1, d.h2, d.w2, dpre2.data(), c2, dw2, db2);

  std::vector<float> dpool1(static_cast<std::size_t>(c1) * plane2);
  conv3x3_same_input_grad(dpre2.data(), c2, d.h2, d.w2, p.conv2_w.data(), dpool1.data(), c1);

  // pool1 + relu1
  std::vector<float> dpre1(static_cast<std::size_t>(c1) * plane1);
  relu_maxpool2_backward(tape.conv1_pre.data() + b * c1 * plane1, dpool1.data(),
                         tape.pool1_idx.data() + b * static_cast<std::size_t>(c1) * d.h2 * d.w2,
                         c1, d.h, d.w, dpre1.data());

  const float* in = tape.input.data() + b * 3u * plane1;
  if (dw1) conv3x3_same_param_grad(in, 3, d.h, d.w, dpre1.data(), c1, dw1, db1);

  conv3x3_same_input_grad(dpre1.data(), c1, d.h, d.w, p.conv1_w.data(), dinput, 3);
}

void require_tape(const GradTape& tape) {
  if (!tape.recorded) throw StateError("backward called without a recorded forward");
}

}  // namespace

Gradients backward(const ModelParams& params, GradTape& tape, const std::vector<int>& labels,
                   const std::vector<float>& example_weights) {
  require_tape(tape);
  const LayerDims d = dims_for(params);
  const int bsz = tape.input.dim(0);

  const Tensor dlogits = cross_entropy_logit_grad(tape.logits, labels, example_weights);

  Gradients g;
  g.conv1_w = Tensor(params.conv1_w.shape());
  g.conv1_b = Tensor(params.conv1_b.shape());
  g.conv2_w = Tensor(params.conv2_w.shape());
  g.conv2_b = Tensor(params.conv2_b.shape());
  g.fc_w = Tensor(params.fc_w.shape());
  g.fc_b = Tensor(params.fc_b.shape());
  g.input = Tensor(tape.input.shape());

  const std::size_t nw1 = params.conv1_w.size(), nb1 = params.conv1_b.size();
  const std::size_t nw2 = params.conv2_w.size(), nb2 = params.conv2_b.size();
  const std::size_t nwf = params.fc_w.size(), nbf = params.fc_b.size();
  const std::size_t per_image = nw1 + nb1 + nw2 + nb2 + nwf + nbf;

  std::vector<double> scratch(per_image * static_cast<std::size_t>(bsz), 0.0);

  parallel_for(static_cast<std::size_t>(bsz), [&](std::size_t b) {
    double* s = scratch.data() + per_image * b;
    double* dw1 = s;
    double* db1 = dw1 + nw1;
    double* dw2 = db1 + nb1;
    double* db2 = dw2 + nw2;
    double* dwf = db2 + nb2;
    double* dbf = dwf + nwf;
    backward_one_image(params, d, tape, b,
                       dlogits.data() + b * static_cast<std::size_t>(params.num_classes),
                       g.input.data() + b * 3u * d.h * d.w, dw1, db1, dw2, db2, dwf, dbf);
  });

  // Deterministic reduction in image order.
  auto reduce = [&](Tensor& dst, std::size_t offset, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (int b = 0; b < bsz; ++b) acc += scratch[per_image * b + offset + i];
      dst[i] = static_cast<float>(acc);
    }
  };
  std::size_t off = 0;
  reduce(g.conv1_w, off, nw1);
  off += nw1;
  reduce(g.conv1_b, off, nb1);
  off += nb1;
  reduce(g.conv2_w, off, nw2);
  off += nw2;
  reduce(g.conv2_b, off, nb2);
  off += nb2;
  reduce(g.fc_w, off, nwf);
  off += nwf;
  reduce(g.fc_b, off, nbf);

  tape.clear();
  return g;
}

Tensor backward_input(const ModelParams& params, GradTape& tape, const std::vector<int>& labels) {
  require_tape(tape);
  const LayerDims d = dims_for(params);
  const int bsz = tape.input.dim(0);

  const Tensor dlogits = cross_entropy_logit_grad(tape.logits, labels);
  Tensor dinput(tape.input.shape());

  parallel_for(static_cast<std::size_t>(bsz), [&](std::size_t b) {
    backward_one_image(params, d, tape, b,
                       dlogits.data() + b * static_cast<std::size_t>(params.num_classes),
                       dinput.data() + b * 3u * d.h * d.w, nullptr, nullptr, nullptr, nullptr,
                       nullptr, nullptr);
  });

  tape.clear();
  return dinput;
}

double Gradients::param_norm() const {
  double s = 0.0;
  for (const auto& [name, t] : named())
    for (std::size_t i = 0; i < t->size(); ++i) s += static_cast<double>((*t)[i]) * (*t)[i];
  return std::sqrt(s);
}

void Gradients::scale(float s) {
  for (Tensor* t : {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &fc_w, &fc_b, &input})
    for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] *= s;
}

std::vector<std::pair<std::string, const Tensor*>> Gradients::named() const {
  return {{"conv1.weight", &conv1_w}, {"conv1.bias", &conv1_b}, {"conv2.weight", &conv2_w},
          {"conv2.bias", &conv2_b},   {"fc.weight", &fc_w},     {"fc.bias", &fc_b}};
}

void sgd_step(ModelParams& params, const Gradients& grads, float lr, float momentum,
              float weight_decay) {
  const Tensor* gs[6] = {&grads.conv1_w, &grads.conv1_b, &grads.conv2_w,
                         &grads.conv2_b, &grads.fc_w,    &grads.fc_b};
  auto named = params.named_params();
  auto mom = params.named_momentum();
  for (int i = 0; i < 6; ++i) {
    Tensor& theta = *named[i].second;
    Tensor& v = *mom[i].second;
    const Tensor& g = *gs[i];
    check_same_shape(theta, g, "sgd_step");
    bool ok = true;
    for (std::size_t k = 0; k < theta.size(); ++k) {
      v[k] = momentum * v[k] + g[k] + weight_decay * theta[k];
      theta[k] -= lr * v[k];
      ok = ok && std::isfinite(theta[k]) && std::isfinite(v[k]);
    }
    if (!ok) throw DivergenceError("non-finite update in " + named[i].first);
  }
}

// ---------------------------------------------------------------------------
// Checkpoint io

namespace {

constexpr char kMagic[4] = {'U', 'E', 'R', 'M'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ofstream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u64(std::ofstream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_string(std::ofstream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
void write_section(std::ofstream& os, const std::string& name, const float* data,
                   std::size_t count) {
  write_string(os, name);
  write_u64(os, count);
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * 4));
}

std::uint32_t read_u32(std::ifstream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::uint64_t read_u64(std::ifstream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::string read_string(std::ifstream& is) {
  std::uint32_t n = read_u32(is);
  if (n > (1u << 20)) throw FormatError("checkpoint: unreasonable string length");
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, int epoch) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  write_string(os, "smallconvnet in=3x" + std::to_string(params.in_h) + "x" +
                       std::to_string(params.in_w) + " conv=16,32 classes=" +
                       std::to_string(params.num_classes));

  ModelParams& mut = const_cast<ModelParams&>(params);
  auto named = mut.named_params();
  auto mom = mut.named_momentum();
  write_u32(os, static_cast<std::uint32_t>(named.size() + mom.size() + 1));
  for (auto& [name, t] : named) write_section(os, name, t->data(), t->size());
  for (auto& [name, t] : mom) write_section(os, name, t->data(), t->size());
  const float ep = static_cast<float>(epoch);
  write_section(os, "trainer.epoch", &ep, 1);
  if (!os) throw FormatError("checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic in " + path.string());
  if (read_u32(is) != kVersion) throw FormatError("checkpoint: unsupported version");

  const std::string arch = read_string(is);
  int h = 0, w = 0, c = 0;
  if (std::sscanf(arch.c_str(), "smallconvnet in=3x%dx%d conv=16,32 classes=%d", &h, &w, &c) != 3)
    throw FormatError("checkpoint: unrecognized architecture descriptor '" + arch + "'");

  Checkpoint ck;
  ck.params = ModelParams::init(h, w, c, 0);

  auto named = ck.params.named_params();
  auto mom = ck.params.named_momentum();
  const std::uint32_t nsec = read_u32(is);
  for (std::uint32_t i = 0; i < nsec; ++i) {
    const std::string name = read_string(is);
    const std::uint64_t count = read_u64(is);
    std::vector<float> buf(count);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count * 4));
    if (!is) throw FormatError("checkpoint: truncated section " + name);

    Tensor* dst = nullptr;
    for (auto& [n, t] : named)
      if (n == name) dst = t;
    for (auto& [n, t] : mom)
      if (n == name) dst = t;
    if (dst) {
      if (dst->size() != count) throw FormatError("checkpoint: size mismatch in " + name);
      std::copy(buf.begin(), buf.end(), dst->data());
    } else if (name == "trainer.epoch") {
      if (count != 1) throw FormatError("checkpoint: bad trainer.epoch section");
      ck.epoch = static_cast<int>(buf[0]);
    } else {
      throw FormatError("checkpoint: unknown section " + name);
    }
  }
  return ck;
}

}  // namespace ueraser
