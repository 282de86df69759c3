#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "support/fd_check.hpp"
#include "support/oracle.hpp"
#include "ueraser/error.hpp"
#include "ueraser/model.hpp"
#include "ueraser/rng.hpp"

using namespace ueraser;

namespace {

Tensor random_batch(int bsz, int h, int w, std::uint64_t seed) {
  return fd::random_batch(bsz, h, w, seed);
}

ModelParams random_params(int h, int w, int classes, std::uint64_t seed) {
  ModelParams p = ModelParams::init(h, w, classes, seed);
  // nonzero biases so they participate in the checks
  RngStream rng = derive_stream(seed, "test.bias");
  for (auto& [name, t] : p.named_params())
    if (name.ends_with("bias"))
      for (std::size_t i = 0; i < t->size(); ++i)
        (*t)[i] = static_cast<float>(rng.uniform(-0.1, 0.1));
  return p;
}

}  // namespace

TEST_CASE("forward with all-zero weights yields the dense bias in every row") {
  ModelParams p = ModelParams::init(8, 8, 4, 7);
  for (auto& [name, t] : p.named_params()) t->fill(0.0f);
  p.fc_b[0] = 0.3f;
  p.fc_b[1] = -1.25f;
  p.fc_b[2] = 0.0f;
  p.fc_b[3] = 2.5f;

  const Tensor batch = random_batch(3, 8, 8, 11);
  const Tensor logits = forward(p, batch);
  for (int b = 0; b < 3; ++b)
    for (int c = 0; c < 4; ++c) CHECK(logits.at(b, c) == p.fc_b[c]);
}

TEST_CASE("duplicated images produce identical logit rows") {
  const ModelParams p = random_params(8, 8, 5, 3);
  Tensor batch = random_batch(2, 8, 8, 5);
  std::copy(batch.data(), batch.data() + batch.size() / 2, batch.data() + batch.size() / 2);
  const Tensor logits = forward(p, batch);
  for (int c = 0; c < 5; ++c) CHECK(logits.at(0, c) == logits.at(1, c));
}

TEST_CASE("forward matches the independent double-precision reimplementation") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const ModelParams p = random_params(8, 8, 4, seed);
    const Tensor batch = random_batch(4, 8, 8, seed + 100);
    const Tensor logits = forward(p, batch);

    const oracle::DoubleParams dp = oracle::DoubleParams::from(p);
    const std::vector<double> dbatch(batch.data(), batch.data() + batch.size());
    const std::vector<double> ref = oracle::forward(dp, dbatch, 4);

    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double denom = std::max(1.0, std::abs(ref[i]));
      CHECK(std::abs(logits[i] - ref[i]) / denom < 1e-5);
    }
  }
}

TEST_CASE("forward is deterministic bit for bit") {
  const ModelParams p = random_params(8, 8, 4, 21);
  const Tensor batch = random_batch(6, 8, 8, 22);
  const Tensor a = forward(p, batch);
  const Tensor b = forward(p, batch);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("permuting batch rows permutes logits and losses identically") {
  const ModelParams p = random_params(8, 8, 4, 31);
  const Tensor batch = random_batch(5, 8, 8, 32);
  std::vector<int> labels = {0, 3, 1, 2, 0};
  const Tensor logits = forward(p, batch);
  const Tensor losses = cross_entropy(logits, labels);

  const int perm[5] = {4, 2, 0, 1, 3};
  Tensor shuffled(batch.shape());
  std::vector<int> plabels(5);
  const std::size_t stride = batch.size() / 5;
  for (int i = 0; i < 5; ++i) {
    std::copy(batch.data() + perm[i] * stride, batch.data() + (perm[i] + 1) * stride,
              shuffled.data() + i * stride);
    plabels[i] = labels[perm[i]];
  }
  const Tensor plogits = forward(p, shuffled);
  const Tensor plosses = cross_entropy(plogits, plabels);
  for (int i = 0; i < 5; ++i) {
    CHECK(plosses[i] == losses[perm[i]]);
    for (int c = 0; c < 4; ++c) CHECK(plogits.at(i, c) == logits.at(perm[i], c));
  }
}

TEST_CASE("forward rejects mismatched shapes") {
  const ModelParams p = ModelParams::init(8, 8, 4, 1);
  CHECK_THROWS_AS(forward(p, Tensor({2, 3, 12, 12})), ConfigError);
  CHECK_THROWS_AS(forward(p, Tensor({2, 1, 8, 8})), ConfigError);
  CHECK_THROWS_AS(ModelParams::init(10, 10, 4, 1), ConfigError);
}

TEST_CASE("cross entropy of uniform logits is ln C") {
  Tensor logits({3, 10});
  logits.fill(0.7f);
  const Tensor losses = cross_entropy(logits, {0, 5, 9});
  for (int b = 0; b < 3; ++b) CHECK(losses[b] == doctest::Approx(2.302585093).epsilon(1e-6));
}

TEST_CASE("cross entropy vanishes as the correct-class margin grows") {
  double prev = 1e30;
  for (float margin : {2.0f, 5.0f, 10.0f, 20.0f}) {
    Tensor logits({1, 4});
    logits.fill(0.0f);
    logits.at(0, 2) = margin;
    const float loss = cross_entropy(logits, {2})[0];
    CHECK(loss >= 0.0f);
    CHECK(loss < prev);
    prev = loss;
  }
  CHECK(prev < 1e-6);
}

TEST_CASE("cross entropy matches a naive 64-bit softmax-log oracle") {
  RngStream rng = derive_stream(77, "test.ce");
  Tensor logits({8, 6});
  std::vector<int> labels(8);
  for (std::size_t i = 0; i < logits.size(); ++i)
    logits[i] = static_cast<float>(rng.uniform(-8.0, 8.0));
  for (auto& y : labels) y = static_cast<int>(rng.bounded(6));

  const Tensor losses = cross_entropy(logits, labels);
  for (int b = 0; b < 8; ++b) {
    double denom = 0.0;
    for (int c = 0; c < 6; ++c) denom += std::exp(static_cast<double>(logits.at(b, c)));
    const double naive = -std::log(std::exp(static_cast<double>(logits.at(b, labels[b]))) / denom);
    CHECK(std::abs(losses[b] - naive) < 1e-6);
    CHECK(losses[b] >= 0.0f);
  }
}

TEST_CASE("cross entropy rejects out-of-range labels") {
  Tensor logits({2, 4});
  CHECK_THROWS_AS(cross_entropy(logits, {0, 4}), InputError);
  CHECK_THROWS_AS(cross_entropy(logits, {-1, 0}), InputError);
}

TEST_CASE("softmax rows sum to one") {
  RngStream rng = derive_stream(9, "test.softmax");
  Tensor logits({5, 7});
  for (std::size_t i = 0; i < logits.size(); ++i)
    logits[i] = static_cast<float>(rng.uniform(-10.0, 10.0));
  const Tensor probs = softmax_rows(logits);
  for (int b = 0; b < 5; ++b) {
    double s = 0.0;
    for (int c = 0; c < 7; ++c) s += probs.at(b, c);
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("cross entropy logit gradient equals softmax minus onehot over B") {
  RngStream rng = derive_stream(13, "test.cegrad");
  const int bsz = 4, ncls = 5;
  Tensor logits({bsz, ncls});
  for (std::size_t i = 0; i < logits.size(); ++i)
    logits[i] = static_cast<float>(rng.uniform(-3.0, 3.0));
  const std::vector<int> labels = {1, 4, 0, 2};

  const Tensor probs = softmax_rows(logits);
  const Tensor grad = cross_entropy_logit_grad(logits, labels);
  for (int b = 0; b < bsz; ++b)
    for (int c = 0; c < ncls; ++c) {
      const float expected = (probs.at(b, c) - (labels[b] == c ? 1.0f : 0.0f)) / bsz;
      CHECK(grad.at(b, c) == doctest::Approx(expected).epsilon(1e-6));
    }
}

TEST_CASE("finite differences confirm every parameter gradient") {
  const fd::Case c = fd::make_case(2, 8, 8, 3, /*base_seed=*/1);
  const fd::Report rep = fd::run_check(c);
  CHECK(rep.signatures_consistent);
  CHECK(rep.checked == 5475);
  INFO("worst ", rep.worst_param, " rel err ", rep.worst_rel_err);
  CHECK(rep.worst_rel_err <= 1e-3);
}

TEST_CASE("an image with zero loss weight receives zero input gradient") {
  const ModelParams p = random_params(8, 8, 4, 41);
  const Tensor batch = random_batch(3, 8, 8, 42);
  const std::vector<int> labels = {0, 1, 2};

  GradTape tape;
  forward(p, batch, &tape);
  const Gradients g = backward(p, tape, labels, {0.5f, 0.0f, 0.5f});
  const std::size_t stride = batch.size() / 3;
  bool row0_nonzero = false;
  for (std::size_t i = 0; i < stride; ++i) {
    if (g.input[i] != 0.0f) row0_nonzero = true;
    CHECK(g.input[stride + i] == 0.0f);
  }
  CHECK(row0_nonzero);
}

TEST_CASE("backward without a recorded forward is a state error") {
  const ModelParams p = random_params(8, 8, 4, 51);
  GradTape tape;
  CHECK_THROWS_AS(backward(p, tape, {0}), StateError);

  const Tensor batch = random_batch(1, 8, 8, 52);
  forward(p, batch, &tape);
  backward(p, tape, {0});
  // tape is cleared after each step
  CHECK_THROWS_AS(backward(p, tape, {0}), StateError);
}

TEST_CASE("sgd without momentum or decay is a plain gradient step") {
  ModelParams p = random_params(8, 8, 3, 61);
  const Tensor batch = random_batch(2, 8, 8, 62);
  GradTape tape;
  forward(p, batch, &tape);
  const Gradients g = backward(p, tape, {0, 1});

  ModelParams q = p;
  sgd_step(q, g, 0.1f, 0.0f, 0.0f);
  for (std::size_t i = 0; i < p.conv1_w.size(); ++i)
    CHECK(q.conv1_w[i] == doctest::Approx(p.conv1_w[i] - 0.1f * g.conv1_w[i]).epsilon(1e-6));
  for (std::size_t i = 0; i < p.fc_b.size(); ++i)
    CHECK(q.fc_b[i] == doctest::Approx(p.fc_b[i] - 0.1f * g.fc_b[i]).epsilon(1e-6));
}

TEST_CASE("zero learning rate leaves parameters but updates momentum") {
  ModelParams p = random_params(8, 8, 3, 71);
  const Tensor batch = random_batch(2, 8, 8, 72);
  GradTape tape;
  forward(p, batch, &tape);
  const Gradients g = backward(p, tape, {1, 2});

  ModelParams q = p;
  sgd_step(q, g, 0.0f, 0.9f, 0.0f);
  for (std::size_t i = 0; i < p.conv2_w.size(); ++i) CHECK(q.conv2_w[i] == p.conv2_w[i]);
  bool momentum_moved = false;
  for (std::size_t i = 0; i < q.m_conv2_w.size(); ++i)
    if (q.m_conv2_w[i] != 0.0f) momentum_moved = true;
  CHECK(momentum_moved);
}

TEST_CASE("two constant-gradient momentum steps compound to 1.9 alpha g") {
  ModelParams p = ModelParams::init(8, 8, 3, 81);
  Gradients g;
  g.conv1_w = Tensor(p.conv1_w.shape());
  g.conv1_b = Tensor(p.conv1_b.shape());
  g.conv2_w = Tensor(p.conv2_w.shape());
  g.conv2_b = Tensor(p.conv2_b.shape());
  g.fc_w = Tensor(p.fc_w.shape());
  g.fc_b = Tensor(p.fc_b.shape());
  g.conv1_w.fill(0.25f);

  const float before = p.conv1_w[0];
  const float alpha = 0.01f;
  sgd_step(p, g, alpha, 0.9f, 0.0f);
  const float after_one = p.conv1_w[0];
  sgd_step(p, g, alpha, 0.9f, 0.0f);
  const float after_two = p.conv1_w[0];

  CHECK(after_one == doctest::Approx(before - alpha * 0.25f).epsilon(1e-6));
  CHECK(after_two - after_one == doctest::Approx(-alpha * 1.9f * 0.25f).epsilon(1e-6));
}

TEST_CASE("weight decay enters the velocity") {
  ModelParams p = ModelParams::init(8, 8, 3, 91);
  Gradients g;
  g.conv1_w = Tensor(p.conv1_w.shape());
  g.conv1_b = Tensor(p.conv1_b.shape());
  g.conv2_w = Tensor(p.conv2_w.shape());
  g.conv2_b = Tensor(p.conv2_b.shape());
  g.fc_w = Tensor(p.fc_w.shape());
  g.fc_b = Tensor(p.fc_b.shape());

  const float theta = p.conv1_w[0];
  sgd_step(p, g, 0.1f, 0.9f, 0.01f);
  CHECK(p.conv1_w[0] == doctest::Approx(theta - 0.1f * 0.01f * theta).epsilon(1e-6));
}

TEST_CASE("non-finite update aborts with the parameter name") {
  ModelParams p = ModelParams::init(8, 8, 3, 95);
  Gradients g;
  g.conv1_w = Tensor(p.conv1_w.shape());
  g.conv1_b = Tensor(p.conv1_b.shape());
  g.conv2_w = Tensor(p.conv2_w.shape());
  g.conv2_b = Tensor(p.conv2_b.shape());
  g.fc_w = Tensor(p.fc_w.shape());
  g.fc_b = Tensor(p.fc_b.shape());
  g.conv2_b[0] = std::numeric_limits<float>::infinity();

  try {
    sgd_step(p, g, 0.1f, 0.9f, 0.0f);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("conv2.bias") != std::string::npos);
  }
}

TEST_CASE("checkpoint round-trips parameters, momentum and epoch") {
  ModelParams p = random_params(8, 8, 4, 97);
  RngStream rng = derive_stream(98, "test.momentum");
  for (auto& [name, t] : p.named_momentum())
    for (std::size_t i = 0; i < t->size(); ++i)
      (*t)[i] = static_cast<float>(rng.uniform(-1.0, 1.0));

  const auto path = std::filesystem::temp_directory_path() / "ueraser_test_ckpt.bin";
  save_checkpoint(path, p, 17);
  Checkpoint ck = load_checkpoint(path);
  std::filesystem::remove(path);

  CHECK(ck.epoch == 17);
  CHECK(ck.params.in_h == 8);
  CHECK(ck.params.num_classes == 4);
  auto a = p.named_params();
  auto b = ck.params.named_params();
  for (std::size_t s = 0; s < a.size(); ++s)
    for (std::size_t i = 0; i < a[s].second->size(); ++i)
      CHECK((*a[s].second)[i] == (*b[s].second)[i]);
  auto ma = p.named_momentum();
  auto mb = ck.params.named_momentum();
  for (std::size_t s = 0; s < ma.size(); ++s)
    for (std::size_t i = 0; i < ma[s].second->size(); ++i)
      CHECK((*ma[s].second)[i] == (*mb[s].second)[i]);
}

TEST_CASE("checkpoint loader rejects corrupt files") {
  const auto path = std::filesystem::temp_directory_path() / "ueraser_bad_ckpt.bin";
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE garbage";
  }
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  std::filesystem::remove(path);
}
