#include <doctest.h>

#include <cmath>
#include <map>

#include "ueraser/augment.hpp"
#include "ueraser/error.hpp"
#include "ueraser/rng.hpp"

using namespace ueraser;

namespace {

Tensor random_image(int h, int w, std::uint64_t seed, float lo = 0.0f, float hi = 1.0f) {
  Tensor img({3, h, w});
  RngStream rng = derive_stream(seed, "test.image");
  for (std::size_t i = 0; i < img.size(); ++i)
    img[i] = static_cast<float>(rng.uniform(lo, hi));
  return img;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

bool in_bounds(const Tensor& t) {
  for (std::size_t i = 0; i < t.size(); ++i)
    if (!(t[i] >= 0.0f && t[i] <= 1.0f)) return false;
  return true;
}

PolicySample identity_sample() { return PolicySample{}; }

// Directional finite difference of h -> <u, apply(x + h v)> against the vjp.
void check_vjp_direction(const PolicySample& s, const Tensor& x, std::uint64_t seed,
                         double tol, const Tensor* direction_mask = nullptr) {
  RngStream rng = derive_stream(seed, "test.vjp");
  Tensor u(x.shape()), v(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    u[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    v[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    if (direction_mask) v[i] *= (*direction_mask)[i];
  }

  const Tensor g = apply_vjp(s, x, u);
  double dot = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) dot += static_cast<double>(g[i]) * v[i];

  const double step = 1e-3;
  auto probe = [&](double hh) {
    Tensor xs(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
      xs[i] = x[i] + static_cast<float>(hh) * v[i];
    const Tensor out = apply(s, xs);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) acc += static_cast<double>(u[i]) * out[i];
    return acc;
  };
  const double fd = (probe(step) - probe(-step)) / (2.0 * step);
  CHECK(std::abs(fd - dot) <= tol * std::max({std::abs(fd), std::abs(dot), 0.5}));
}

}  // namespace

// ---------------------------------------------------------------------------
// plasma

TEST_CASE("plasma field with zero amplitude and pinned corners is all 0.5") {
  const float corner = 0.37f;
  const Tensor f = plasma_field_detail(16, 16, 0.5f, 9, 0.0f, &corner);
  for (std::size_t i = 0; i < f.size(); ++i) CHECK(f[i] == 0.5f);
}

TEST_CASE("plasma field stays in bounds over 1000 draws") {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    RngStream rng = derive_stream(seed, "test.plasma.params");
    const float r = static_cast<float>(rng.uniform(0.1, 0.7));
    const Tensor f = plasma_field(16, 16, r, seed);
    CHECK(in_bounds(f));
  }
}

TEST_CASE("plasma field is deterministic in its key and varies across seeds") {
  const Tensor a = plasma_field(16, 16, 0.4f, 123);
  const Tensor b = plasma_field(16, 16, 0.4f, 123);
  const Tensor c = plasma_field(16, 16, 0.4f, 124);
  CHECK(bit_equal(a, b));
  CHECK(!bit_equal(a, c));
}

TEST_CASE("plasma field handles non-square and small sizes") {
  CHECK(plasma_field(16, 8, 0.3f, 1).shape() == std::vector<int>{16, 8});
  CHECK(plasma_field(2, 2, 0.3f, 1).shape() == std::vector<int>{2, 2});
  CHECK_THROWS_AS(plasma_field(1, 8, 0.3f, 1), ConfigError);
}

TEST_CASE("plasma brightness identity, saturation and bounded change") {
  const Tensor img = random_image(16, 16, 5);
  const Tensor field = plasma_field(16, 16, 0.5f, 6);

  CHECK(bit_equal(plasma_brightness(img, 0.0f, field), img));

  Tensor ones({16, 16});
  ones.fill(1.0f);
  const Tensor sat = plasma_brightness(img, 1.0f, ones);
  for (std::size_t i = 0; i < sat.size(); ++i) CHECK(sat[i] == 1.0f);

  for (float intensity : {0.1f, 0.5f, 0.9f}) {
    const Tensor out = plasma_brightness(img, intensity, field);
    CHECK(in_bounds(out));
    double mean_change = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i)
      mean_change += std::abs(static_cast<double>(out[i]) - img[i]);
    CHECK(mean_change / static_cast<double>(out.size()) <= intensity + 1e-6);
  }
}

TEST_CASE("plasma contrast identity at mid-field and 0.5 fixed point") {
  const Tensor img = random_image(16, 16, 7);
  Tensor mid({16, 16});
  mid.fill(0.5f);
  CHECK(bit_equal(plasma_contrast(img, mid), img));

  Tensor gray = img;
  gray.fill(0.5f);
  const Tensor field = plasma_field(16, 16, 0.6f, 8);
  const Tensor out = plasma_contrast(gray, field);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.5f);
  CHECK(in_bounds(plasma_contrast(img, field)));
}

// ---------------------------------------------------------------------------
// channel shuffle

TEST_CASE("channel shuffle identity, inverse and grayscale invariance") {
  const Tensor img = random_image(8, 8, 11);
  CHECK(bit_equal(channel_shuffle(img, {0, 1, 2}), img));

  for (const auto& perm : kChannelPerms) {
    const Tensor once = channel_shuffle(img, perm);
    std::array<std::uint8_t, 3> inv{};
    for (int i = 0; i < 3; ++i) inv[perm[i]] = static_cast<std::uint8_t>(i);
    CHECK(bit_equal(channel_shuffle(once, inv), img));

    // per-location channel multiset is preserved
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        std::array<float, 3> a{img.at(0, y, x), img.at(1, y, x), img.at(2, y, x)};
        std::array<float, 3> b{once.at(0, y, x), once.at(1, y, x), once.at(2, y, x)};
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        CHECK(a == b);
      }
  }

  Tensor gray({3, 8, 8});
  RngStream rng = derive_stream(12, "test.gray");
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      const float v = rng.next_float();
      for (int c = 0; c < 3; ++c) gray.at(c, y, x) = v;
    }
  for (const auto& perm : kChannelPerms) CHECK(bit_equal(channel_shuffle(gray, perm), gray));

  CHECK_THROWS_AS(channel_shuffle(img, {0, 0, 2}), InputError);
  CHECK_THROWS_AS(channel_shuffle(img, {0, 1, 3}), InputError);
}

// ---------------------------------------------------------------------------
// trivial augment

TEST_CASE("identity op is exact and rotate bin 0 resamples exactly") {
  const Tensor img = random_image(16, 16, 13);
  for (int bin : {0, 15, 30}) CHECK(bit_equal(trivial_augment(img, TaOp::identity, bin, true), img));

  const Tensor rot = trivial_augment(img, TaOp::rotate, 0, true);
  for (std::size_t i = 0; i < img.size(); ++i)
    CHECK(std::abs(rot[i] - img[i]) <= 1e-6f);
}

TEST_CASE("solarize matches the per-pixel oracle") {
  const Tensor img = random_image(16, 16, 14);
  for (int bin : {0, 9, 15, 30}) {
    const float threshold = 1.0f - static_cast<float>(bin) / 30.0f;
    const Tensor out = trivial_augment(img, TaOp::solarize, bin, true);
    for (std::size_t i = 0; i < img.size(); ++i) {
      const float expected = img[i] < threshold ? img[i] : 1.0f - img[i];
      CHECK(out[i] == expected);
    }
  }
}

TEST_CASE("every op preserves shape and bounds on random inputs") {
  RngStream rng = derive_stream(15, "test.taops");
  for (int rep = 0; rep < 50; ++rep) {
    const Tensor img = random_image(16, 16, 1000 + rep);
    const TaOp op = static_cast<TaOp>(rng.bounded(kTaOpCount));
    const int bin = static_cast<int>(rng.bounded(kTaBins + 1));
    const Tensor out = trivial_augment(img, op, bin, rng.coin(0.5));
    CHECK(out.shape() == img.shape());
    CHECK(in_bounds(out));
  }
}

TEST_CASE("posterize quantizes to the expected level count") {
  const Tensor img = random_image(16, 16, 16);
  const Tensor out = trivial_augment(img, TaOp::posterize, 30, true);  // 2 bits
  std::map<float, int> levels;
  for (std::size_t i = 0; i < out.size(); ++i) ++levels[out[i]];
  CHECK(levels.size() <= 4);
}

TEST_CASE("autocontrast stretches each channel to the full range") {
  Tensor img = random_image(8, 8, 17, 0.3f, 0.6f);
  const Tensor out = trivial_augment(img, TaOp::autocontrast, 10, true);
  for (int c = 0; c < 3; ++c) {
    float mn = 1.0f, mx = 0.0f;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        mn = std::min(mn, out.at(c, y, x));
        mx = std::max(mx, out.at(c, y, x));
      }
    CHECK(mn == doctest::Approx(0.0f).epsilon(1e-5));
    CHECK(mx == doctest::Approx(1.0f).epsilon(1e-5));
  }
  // constant channel stays put
  Tensor flat({3, 8, 8});
  flat.fill(0.42f);
  CHECK(bit_equal(trivial_augment(flat, TaOp::autocontrast, 10, true), flat));
}

TEST_CASE("unknown op and out-of-range bin are input errors") {
  const Tensor img = random_image(8, 8, 18);
  CHECK_THROWS_AS(trivial_augment(img, static_cast<TaOp>(14), 0, true), InputError);
  CHECK_THROWS_AS(trivial_augment(img, TaOp::rotate, 31, true), InputError);
  CHECK_THROWS_AS(trivial_augment(img, TaOp::rotate, -1, true), InputError);
}

// ---------------------------------------------------------------------------
// policy sampling and pipeline

TEST_CASE("all-off sample is the identity pipeline") {
  const Tensor img = random_image(16, 16, 19);
  CHECK(bit_equal(apply(identity_sample(), img), img));
}

TEST_CASE("apply replays bit-exactly and preserves bounds and shape") {
  const Tensor img = random_image(16, 16, 20);
  for (int i = 0; i < 200; ++i) {
    RngStream rng = policy_stream(77, 1, static_cast<std::uint64_t>(i), 0);
    const PolicySample s = sample_policy(rng);
    const Tensor a = apply(s, img);
    const Tensor b = apply(s, img);
    CHECK(bit_equal(a, b));
    CHECK(a.shape() == img.shape());
    CHECK(in_bounds(a));
  }
}

TEST_CASE("gates fire at 0.5 within 2 points and TA ops are uniform") {
  const int n = 10000;
  int plasma = 0, shuffle = 0, flips = 0;
  std::array<int, kTaOpCount> ops{};
  std::array<int, 6> perms{};
  for (int i = 0; i < n; ++i) {
    RngStream rng = policy_stream(3, 0, static_cast<std::uint64_t>(i), 0);
    const PolicySample s = sample_policy(rng);
    plasma += s.plasma_on ? 1 : 0;
    shuffle += s.shuffle_on ? 1 : 0;
    flips += s.flip ? 1 : 0;
    ++ops[static_cast<std::size_t>(s.ta_op)];
    for (std::size_t k = 0; k < kChannelPerms.size(); ++k)
      if (s.channel_perm == kChannelPerms[k]) ++perms[k];
    CHECK(s.roughness >= 0.1f);
    CHECK(s.roughness <= 0.7f);
    CHECK(s.intensity >= 0.0f);
    CHECK(s.intensity <= 1.0f);
    CHECK(s.crop_dx >= -kCropPad);
    CHECK(s.crop_dx <= kCropPad);
  }
  CHECK(std::abs(plasma / static_cast<double>(n) - 0.5) <= 0.02);
  CHECK(std::abs(shuffle / static_cast<double>(n) - 0.5) <= 0.02);
  CHECK(std::abs(flips / static_cast<double>(n) - 0.5) <= 0.02);

  const double p_op = 1.0 / kTaOpCount;
  const double sd_op = std::sqrt(n * p_op * (1.0 - p_op));
  for (int c : ops) CHECK(std::abs(c - n * p_op) <= 3.0 * sd_op);

  const double p_perm = 1.0 / 6.0;
  const double sd_perm = std::sqrt(n * p_perm * (1.0 - p_perm));
  for (int c : perms) CHECK(std::abs(c - n * p_perm) <= 3.0 * sd_perm);
}

TEST_CASE("policy streams are independent of draw interleaving") {
  // two replicas of the same (seed, epoch, index, repeat) key agree even if
  // other streams were consumed in between
  RngStream a = policy_stream(9, 4, 123, 2);
  const PolicySample sa = sample_policy(a);
  RngStream noise = policy_stream(9, 4, 999, 0);
  sample_policy(noise);
  RngStream b = policy_stream(9, 4, 123, 2);
  const PolicySample sb = sample_policy(b);
  CHECK(sa == sb);
}

TEST_CASE("policy sample survives the json round trip") {
  RngStream rng = policy_stream(10, 2, 5, 1);
  const PolicySample s = sample_policy(rng);
  const PolicySample back = PolicySample::from_json(s.to_json());
  CHECK(back == s);

  const Tensor img = random_image(16, 16, 21);
  CHECK(bit_equal(apply(s, img), apply(back, img)));
}

TEST_CASE("standard-only samples leave photometric stages off") {
  for (int i = 0; i < 50; ++i) {
    RngStream rng = policy_stream(11, 0, static_cast<std::uint64_t>(i), 0);
    const PolicySample s = sample_standard_policy(rng);
    CHECK(!s.plasma_on);
    CHECK(!s.shuffle_on);
    CHECK(s.ta_op == TaOp::identity);
  }
}

TEST_CASE("adaptive samples honor the stage subset") {
  int plasma_any = 0;
  for (int i = 0; i < 200; ++i) {
    RngStream rng = policy_stream(12, 0, static_cast<std::uint64_t>(i), 0);
    const PolicySample s = sample_adaptive_policy(rng, true, false, true);
    CHECK(s.crop_dx == 0);
    CHECK(s.crop_dy == 0);
    CHECK(!s.flip);
    CHECK(s.ta_op == TaOp::identity);
    plasma_any += s.plasma_on ? 1 : 0;
  }
  CHECK(plasma_any > 50);  // gate still fires at p=0.5

  RngStream rng = policy_stream(12, 0, 0, 0);
  const PolicySample none = sample_adaptive_policy(rng, false, false, false);
  CHECK(none == identity_sample());
}

// ---------------------------------------------------------------------------
// vjp

TEST_CASE("vjp matches directional finite differences for smooth stages") {
  PolicySample s;

  SUBCASE("plasma brightness") {
    s.plasma_on = true;
    s.plasma_kind = PlasmaKind::brightness;
    s.roughness = 0.4f;
    s.intensity = 0.2f;
    s.field_seed = 55;
    check_vjp_direction(s, random_image(12, 12, 30, 0.3f, 0.7f), 1, 1e-2);
  }
  SUBCASE("plasma contrast") {
    s.plasma_on = true;
    s.plasma_kind = PlasmaKind::contrast;
    s.roughness = 0.4f;
    s.field_seed = 56;
    check_vjp_direction(s, random_image(12, 12, 31, 0.4f, 0.6f), 2, 1e-2);
  }
  SUBCASE("ta brightness") {
    s.ta_op = TaOp::brightness;
    s.ta_bin = 15;
    check_vjp_direction(s, random_image(12, 12, 32, 0.1f, 0.6f), 3, 1e-2);
  }
  SUBCASE("ta color") {
    s.ta_op = TaOp::color;
    s.ta_bin = 12;
    check_vjp_direction(s, random_image(12, 12, 33, 0.3f, 0.7f), 4, 1e-2);
  }
  SUBCASE("ta contrast") {
    s.ta_op = TaOp::contrast;
    s.ta_bin = 12;
    check_vjp_direction(s, random_image(12, 12, 34, 0.3f, 0.7f), 5, 1e-2);
  }
  SUBCASE("ta sharpness") {
    s.ta_op = TaOp::sharpness;
    s.ta_bin = 12;
    check_vjp_direction(s, random_image(12, 12, 35, 0.3f, 0.7f), 6, 1e-2);
  }
  SUBCASE("ta solarize away from its threshold") {
    s.ta_op = TaOp::solarize;
    s.ta_bin = 15;  // threshold 0.5
    Tensor img = random_image(12, 12, 36);
    for (std::size_t i = 0; i < img.size(); ++i)
      if (img[i] > 0.4f && img[i] < 0.6f) img[i] = 0.2f;
    check_vjp_direction(s, img, 7, 1e-2);
  }
  SUBCASE("rotate") {
    s.ta_op = TaOp::rotate;
    s.ta_bin = 10;
    check_vjp_direction(s, random_image(12, 12, 37, 0.2f, 0.8f), 8, 1e-2);
  }
  SUBCASE("shear and translate") {
    s.ta_op = TaOp::shear_x;
    s.ta_bin = 20;
    check_vjp_direction(s, random_image(12, 12, 38, 0.2f, 0.8f), 9, 1e-2);
    s.ta_op = TaOp::translate_y;
    check_vjp_direction(s, random_image(12, 12, 39, 0.2f, 0.8f), 10, 1e-2);
  }
  SUBCASE("crop and flip") {
    s.crop_dx = 2;
    s.crop_dy = -3;
    s.flip = true;
    check_vjp_direction(s, random_image(12, 12, 40, 0.2f, 0.8f), 11, 1e-2);
  }
  SUBCASE("autocontrast with the extreme bands pinned") {
    // min/max act as constants in the vjp, so the probe direction must not
    // move any pixel that could become the channel extreme
    s.ta_op = TaOp::autocontrast;
    Tensor img = random_image(12, 12, 41, 0.2f, 0.8f);
    Tensor mask(img.shape());
    mask.fill(1.0f);
    const std::size_t plane = img.size() / 3;
    for (int c = 0; c < 3; ++c) {
      float mn = 1.0f, mx = 0.0f;
      for (std::size_t i = 0; i < plane; ++i) {
        mn = std::min(mn, img[c * plane + i]);
        mx = std::max(mx, img[c * plane + i]);
      }
      for (std::size_t i = 0; i < plane; ++i)
        if (img[c * plane + i] < mn + 0.03f || img[c * plane + i] > mx - 0.03f)
          mask[c * plane + i] = 0.0f;
    }
    check_vjp_direction(s, img, 12, 1e-2, &mask);
  }
}

TEST_CASE("posterize, equalize and shuffle pass gradients straight through") {
  const Tensor img = random_image(12, 12, 50);
  Tensor u(img.shape());
  RngStream rng = derive_stream(51, "test.st");
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = static_cast<float>(rng.uniform(-1.0, 1.0));

  for (TaOp op : {TaOp::posterize, TaOp::equalize}) {
    PolicySample s;
    s.ta_op = op;
    s.ta_bin = 20;
    CHECK(bit_equal(apply_vjp(s, img, u), u));
  }
  PolicySample s;
  s.shuffle_on = true;
  s.channel_perm = {2, 0, 1};
  CHECK(bit_equal(apply_vjp(s, img, u), u));
}
