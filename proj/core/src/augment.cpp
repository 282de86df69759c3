#include "ueraser/augment.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <json.hpp>

#include "ueraser/error.hpp"

namespace ueraser {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr float kLumR = 0.299f, kLumG = 0.587f, kLumB = 0.114f;

inline float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

// Subgradient of clamp to [0,1]: passes where the pre-clamp value is interior.
inline float clamp01_mask(float pre) { return (pre > 0.0f && pre < 1.0f) ? 1.0f : 0.0f; }

void require_image(const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ConfigError("expected a {3,H,W} image");
}

}  // namespace

// ---------------------------------------------------------------------------
// Plasma field (diamond-square)

Tensor plasma_field_detail(int h, int w, float roughness, std::uint64_t seed,
                           float base_amplitude, const float* corner_override) {
  if (h < 2 || w < 2) throw ConfigError("plasma_field: H and W must be >= 2");

  int k = 0;
  while ((1 << k) + 1 < std::max(h, w)) ++k;
  const int side = (1 << k) + 1;

  RngStream rng = derive_stream(seed, "augment.plasma");
  std::vector<double> grid(static_cast<std::size_t>(side) * side, 0.0);
  auto at = [&](int y, int x) -> double& { return grid[static_cast<std::size_t>(y) * side + x]; };

  for (int cy : {0, side - 1})
    for (int cx : {0, side - 1})
      at(cy, cx) = corner_override ? *corner_override : rng.next_double();

  double amp = base_amplitude;
  for (int step = side - 1; step > 1; step /= 2) {
    const int half = step / 2;
    // diamond: square centers
    for (int y = half; y < side; y += step)
      for (int x = half; x < side; x += step) {
        const double avg = (at(y - half, x - half) + at(y - half, x + half) +
                            at(y + half, x - half) + at(y + half, x + half)) /
                           4.0;
        at(y, x) = avg + rng.uniform(-amp, amp);
      }
    // square: edge midpoints, averaging the in-bounds neighbors
    for (int y = 0; y < side; y += half)
      for (int x = (y / half % 2 == 0) ? half : 0; x < side; x += step) {
        double sum = 0.0;
        int n = 0;
        if (y - half >= 0) sum += at(y - half, x), ++n;
        if (y + half < side) sum += at(y + half, x), ++n;
        if (x - half >= 0) sum += at(y, x - half), ++n;
        if (x + half < side) sum += at(y, x + half), ++n;
        at(y, x) = sum / n + rng.uniform(-amp, amp);
      }
    amp *= roughness;
  }

  double mn = grid[0], mx = grid[0];
  for (double v : grid) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }

  Tensor field({h, w});
  if (mx - mn < 1e-12) {
    field.fill(0.5f);  // degenerate normalization
    return field;
  }
  const double scale = 1.0 / (mx - mn);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      field.at(y, x) = static_cast<float>((at(y, x) - mn) * scale);
  return field;
}

Tensor plasma_field(int h, int w, float roughness, std::uint64_t seed) {
  return plasma_field_detail(h, w, roughness, seed, 1.0f, nullptr);
}

// ---------------------------------------------------------------------------
// Plasma photometric ops

Tensor plasma_brightness(const Tensor& img, float intensity, const Tensor& field) {
  require_image(img);
  const int h = img.dim(1), w = img.dim(2);
  Tensor out(img.shape());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.at(c, y, x) = clamp01(img.at(c, y, x) + intensity * (2.0f * field.at(y, x) - 1.0f));
  return out;
}

Tensor plasma_contrast(const Tensor& img, const Tensor& field) {
  require_image(img);
  const int h = img.dim(1), w = img.dim(2);
  Tensor out(img.shape());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float gain = std::exp(2.0f * field.at(y, x) - 1.0f);
      // v + (g-1)(v-0.5) == 0.5 + (v-0.5)g, but exact identity at g == 1
      for (int c = 0; c < 3; ++c) {
        const float v = img.at(c, y, x);
        out.at(c, y, x) = clamp01(v + (gain - 1.0f) * (v - 0.5f));
      }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Channel shuffle

namespace {
void require_bijection(const std::array<std::uint8_t, 3>& perm) {
  bool seen[3] = {false, false, false};
  for (std::uint8_t p : perm) {
    if (p > 2 || seen[p]) throw InputError("channel_shuffle: permutation is not a bijection");
    seen[p] = true;
  }
}
}  // namespace

Tensor channel_shuffle(const Tensor& img, const std::array<std::uint8_t, 3>& perm) {
  require_image(img);
  require_bijection(perm);
  const std::size_t plane = static_cast<std::size_t>(img.dim(1)) * img.dim(2);
  Tensor out(img.shape());
  for (int c = 0; c < 3; ++c)
    std::memcpy(out.data() + c * plane, img.data() + perm[c] * plane, plane * sizeof(float));
  return out;
}

// ---------------------------------------------------------------------------
// TrivialAugment ops

namespace {

struct Affine {
  // input coords = M * (out - center) + center + t
  float m00, m01, m10, m11, tx, ty;
};

Tensor affine_sample(const Tensor& img, const Affine& a) {
  const int h = img.dim(1), w = img.dim(2);
  const float cx = (w - 1) * 0.5f, cy = (h - 1) * 0.5f;
  Tensor out(img.shape());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float xr = static_cast<float>(x) - cx, yr = static_cast<float>(y) - cy;
      const float sx = a.m00 * xr + a.m01 * yr + cx + a.tx;
      const float sy = a.m10 * xr + a.m11 * yr + cy + a.ty;
      const int ix = static_cast<int>(std::floor(sx)), iy = static_cast<int>(std::floor(sy));
      const float fx = sx - ix, fy = sy - iy;
      for (int c = 0; c < 3; ++c) {
        auto pix = [&](int yy, int xx) -> float {
          return (yy >= 0 && yy < h && xx >= 0 && xx < w) ? img.at(c, yy, xx) : 0.0f;
        };
        const float v = (1 - fy) * ((1 - fx) * pix(iy, ix) + fx * pix(iy, ix + 1)) +
                        fy * ((1 - fx) * pix(iy + 1, ix) + fx * pix(iy + 1, ix + 1));
        out.at(c, y, x) = clamp01(v);
      }
    }
  return out;
}

Tensor affine_vjp(const Tensor& img, const Affine& a, const Tensor& upstream) {
  const int h = img.dim(1), w = img.dim(2);
  const float cx = (w - 1) * 0.5f, cy = (h - 1) * 0.5f;
  Tensor grad(img.shape());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float xr = static_cast<float>(x) - cx, yr = static_cast<float>(y) - cy;
      const float sx = a.m00 * xr + a.m01 * yr + cx + a.tx;
      const float sy = a.m10 * xr + a.m11 * yr + cy + a.ty;
      const int ix = static_cast<int>(std::floor(sx)), iy = static_cast<int>(std::floor(sy));
      const float fx = sx - ix, fy = sy - iy;
      const float wgt[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
      const int yy[4] = {iy, iy, iy + 1, iy + 1};
      const int xx[4] = {ix, ix + 1, ix, ix + 1};
      for (int c = 0; c < 3; ++c) {
        const float u = upstream.at(c, y, x);
        for (int k = 0; k < 4; ++k)
          if (yy[k] >= 0 && yy[k] < h && xx[k] >= 0 && xx[k] < w)
            grad.at(c, yy[k], xx[k]) += u * wgt[k];
      }
    }
  return grad;
}

float signed_strength(float max_at_full, int bin, bool positive) {
  const float s = max_at_full * static_cast<float>(bin) / static_cast<float>(kTaBins);
  return positive ? s : -s;
}

Affine ta_affine(TaOp op, int bin, bool positive, int h, int w) {
  Affine a{1, 0, 0, 1, 0, 0};
  switch (op) {
    case TaOp::shear_x:
      a.m01 = signed_strength(kShearMax, bin, positive);
      break;
    case TaOp::shear_y:
      a.m10 = signed_strength(kShearMax, bin, positive);
      break;
    case TaOp::translate_x:
      a.tx = signed_strength(kTranslateFracMax * static_cast<float>(w), bin, positive);
      break;
    case TaOp::translate_y:
      a.ty = signed_strength(kTranslateFracMax * static_cast<float>(h), bin, positive);
      break;
    case TaOp::rotate: {
      float deg = kRotateDegPerUnit * static_cast<float>(bin) / static_cast<float>(kTaBins);
      deg = std::min(deg, kRotateCapDeg);
      if (!positive) deg = -deg;
      const float r = static_cast<float>(deg * kPi / 180.0);
      a.m00 = std::cos(r);
      a.m01 = std::sin(r);
      a.m10 = -std::sin(r);
      a.m11 = std::cos(r);
      break;
    }
    default:
      break;
  }
  return a;
}

float enhance_factor(int bin, bool positive) {
  return 1.0f + signed_strength(kEnhanceDeltaMax, bin, positive);
}

float luminance(const Tensor& img, int y, int x) {
  return kLumR * img.at(0, y, x) + kLumG * img.at(1, y, x) + kLumB * img.at(2, y, x);
}

// Border-preserving 3x3 smoothing (kernel 1,1,1 / 1,5,1 / 1,1,1, /13).
Tensor smooth3x3(const Tensor& img) {
  const int h = img.dim(1), w = img.dim(2);
  Tensor out = img;
  for (int c = 0; c < 3; ++c)
    for (int y = 1; y + 1 < h; ++y)
      for (int x = 1; x + 1 < w; ++x) {
        float s = 0.0f;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            s += img.at(c, y + dy, x + dx) * ((dy == 0 && dx == 0) ? 5.0f : 1.0f);
        out.at(c, y, x) = s / 13.0f;
      }
  return out;
}

int posterize_bits(int bin) {
  const int drop = static_cast<int>(std::lround(6.0 * bin / kTaBins));
  return std::max(kPosterizeMinBits, 8 - drop);
}

int to_byte255(float v) {
  return std::clamp(static_cast<int>(std::lround(v * 255.0f)), 0, 255);
}

Tensor equalize_channelwise(const Tensor& img) {
  const int h = img.dim(1), w = img.dim(2);
  const int total = h * w;
  Tensor out(img.shape());
  for (int c = 0; c < 3; ++c) {
    int hist[256] = {0};
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) ++hist[to_byte255(img.at(c, y, x))];

    int last_nonzero = -1, nonzero = 0;
    for (int i = 0; i < 256; ++i)
      if (hist[i] > 0) {
        last_nonzero = i;
        ++nonzero;
      }
    int lut[256];
    const int step = nonzero <= 1 ? 0 : (total - hist[last_nonzero]) / 255;
    if (step == 0) {
      for (int i = 0; i < 256; ++i) lut[i] = i;
    } else {
      int n = step / 2;
      for (int i = 0; i < 256; ++i) {
        lut[i] = std::min(255, n / step);
        n += hist[i];
      }
    }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.at(c, y, x) = static_cast<float>(lut[to_byte255(img.at(c, y, x))]) / 255.0f;
  }
  return out;
}

void validate_ta(TaOp op, int bin) {
  if (static_cast<int>(op) >= kTaOpCount)
    throw InputError("trivial_augment: unknown op id " + std::to_string(static_cast<int>(op)));
  if (bin < 0 || bin > kTaBins)
    throw InputError("trivial_augment: strength bin out of [0,30]");
}

}  // namespace

Tensor trivial_augment(const Tensor& img, TaOp op, int bin, bool positive) {
  require_image(img);
  validate_ta(op, bin);
  const int h = img.dim(1), w = img.dim(2);

  switch (op) {
    case TaOp::identity:
      return img;
    case TaOp::shear_x:
    case TaOp::shear_y:
    case TaOp::translate_x:
    case TaOp::translate_y:
    case TaOp::rotate:
      return affine_sample(img, ta_affine(op, bin, positive, h, w));
    case TaOp::brightness: {
      const float f = enhance_factor(bin, positive);
      Tensor out(img.shape());
      for (std::size_t i = 0; i < img.size(); ++i) out[i] = clamp01(f * img[i]);
      return out;
    }
    case TaOp::color: {
      const float f = enhance_factor(bin, positive);
      Tensor out(img.shape());
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const float lum = luminance(img, y, x);
          for (int c = 0; c < 3; ++c)
            out.at(c, y, x) = clamp01((1.0f - f) * lum + f * img.at(c, y, x));
        }
      return out;
    }
    case TaOp::contrast: {
      const float f = enhance_factor(bin, positive);
      double mean = 0.0;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) mean += luminance(img, y, x);
      mean /= static_cast<double>(h) * w;
      Tensor out(img.shape());
      for (std::size_t i = 0; i < img.size(); ++i)
        out[i] = clamp01(static_cast<float>((1.0f - f) * mean) + f * img[i]);
      return out;
    }
    case TaOp::sharpness: {
      const float f = enhance_factor(bin, positive);
      const Tensor smooth = smooth3x3(img);
      Tensor out(img.shape());
      for (std::size_t i = 0; i < img.size(); ++i)
        out[i] = clamp01((1.0f - f) * smooth[i] + f * img[i]);
      return out;
    }
    case TaOp::posterize: {
      const int keep = posterize_bits(bin);
      const int mask = ~((1 << (8 - keep)) - 1) & 0xff;
      Tensor out(img.shape());
      for (std::size_t i = 0; i < img.size(); ++i) {
        const int q = std::clamp(static_cast<int>(img[i] * 255.0f), 0, 255) & mask;
        out[i] = static_cast<float>(q) / 255.0f;
      }
      return out;
    }
    case TaOp::solarize: {
      const float threshold = 1.0f - static_cast<float>(bin) / static_cast<float>(kTaBins);
      Tensor out(img.shape());
      for (std::size_t i = 0; i < img.size(); ++i)
        out[i] = img[i] < threshold ? img[i] : 1.0f - img[i];
      return out;
    }
    case TaOp::autocontrast: {
      Tensor out(img.shape());
      const std::size_t plane = static_cast<std::size_t>(h) * w;
      for (int c = 0; c < 3; ++c) {
        const float* ip = img.data() + c * plane;
        float* op = out.data() + c * plane;
        float mn = ip[0], mx = ip[0];
        for (std::size_t i = 0; i < plane; ++i) {
          mn = std::min(mn, ip[i]);
          mx = std::max(mx, ip[i]);
        }
        if (mx - mn < 1e-6f) {
          std::copy(ip, ip + plane, op);
        } else {
          const float s = 1.0f / (mx - mn);
          for (std::size_t i = 0; i < plane; ++i) op[i] = clamp01((ip[i] - mn) * s);
        }
      }
      return out;
    }
    case TaOp::equalize:
      return equalize_channelwise(img);
  }
  throw InputError("trivial_augment: unknown op");
}

namespace {

Tensor trivial_augment_vjp(const Tensor& img, TaOp op, int bin, bool positive,
                           const Tensor& upstream) {
  const int h = img.dim(1), w = img.dim(2);
  switch (op) {
    case TaOp::identity:
    case TaOp::posterize:   // straight-through
    case TaOp::equalize:    // straight-through
      return upstream;
    case TaOp::shear_x:
    case TaOp::shear_y:
    case TaOp::translate_x:
    case TaOp::translate_y:
    case TaOp::rotate:
      return affine_vjp(img, ta_affine(op, bin, positive, h, w), upstream);
    case TaOp::brightness: {
      const float f = enhance_factor(bin, positive);
      Tensor grad(img.shape());
      for (std::size_t i = 0; i < img.size(); ++i)
        grad[i] = upstream[i] * f * clamp01_mask(f * img[i]);
      return grad;
    }
    case TaOp::color: {
      const float f = enhance_factor(bin, positive);
      const float lw[3] = {kLumR, kLumG, kLumB};
      Tensor grad(img.shape());
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const float lum = luminance(img, y, x);
          float usum = 0.0f;
          float um[3];
          for (int c = 0; c < 3; ++c) {
            const float pre = (1.0f - f) * lum + f * img.at(c, y, x);
            um[c] = upstream.at(c, y, x) * clamp01_mask(pre);
            usum += um[c];
          }
          for (int c = 0; c < 3; ++c) grad.at(c, y, x) = f * um[c] + (1.0f - f) * lw[c] * usum;
        }
      return grad;
    }
    case TaOp::contrast: {
      const float f = enhance_factor(bin, positive);
      double mean = 0.0;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) mean += luminance(img, y, x);
      mean /= static_cast<double>(h) * w;
      const float lw[3] = {kLumR, kLumG, kLumB};
      const float inv_hw = 1.0f / (static_cast<float>(h) * w);
      Tensor masked(img.shape());
      double usum = 0.0;
      for (std::size_t i = 0; i < img.size(); ++i) {
        const float pre = static_cast<float>((1.0f - f) * mean) + f * img[i];
        masked[i] = upstream[i] * clamp01_mask(pre);
        usum += masked[i];
      }
      Tensor grad(img.shape());
      const std::size_t plane = static_cast<std::size_t>(h) * w;
      for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i)
          grad[c * plane + i] =
              f * masked[c * plane + i] +
              (1.0f - f) * lw[c] * inv_hw * static_cast<float>(usum);
      return grad;
    }
    case TaOp::sharpness: {
      const float f = enhance_factor(bin, positive);
      const Tensor smooth = smooth3x3(img);
      Tensor masked(img.shape());
      for (std::size_t i = 0; i < img.size(); ++i) {
        const float pre = (1.0f - f) * smooth[i] + f * img[i];
        masked[i] = upstream[i] * clamp01_mask(pre);
      }
      // d/dimg = f * I + (1-f) * S^T with border rows of S equal to identity
      Tensor grad(img.shape());
      for (std::size_t i = 0; i < img.size(); ++i) grad[i] = f * masked[i];
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            const float um = masked.at(c, y, x);
            if (y == 0 || y + 1 == h || x == 0 || x + 1 == w) {
              grad.at(c, y, x) += (1.0f - f) * um;
            } else {
              for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                  grad.at(c, y + dy, x + dx) +=
                      (1.0f - f) * um * ((dy == 0 && dx == 0) ? 5.0f : 1.0f) / 13.0f;
            }
          }
      return grad;
    }
    case TaOp::solarize: {
      const float threshold = 1.0f - static_cast<float>(bin) / static_cast<float>(kTaBins);
      Tensor grad(img.shape());
      for (std::size_t i = 0; i < img.size(); ++i)
        grad[i] = img[i] < threshold ? upstream[i] : -upstream[i];
      return grad;
    }
    case TaOp::autocontrast: {
      const std::size_t plane = static_cast<std::size_t>(h) * w;
      Tensor grad(img.shape());
      for (int c = 0; c < 3; ++c) {
        const float* ip = img.data() + c * plane;
        float mn = ip[0], mx = ip[0];
        for (std::size_t i = 0; i < plane; ++i) {
          mn = std::min(mn, ip[i]);
          mx = std::max(mx, ip[i]);
        }
        const float s = (mx - mn < 1e-6f) ? 1.0f : 1.0f / (mx - mn);
        for (std::size_t i = 0; i < plane; ++i)
          grad[c * plane + i] = upstream[c * plane + i] * s;
      }
      return grad;
    }
  }
  throw InputError("trivial_augment_vjp: unknown op");
}

}  // namespace

// ---------------------------------------------------------------------------
// Policy sampling

RngStream policy_stream(std::uint64_t seed, int epoch, std::uint64_t image_index, int repeat) {
  return derive_stream(seed, "augment.policy", static_cast<std::uint64_t>(epoch), image_index,
                       static_cast<std::uint64_t>(repeat));
}

namespace {

void draw_standard(PolicySample& s, RngStream& rng) {
  s.crop_dx = static_cast<int>(rng.bounded(2 * kCropPad + 1)) - kCropPad;
  s.crop_dy = static_cast<int>(rng.bounded(2 * kCropPad + 1)) - kCropPad;
  s.flip = rng.coin(0.5);
}

void draw_plasma(PolicySample& s, RngStream& rng) {
  s.plasma_on = rng.coin(0.5);
  s.plasma_kind = rng.bounded(2) == 0 ? PlasmaKind::brightness : PlasmaKind::contrast;
  s.roughness = static_cast<float>(rng.uniform(0.1, 0.7));
  s.intensity = static_cast<float>(rng.uniform(0.0, 1.0));
  s.field_seed = rng.next_u64();
}

void draw_trivial(PolicySample& s, RngStream& rng) {
  s.ta_op = static_cast<TaOp>(rng.bounded(kTaOpCount));
  s.ta_bin = static_cast<int>(rng.bounded(kTaBins + 1));
  s.ta_positive = rng.coin(0.5);
}

void draw_shuffle(PolicySample& s, RngStream& rng) {
  s.shuffle_on = rng.coin(0.5);
  s.channel_perm = kChannelPerms[rng.bounded(kChannelPerms.size())];
}

}  // namespace

PolicySample sample_policy(RngStream& rng) {
  PolicySample s;
  draw_standard(s, rng);
  draw_plasma(s, rng);
  draw_trivial(s, rng);
  draw_shuffle(s, rng);
  return s;
}

PolicySample sample_standard_policy(RngStream& rng) {
  PolicySample s;
  draw_standard(s, rng);
  return s;
}

PolicySample sample_adaptive_policy(RngStream& rng, bool use_plasma, bool use_trivial,
                                    bool use_shuffle) {
  PolicySample s;
  if (use_plasma) draw_plasma(s, rng);
  if (use_trivial) draw_trivial(s, rng);
  if (use_shuffle) draw_shuffle(s, rng);
  return s;
}

// ---------------------------------------------------------------------------
// Pipeline apply / vjp

namespace {

Tensor stage_crop_flip(const PolicySample& s, const Tensor& img) {
  if (s.crop_dx == 0 && s.crop_dy == 0 && !s.flip) return img;
  const int h = img.dim(1), w = img.dim(2);
  Tensor out(img.shape());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int xx = s.flip ? (w - 1 - x) : x;
        const int sy = y + s.crop_dy, sx = xx + s.crop_dx;
        out.at(c, y, x) =
            (sy >= 0 && sy < h && sx >= 0 && sx < w) ? img.at(c, sy, sx) : 0.0f;
      }
  return out;
}

Tensor stage_crop_flip_vjp(const PolicySample& s, const Tensor& img, const Tensor& upstream) {
  if (s.crop_dx == 0 && s.crop_dy == 0 && !s.flip) return upstream;
  const int h = img.dim(1), w = img.dim(2);
  Tensor grad(img.shape());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int xx = s.flip ? (w - 1 - x) : x;
        const int sy = y + s.crop_dy, sx = xx + s.crop_dx;
        if (sy >= 0 && sy < h && sx >= 0 && sx < w)
          grad.at(c, sy, sx) += upstream.at(c, y, x);
      }
  return grad;
}

Tensor stage_plasma(const PolicySample& s, const Tensor& img) {
  if (!s.plasma_on) return img;
  const Tensor field = plasma_field(img.dim(1), img.dim(2), s.roughness, s.field_seed);
  return s.plasma_kind == PlasmaKind::brightness ? plasma_brightness(img, s.intensity, field)
                                                 : plasma_contrast(img, field);
}

Tensor stage_plasma_vjp(const PolicySample& s, const Tensor& img, const Tensor& upstream) {
  if (!s.plasma_on) return upstream;
  const int h = img.dim(1), w = img.dim(2);
  const Tensor field = plasma_field(h, w, s.roughness, s.field_seed);
  Tensor grad(img.shape());
  if (s.plasma_kind == PlasmaKind::brightness) {
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const float pre = img.at(c, y, x) + s.intensity * (2.0f * field.at(y, x) - 1.0f);
          grad.at(c, y, x) = upstream.at(c, y, x) * clamp01_mask(pre);
        }
  } else {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const float gain = std::exp(2.0f * field.at(y, x) - 1.0f);
        for (int c = 0; c < 3; ++c) {
          const float v = img.at(c, y, x);
          const float pre = v + (gain - 1.0f) * (v - 0.5f);
          grad.at(c, y, x) = upstream.at(c, y, x) * gain * clamp01_mask(pre);
        }
      }
  }
  return grad;
}

Tensor stage_trivial(const PolicySample& s, const Tensor& img) {
  return trivial_augment(img, s.ta_op, s.ta_bin, s.ta_positive);
}

Tensor stage_shuffle(const PolicySample& s, const Tensor& img) {
  return s.shuffle_on ? channel_shuffle(img, s.channel_perm) : img;
}

}  // namespace

Tensor apply(const PolicySample& sample, const Tensor& img) {
  require_image(img);
  Tensor x = stage_crop_flip(sample, img);
  x = stage_plasma(sample, x);
  x = stage_trivial(sample, x);
  return stage_shuffle(sample, x);
}

Tensor apply_vjp(const PolicySample& sample, const Tensor& img, const Tensor& upstream) {
  require_image(img);
  check_same_shape(img, upstream, "apply_vjp");
  const Tensor x1 = stage_crop_flip(sample, img);
  const Tensor x2 = stage_plasma(sample, x1);
  // channel shuffle is straight-through by contract
  Tensor u = trivial_augment_vjp(x2, sample.ta_op, sample.ta_bin, sample.ta_positive, upstream);
  u = stage_plasma_vjp(sample, x1, u);
  return stage_crop_flip_vjp(sample, img, u);
}

// ---------------------------------------------------------------------------
// PolicySample json

std::string PolicySample::to_json() const {
  nlohmann::json j;
  j["crop_dx"] = crop_dx;
  j["crop_dy"] = crop_dy;
  j["flip"] = flip;
  j["plasma_on"] = plasma_on;
  j["plasma_kind"] = plasma_kind == PlasmaKind::brightness ? "brightness" : "contrast";
  j["roughness"] = roughness;
  j["intensity"] = intensity;
  j["field_seed"] = field_seed;
  j["ta_op"] = static_cast<int>(ta_op);
  j["ta_bin"] = ta_bin;
  j["ta_positive"] = ta_positive;
  j["shuffle_on"] = shuffle_on;
  j["channel_perm"] = {channel_perm[0], channel_perm[1], channel_perm[2]};
  return j.dump();
}

PolicySample PolicySample::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  PolicySample s;
  s.crop_dx = j.at("crop_dx").get<int>();
  s.crop_dy = j.at("crop_dy").get<int>();
  s.flip = j.at("flip").get<bool>();
  s.plasma_on = j.at("plasma_on").get<bool>();
  s.plasma_kind = j.at("plasma_kind").get<std::string>() == "contrast" ? PlasmaKind::contrast
                                                                       : PlasmaKind::brightness;
  s.roughness = j.at("roughness").get<float>();
  s.intensity = j.at("intensity").get<float>();
  s.field_seed = j.at("field_seed").get<std::uint64_t>();
  s.ta_op = static_cast<TaOp>(j.at("ta_op").get<int>());
  s.ta_bin = j.at("ta_bin").get<int>();
  s.ta_positive = j.at("ta_positive").get<bool>();
  s.shuffle_on = j.at("shuffle_on").get<bool>();
  auto perm = j.at("channel_perm");
  for (int i = 0; i < 3; ++i) s.channel_perm[i] = perm.at(i).get<std::uint8_t>();
  return s;
}

}  // namespace ueraser
