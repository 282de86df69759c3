#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace ueraser {

// Counter-based random streams. A stream is a pure function of its key:
// draw i is finalize(key + (i+1) * golden ratio), so streams derived from
// distinct (seed, label, a, b, c) tuples never interact and any work item
// can be given its own stream regardless of thread scheduling.

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;

inline std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

inline std::uint64_t hash_label(std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a 64
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

class RngStream {
 public:
  RngStream() = default;
  explicit RngStream(std::uint64_t key) : key_(key) {}

  std::uint64_t next_u64() {
    counter_ += kGolden;
    return mix64(key_ + counter_);
  }

  std::uint32_t next_u32() { return static_cast<std::uint32_t>(next_u64() >> 32); }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  float next_float() { return static_cast<float>(next_double()); }

  // Uniform in [0, n). Modulo bias is irrelevant at the n used here.
  std::uint64_t bounded(std::uint64_t n) { return n <= 1 ? 0 : next_u64() % n; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  bool coin(double p) { return next_double() < p; }

  // Standard normal via Box-Muller; two fresh uniforms per call.
  double normal() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

// All randomness flows from one top-level seed through labeled derivation.
inline std::uint64_t derive_key(std::uint64_t seed, std::string_view label,
                                std::uint64_t a = 0, std::uint64_t b = 0,
                                std::uint64_t c = 0) {
  std::uint64_t k = mix64(seed ^ hash_label(label));
  k = mix64(k + kGolden + a);
  k = mix64(k + kGolden + b);
  k = mix64(k + kGolden + c);
  return k;
}

inline RngStream derive_stream(std::uint64_t seed, std::string_view label,
                               std::uint64_t a = 0, std::uint64_t b = 0,
                               std::uint64_t c = 0) {
  return RngStream(derive_key(seed, label, a, b, c));
}

}  // namespace ueraser
