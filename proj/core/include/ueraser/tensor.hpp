#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "ueraser/error.hpp"

namespace ueraser {

/// Dense row-major float32 tensor. The only data container in the library:
/// images are {3,H,W}, batches {B,3,H,W}, logits {B,C}, per-example losses {B}.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    std::size_t n = 1;
    for (int d : shape_) {
      if (d <= 0) throw ConfigError("tensor extent must be positive");
      n *= static_cast<std::size_t>(d);
    }
    data_.assign(n, 0.0f);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, float value) {
    Tensor t(std::move(shape));
    for (float& v : t.data_) v = value;
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(std::size_t i) const { return shape_.at(i); }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // ND accessors for the ranks used in practice.
  float& at(int a, int b) { return data_[idx2(a, b)]; }
  float at(int a, int b) const { return data_[idx2(a, b)]; }
  float& at(int a, int b, int c) { return data_[idx3(a, b, c)]; }
  float at(int a, int b, int c) const { return data_[idx3(a, b, c)]; }
  float& at(int a, int b, int c, int d) { return data_[idx4(a, b, c, d)]; }
  float at(int a, int b, int c, int d) const { return data_[idx4(a, b, c, d)]; }

  std::size_t idx2(int a, int b) const {
    return static_cast<std::size_t>(a) * shape_[1] + b;
  }
  std::size_t idx3(int a, int b, int c) const {
    return (static_cast<std::size_t>(a) * shape_[1] + b) * shape_[2] + c;
  }
  std::size_t idx4(int a, int b, int c, int d) const {
    return ((static_cast<std::size_t>(a) * shape_[1] + b) * shape_[2] + c) * shape_[3] + d;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (float v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(float v) {
    for (float& x : data_) x = v;
  }

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) throw ConfigError(std::string(op) + ": shape mismatch");
}

}  // namespace ueraser
