#include "ueraser/perturb.hpp"

#include <algorithm>
#include <cmath>

namespace ueraser {

void project_linf(Tensor& delta, float eps) {
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = std::clamp(delta[i], -eps, eps);
}

void project_l2(Tensor& delta, float eps) {
  const double n = l2_norm(delta);
  if (n <= static_cast<double>(eps) || n == 0.0) return;
  const float s = static_cast<float>(static_cast<double>(eps) / n);
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] *= s;
}

void project(Tensor& delta, NormKind norm, float eps) {
  if (norm == NormKind::linf)
    project_linf(delta, eps);
  else
    project_l2(delta, eps);
}

void clamp_delta_to_valid(const Tensor& image, Tensor& delta) {
  check_same_shape(image, delta, "clamp_delta_to_valid");
  for (std::size_t i = 0; i < delta.size(); ++i)
    delta[i] = std::clamp(image[i] + delta[i], 0.0f, 1.0f) - image[i];
}

double linf_norm(const Tensor& t) {
  double m = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) m = std::max(m, std::abs(static_cast<double>(t[i])));
  return m;
}

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += static_cast<double>(t[i]) * t[i];
  return std::sqrt(s);
}

}  // namespace ueraser
