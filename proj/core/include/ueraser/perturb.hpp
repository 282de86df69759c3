#pragma once

#include <cstdint>

#include "ueraser/tensor.hpp"

namespace ueraser {

// Norm-ball utilities shared by the poison generators and the PGD
// adversarial-training baseline.

enum class NormKind : std::uint8_t { linf = 0, l2 = 1 };

// Clamp every entry of delta to [-eps, eps]. Idempotent.
void project_linf(Tensor& delta, float eps);

// Rescale delta onto the l2 ball of radius eps if it lies outside. Idempotent.
void project_l2(Tensor& delta, float eps);

void project(Tensor& delta, NormKind norm, float eps);

// Shrink delta so that image + delta stays inside [0,1]^d:
// delta <- clamp(image + delta, 0, 1) - image.
void clamp_delta_to_valid(const Tensor& image, Tensor& delta);

double linf_norm(const Tensor& t);
double l2_norm(const Tensor& t);

}  // namespace ueraser
