#pragma once

#include <functional>
#include <span>
#include <vector>

#include "sgma/tensor.hpp"

namespace sgma {

/// Largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over all
/// probed elements, using central differences with step `eps`.
///
/// `fn` must map its argument to a scalar tensor deterministically. The input
/// is copied into a fresh leaf, so the caller's tensor is left untouched.
double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& input, double eps = 1e-5);

/// Multi-input form: `fn` closes over `inputs` (which must track gradients) and
/// recomputes the scalar loss from their current values.
double grad_check(const std::function<Tensor()>& fn, std::span<Tensor> inputs, double eps = 1e-5);

double relative_error(double analytic, double numeric);

}  // namespace sgma
