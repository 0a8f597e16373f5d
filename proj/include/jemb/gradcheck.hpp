#pragma once

#include <functional>

#include "jemb/tensor.hpp"

namespace jemb {

/// Compares the reverse-mode gradient of a scalar function at x against central
/// differences. Returns max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8).
/// f must be deterministic and return a scalar tensor.
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step);

}  // namespace jemb
