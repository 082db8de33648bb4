#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "kfstream/tensor.hpp"

namespace kfs::testing {

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

// Relative error of an analytic gradient against central differences, measured
// norm-wise over the whole tensor: |g - g_fd| / max(|g|, |g_fd|, floor).
inline double gradient_error(const std::function<double(const Tensor&)>& f, const Tensor& x, const Tensor& analytic,
                             double eps = 1e-4, double floor = 1e-8) {
  Tensor probe = x;
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = f(probe);
    probe[i] = orig - eps;
    const double down = f(probe);
    probe[i] = orig;
    const double fd = (up - down) / (2.0 * eps);
    diff2 += (fd - analytic[i]) * (fd - analytic[i]);
    a2 += analytic[i] * analytic[i];
    n2 += fd * fd;
  }
  const double denom = std::max({std::sqrt(a2), std::sqrt(n2), floor});
  return std::sqrt(diff2) / denom;
}

}  // namespace kfs::testing
