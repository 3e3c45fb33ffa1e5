#pragma once

#include <cstdint>
#include <vector>

#include "helix/rng.hpp"
#include "helix/tensor.hpp"

namespace helix::testutil {

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0,
                                    double hi = 1.0, bool requires_grad = false) {
  Tensor<double> t(std::move(shape), requires_grad);
  Rng rng(seed);
  fill_uniform(t, rng, lo, hi);
  return t;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace helix::testutil
