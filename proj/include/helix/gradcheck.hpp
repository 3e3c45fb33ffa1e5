#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "helix/tensor.hpp"

namespace helix {

// Central-difference verification of the tape against the forward pass alone.
// The checker only ever runs the user's forward function and compares slopes,
// so it stays independent of every analytic backward rule it is checking.
struct GradCheckReport {
  double max_rel_err = 0.0;
  std::int64_t elements_checked = 0;
  std::string worst;  // "param 2 elem 17" style locator
};

namespace detail {
inline double rel_err(double a, double b, double floor_mag) {
  const double denom = std::max({std::abs(a), std::abs(b), floor_mag});
  return std::abs(a - b) / denom;
}
}  // namespace detail

// params: leaves with requires_grad already set. forward: fresh scalar loss
// from current param values. step is the half-width of the central difference.
// floor_mag guards the relative error where both slopes are ~0.
inline GradCheckReport grad_check(const std::vector<Tensor<double>*>& params,
                                  const std::function<Tensor<double>()>& forward,
                                  double step = 1e-5, double floor_mag = 1e-6) {
  for (auto* p : params) p->zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    Tensor<double> loss = forward();
    tape.backward(loss);
  }
  for (auto* p : params) {
    auto g = p->grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(static_cast<std::size_t>(p->size()), 0.0);
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto vals = params[pi]->raw();
    for (std::size_t e = 0; e < vals.size(); ++e) {
      const double keep = vals[e];
      vals[e] = keep + step;
      const double up = forward().data()[0];
      vals[e] = keep - step;
      const double down = forward().data()[0];
      vals[e] = keep;
      const double fd = (up - down) / (2.0 * step);
      const double err = detail::rel_err(analytic[pi][e], fd, floor_mag);
      ++report.elements_checked;
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst =
            "param " + std::to_string(pi) + " elem " + std::to_string(e) + " analytic " +
            std::to_string(analytic[pi][e]) + " fd " + std::to_string(fd);
      }
    }
  }
  return report;
}

}  // namespace helix
