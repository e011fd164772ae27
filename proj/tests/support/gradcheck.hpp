#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "simdiffrec/autograd.hpp"

namespace gradcheck {

using simdiffrec::ag::Matrix;
using simdiffrec::ag::Var;

struct Result {
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::size_t checked = 0;
};

/// Entries whose analytic and numeric gradients are both below this are
/// compared in absolute terms.
inline constexpr double kFloor = 1e-4;

/// Central differences of the scalar `loss()` with respect to every entry of
/// every parameter, against the reverse-mode gradient. `loss` must rebuild
/// the graph from the parameters' current values on each call.
inline Result check(const std::function<Var()>& loss, std::vector<Var> params, double eps = 1e-5,
                    std::size_t max_entries_per_param = 0) {
  for (auto& p : params) p.zero_grad();
  const Var root = loss();
  simdiffrec::ag::backward(root);
  std::vector<Matrix> analytic;
  for (auto& p : params)
    analytic.push_back(p.has_grad() ? p.grad() : Matrix::Zero(p.rows(), p.cols()));

  Result r;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& v = params[k].mutable_value();
    const auto n = static_cast<std::size_t>(v.size());
    const std::size_t stride = max_entries_per_param && n > max_entries_per_param ? n / max_entries_per_param : 1;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = v.data()[i];
      v.data()[i] = saved + eps;
      const double up = loss().item();
      v.data()[i] = saved - eps;
      const double down = loss().item();
      v.data()[i] = saved;
      const double num = (up - down) / (2.0 * eps);
      const double ana = analytic[k].data()[i];
      const double abs_err = std::abs(num - ana);
      r.max_abs = std::max(r.max_abs, abs_err);
      r.max_rel = std::max(r.max_rel, abs_err / std::max({std::abs(num), std::abs(ana), kFloor}));
      ++r.checked;
    }
  }
  return r;
}

}  // namespace gradcheck
