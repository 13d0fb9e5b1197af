#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "vla3d/nn/params.hpp"

namespace vla3d::nn {

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  /// Relative errors are |a-n| / max(|a|, |n|, denom_floor); the floor keeps
  /// entries whose true gradient is ~0 from reporting round-off as error.
  double denom_floor = 1e-4;
  /// 0 checks every entry; otherwise a seeded subset of this size per parameter.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
  bool passed = false;
};

using LossFn = std::function<Var(const Graph&)>;

/// Compares reverse-mode gradients of `loss` with central differences over
/// every trainable parameter in `params`. Throws numeric_error if the loss is
/// non-finite at any probe point.
GradCheckReport grad_check(const LossFn& loss, ParamStore& params, const GradCheckOptions& opts = {});

}  // namespace vla3d::nn
