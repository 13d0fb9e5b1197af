#include "vla3d/nn/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vla3d/nn/rng.hpp"

namespace vla3d::nn {
namespace {

double eval_loss(const LossFn& loss, const ParamStore& params) {
  Graph g(params);
  const double v = loss(g).value().item();
  if (!std::isfinite(v)) throw numeric_error("grad_check: non-finite loss");
  return v;
}

}  // namespace

GradCheckReport grad_check(const LossFn& loss, ParamStore& params, const GradCheckOptions& opts) {
  GradTape tape;
  {
    Graph g(params, &tape);
    Var l = loss(g);
    if (!std::isfinite(l.value().item())) throw numeric_error("grad_check: non-finite loss");
    tape.backward(l);
  }

  GradCheckReport rep;
  Rng rng = Rng(opts.seed).derive("grad_check");
  for (auto& [name, p] : params.all()) {
    if (!p.trainable) continue;
    const auto git = tape.grads().find(name);
    const std::size_t n = p.value.size();
    std::vector<std::size_t> entries(n);
    std::iota(entries.begin(), entries.end(), 0);
    if (opts.max_entries_per_param && n > opts.max_entries_per_param) {
      for (std::size_t i = 0; i < opts.max_entries_per_param; ++i) std::swap(entries[i], entries[i + rng.index(n - i)]);
      entries.resize(opts.max_entries_per_param);
    }
    for (std::size_t idx : entries) {
      const double analytic = git == tape.grads().end() ? 0.0 : git->second[idx];
      double& x = p.value[idx];
      const double x0 = x;
      x = x0 + opts.h;
      const double fp = eval_loss(loss, params);
      x = x0 - opts.h;
      const double fm = eval_loss(loss, params);
      x = x0;
      const double numeric = (fp - fm) / (2.0 * opts.h);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opts.denom_floor});
      const double err = std::abs(analytic - numeric) / denom;
      ++rep.entries_checked;
      if (err > rep.max_rel_error || rep.worst_param.empty()) {
        if (err >= rep.max_rel_error) {
          rep.max_rel_error = err;
          rep.worst_param = name;
          rep.worst_index = idx;
          rep.worst_analytic = analytic;
          rep.worst_numeric = numeric;
        }
      }
    }
  }
  rep.passed = rep.max_rel_error <= opts.tol;
  return rep;
}

}  // namespace vla3d::nn
