#include "vla3d/nn/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace vla3d::nn {

double global_norm(const GradMap& grads) {
  double s = 0.0;
  for (const auto& [_, g] : grads)
    for (double v : g.storage()) s += v * v;
  return std::sqrt(s);
}

double clip_global_norm(GradMap& grads, double max_norm) {
  const double n = global_norm(grads);
  if (max_norm > 0.0 && n > max_norm) {
    const double k = max_norm / n;
    for (auto& [_, g] : grads)
      for (double& v : g.storage()) v *= k;
  }
  return n;
}

void Adam::step(ParamStore& store, const GradMap& grads, double lr) {
  for (const auto& [name, _] : grads) {
    if (!store.get(name).trainable) throw frozen_param_error(name);
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    Tensor& w = store.value(name);
    auto [mi, mnew] = m_.try_emplace(name, Tensor(w.shape()));
    auto [vi, vnew] = v_.try_emplace(name, Tensor(w.shape()));
    Tensor& m = mi->second;
    Tensor& v = vi->second;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mh = m[i] / bc1, vh = v[i] / bc2;
      w[i] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * w[i]);
    }
  }
}

double warmup_cosine_lr(long step, long warmup, long total, double peak, double final_lr) {
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const long decay = std::max(1L, total - warmup);
  const double t = std::clamp(static_cast<double>(step - warmup) / static_cast<double>(decay), 0.0, 1.0);
  return final_lr + 0.5 * (peak - final_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace vla3d::nn
