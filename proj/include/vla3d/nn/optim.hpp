#pragma once

#include <map>
#include <stdexcept>
#include <string>

#include "vla3d/nn/params.hpp"

namespace vla3d::nn {

class frozen_param_error : public std::logic_error {
 public:
  explicit frozen_param_error(const std::string& name)
      : std::logic_error("gradient supplied for frozen parameter '" + name + "'") {}
};

using GradMap = std::map<std::string, Tensor>;

double global_norm(const GradMap& grads);
/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_global_norm(GradMap& grads, double max_norm);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW)
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// One update. Throws frozen_param_error if `grads` names a frozen
  /// parameter and unknown_param for names absent from `store`.
  void step(ParamStore& store, const GradMap& grads, double lr);
  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

/// Linear warmup to `peak`, then cosine decay to `final_lr` at `total`.
double warmup_cosine_lr(long step, long warmup, long total, double peak, double final_lr);

}  // namespace vla3d::nn
