#pragma once

#include <vector>

#include "vla3d/model/instance.hpp"
#include "vla3d/scene/scene.hpp"

namespace vla3d::model {

struct MatchCostConfig {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
  double l3d = 5.0;
  void validate() const;
};

struct LossWeights {
  double cls = 2.0;
  double box = 5.0;
  double giou = 2.0;
  double mask = 5.0;
  double dice = 5.0;
  double l3d = 5.0;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double dice_smooth = 1.0;
  void validate() const;
};

/// Supervision for one physical instance across views.
struct Target {
  int instance = 0;
  geom::Vec3 centroid = geom::Vec3::Zero();
  std::vector<std::uint8_t> valid;  // per view
  std::vector<scene::Box2D> boxes;  // per view
  std::vector<Tensor> masks;        // per view, [1, h*w] at mask resolution
  int num_valid() const;
};

/// One target per instance with at least one valid view.
std::vector<Target> build_targets(const scene::Scene& s);

double box_giou(const scene::Box2D& a, const scene::Box2D& b);

/// C_v(j,k) for one probe prediction against one target in view v.
double pairwise_cost(double p_class, const scene::Box2D& pred_box, const geom::Vec3& pred_p, const Target& t, int view,
                     const MatchCostConfig& cfg);

/// C_global [Nq, m]: pairwise costs averaged over each target's valid views.
Tensor global_cost(const ProbeOutputs& out, const std::vector<Target>& targets, const MatchCostConfig& cfg);

struct Assignment {
  std::vector<int> target_of_probe;  // -1 for background
  std::vector<int> probe_of_target;
  double total = 0.0;  // summed in target order
};

/// Minimum-cost assignment of every column (target) to a distinct row
/// (probe). Requires rows >= cols and finite entries.
Assignment hungarian(const Tensor& cost);

/// Mean over rows of -alpha_t (1 - p_t)^gamma log p_t.
Var focal_loss(const Var& logits, const std::vector<int>& labels, double gamma, double alpha);
/// Per-row 1 - GIoU of corner boxes [P, 4]; returns [P, 1].
Var giou_loss(const Var& a, const Var& b);

struct MaskLosses {
  Var ce;    // mean binary cross-entropy over all pixels
  Var dice;  // mean over rows of 1 - (2 sum pq + s) / (sum p + sum q + s)
};
MaskLosses mask_losses(const Var& logits, const Tensor& target, double smooth);

struct LossReport {
  double cls = 0, l1 = 0, giou = 0, mask_ce = 0, dice = 0, l3d = 0, total = 0;
  LossWeights weights;
  Var total_var;
  int matched_pairs = 0;
  int matched_views = 0;
};

LossReport joint_loss(const ProbeOutputs& out, const std::vector<Target>& targets, const Assignment& assignment,
                      const LossWeights& w);

}  // namespace vla3d::model
