#pragma once

#include <vector>

#include "vla3d/model/model.hpp"

namespace vla3d::model {

struct InferenceResult {
  ProbeOutputs probes;
  std::vector<InstanceToken> instances;
  /// [instance][view] thresholded masks at mask resolution (logit > 0).
  std::vector<std::vector<std::vector<std::uint8_t>>> masks;
  std::vector<InstanceCompletion> completions;  // owner = probe index
  Var completion_features;                       // [Nc, D]
  DownstreamTokens tokens;
  int mask_w = 0, mask_h = 0;
};

/// Observed cloud of a predicted mask: quarter-resolution mask cells mapped
/// to their centre pixel and unprojected with the view's depth.
std::vector<geom::Vec3> mask_cloud(const scene::ViewData& view, const std::vector<std::uint8_t>& mask, int mask_w,
                                   int mask_h);

/// Analytic dense shape for a predicted mask: the scene object that most of
/// the mask's centre pixels land on, or -1 when they mostly hit the table.
int mask_object(const scene::Scene& s, const std::vector<std::vector<std::uint8_t>>& view_masks, int mask_w, int mask_h);

/// Full forward with masking disabled: probes, instance selection, completion
/// queries from predicted masks, predictor features at P_comp, downstream tokens.
InferenceResult infer(const Model& m, const PreparedScene& ps);

/// True when no camera sees the surface point: every view's primary ray to
/// the point hits something else first or the point projects off-image.
bool hidden_from_all_views(const scene::Scene& s, const geom::Vec3& q, double tol = 1e-3);

struct SceneMetrics {
  double centroid_l1 = 0;  // mean over targets, matched probes
  double mask_iou = 0;     // mean over (target, valid view)
  double hidden_hit_rate = 0;
  double distill_cosine = 0;
  int targets = 0;
  int completion_queries = 0;
};

/// Geometric metrics for one scene. With `oracle`, ground truth stands in
/// for the probes (upper bound: centroid error 0, IoU 1).
SceneMetrics evaluate_scene(const Model& m, const PreparedScene& ps, bool oracle, std::uint64_t mask_seed,
                            std::size_t scene_index);

}  // namespace vla3d::model
