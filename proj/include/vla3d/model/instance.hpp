#pragma once

#include <string>
#include <vector>

#include "vla3d/geometry/camera.hpp"
#include "vla3d/model/fusion.hpp"

namespace vla3d::model {

struct InstanceConfig {
  int dim = 96;
  int num_probes = 32;
  int layers = 3;
  int heads = 4;
  int keys = 4;
  int scales = 3;
  double alpha = 0.1;          // per-layer displacement bound (m)
  double tau_init = 1.0;
  int pe_dims = 32;            // sinusoidal dims per image axis
  double offset_scale = 0.0625;
  int grid_x = 4, grid_y = 4, grid_z = 2;
  double half_extent = 0.5;    // probe grid spans [-h,h]^2 x [0, z_max]
  double z_max = 0.5;
  int gate_hidden = 32;

  void validate() const;
};

/// Per-view maps at strides 8/16/32 plus the 1/4-scale mask map. Each level
/// is [V*h*w, D] in view-major, row-major order.
struct FeaturePyramid {
  std::vector<Var> levels;
  std::vector<nn::LevelShape> shapes;
  Var mask_map;
  nn::LevelShape mask_shape{0, 0};
  int views = 0;

  Var level_view(std::size_t s, int v) const;
  Var mask_view(int v) const;
};

void register_instance(ParamStore& store, const InstanceConfig& cfg, const std::string& prefix = "inst");

FeaturePyramid build_pyramid(const Graph& g, const SpatialMemory& mem, const std::string& prefix = "inst");

/// Probe grid cell centers [grid_x*grid_y*grid_z, 3]; the grid must hold num_probes points.
Tensor probe_grid(const InstanceConfig& cfg);

/// Normalized pixel positions [P, 2] of points [P, 3] in one camera.
Tensor project_points(const Tensor& p, const geom::CameraView& cam);

/// Sinusoidal features [P, 2*pe_dims] of normalized positions u [P, 2].
Tensor positional_encoding(const Tensor& u, int pe_dims);

struct ProbeOutputs {
  Var cls_logits;                       // [Nq, 1]
  std::vector<Var> boxes;               // per view [Nq, 4] as (x1, y1, x2, y2)
  std::vector<Var> mask_logits;         // per view [Nq, h*w] at mask resolution
  Var p;                                // [Nq, 3] final reference points
  Var c;                                // [Nq, D] final semantic vectors
  std::vector<std::vector<Var>> gates;  // [layer][view] -> [Nq, 1]
  std::vector<Tensor> p_history;        // reference points before each layer and after the last
  std::vector<Tensor> pivots;           // per view, normalized projections of the final p
};

/// One deformable cross-attention read: h = W_out(sample(W' levels, pivots + du; A)).
Var deformable_attend(const Graph& g, const InstanceConfig& cfg, const Var& c, const FeaturePyramid& pyr, int view,
                      const Tensor& pivots, const std::string& layer_prefix);

struct GateResult {
  Var c;
  std::vector<Var> gates;  // un-normalized, per view
};
/// g = sigmoid(MLP(h)/tau), g~ = g / max(sum g, 1e-6), c += sum g~ h.
GateResult gate_and_update(const Graph& g, const Var& c, const std::vector<Var>& h, const std::string& layer_prefix);

/// p + alpha * tanh(MLP(c)).
Var refine_coordinate(const Graph& g, const InstanceConfig& cfg, const Var& c, const Var& p, const std::string& layer_prefix);

/// Box corners from raw head outputs [Nq, 4] = (anchor x, anchor y, width x, width y)
/// logits, anchored at the pivots: a = sigmoid(logit(u) + r), w = sigmoid(r_w),
/// x1 = a (1 - w), x2 = a + (1 - a) w.
Var decode_boxes(const Var& raw, const Tensor& pivots);

ProbeOutputs run_decoder(const Graph& g, const InstanceConfig& cfg, const FeaturePyramid& pyr,
                         const std::vector<geom::CameraView>& cams, const std::string& prefix = "inst");

}  // namespace vla3d::model
