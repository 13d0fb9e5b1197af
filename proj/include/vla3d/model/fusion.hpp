#pragma once

#include <string>
#include <vector>

#include "vla3d/nn/layers.hpp"
#include "vla3d/scene/scene.hpp"

namespace vla3d::model {

using nn::Graph;
using nn::ParamStore;
using nn::Tensor;
using nn::Var;

struct RopeConfig {
  int head_dim = 24;
  double base = 10000.0;
  double coord_scale = 10.0;  // radians per meter before the frequency ladder

  int axis_dim() const { return head_dim / 3; }
  void validate() const;
};

struct FusionConfig {
  int in_channels = scene::kFeatureChannels;
  int patch = 8;
  int dim = 96;
  int heads = 4;
  int layers = 2;
  int ffn_ratio = 4;
  RopeConfig rope;

  int head_dim() const { return dim / heads; }
  int patch_dim() const { return patch * patch * in_channels; }
  void validate() const;
};

/// Flattened multi-view tokens before fusion.
struct TokenInputs {
  Tensor patches;  // [N, patch*patch*C]
  Tensor coords;   // [N, 3] world meters at cell centers
  std::vector<int> view_ids;
  int views = 0, grid_h = 0, grid_w = 0;

  std::size_t size() const { return view_ids.size(); }
  /// Rows `idx` in the given order.
  TokenInputs subset(const std::vector<std::size_t>& idx) const;
};

TokenInputs tokenize(const scene::Scene& s, int patch);

struct SpatialMemory {
  Var tokens;     // [N, D]
  Tensor coords;  // [N, 3]
  std::vector<int> view_ids;
  int views = 0, grid_h = 0, grid_w = 0;
};

/// Rotation angles [N, heads*head_dim/2] for rope over all heads at once.
/// Within a head, axes x, y, z occupy consecutive blocks of axis_dim channels.
Tensor rope_angles(const Tensor& coords, const RopeConfig& cfg, int heads);
/// Applies rope to x [N, heads*head_dim].
Var rope3d(const Var& x, const Tensor& coords, const RopeConfig& cfg, int heads = 1);

void register_fusion(ParamStore& store, const FusionConfig& cfg, const std::string& prefix = "fusion");

/// E_3D = LN(W2 GELU(W1 P + b1) + b2).
Var encode_coordinates(const Graph& g, const Tensor& coords, const std::string& prefix = "fusion");

/// Per-layer, per-head attention probabilities, filled when requested.
struct FusionTrace {
  std::vector<std::vector<Tensor>> attention;  // [layer][head] -> [N, N]
};

/// Pre-norm transformer over (embed(patches) + E_3D) with rope on Q/K.
SpatialMemory fuse(const Graph& g, const FusionConfig& cfg, const TokenInputs& in, const std::string& prefix = "fusion",
                   FusionTrace* trace = nullptr);

}  // namespace vla3d::model
