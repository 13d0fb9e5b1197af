#pragma once

#include <string>
#include <vector>

#include "vla3d/model/fusion.hpp"

namespace vla3d::model {

struct GeometryConfig {
  int dim = 96;
  double threshold = 0.3;  // minimum sigmoid(l) for an instance token
  int cap = 16;
  int freqs = 4;           // F in the end-effector encoding
  int neighbors = 5;       // K completion points per instance
  int bias_hidden = 16;
  double tau = 1.0;        // routing temperature
  double gate_bias = -3.0;

  int ee_raw_dim() const { return 3 * (1 + 2 * freqs); }
  void validate() const;
};

void register_geometry(ParamStore& store, const GeometryConfig& cfg, const std::string& prefix = "geo");

struct InstanceToken {
  std::size_t probe = 0;
  double logit = 0.0;
  double confidence = 0.0;   // sigmoid(logit)
  double uncertainty = 0.0;  // 1 - confidence
  geom::Vec3 p = geom::Vec3::Zero();
};

/// Probes with sigmoid(l) >= threshold, highest confidence first (ties by
/// lower probe index), at most `cap`.
std::vector<InstanceToken> select_instances(const Tensor& cls_logits, const Tensor& p, double threshold, int cap);

/// [dp, sin(2^0 pi dp), cos(2^0 pi dp), ..., sin(2^(F-1) pi dp), cos(2^(F-1) pi dp)], each block 3 wide.
Tensor ee_features(const Tensor& dp, int freqs);
/// MLP-projected end-effector encoding of p_obj - p_ee for every row. [N, D].
Var ee_encode(const Graph& g, const GeometryConfig& cfg, const Tensor& p_obj, const geom::Vec3& p_ee,
              const std::string& prefix = "geo");

/// Indices of the k nearest rows of `coords` to `center` (ties by index).
std::vector<std::size_t> nearest(const Tensor& coords, const geom::Vec3& center, std::size_t k);

struct LocalContext {
  Var h;  // [1, D]; zeros when there are no completion tokens
  std::vector<std::size_t> neighbors;
  Tensor weights;  // [1, K] attention weights
  bool empty = true;
};

/// Spatially biased attention from one instance state c [1, D] at p over its
/// K nearest completion tokens.
LocalContext local_context(const Graph& g, const GeometryConfig& cfg, const Var& c, const geom::Vec3& p,
                           const Var& comp_features, const Tensor& comp_coords, const std::string& prefix = "geo");

struct RouteResult {
  Var c_hat;  // [1, D]
  Var gate;   // [1, D]
  Var h_norm; // LayerNorm(h)
};

/// c_hat = c + g * LN(h), g = sigmoid(tau * MLP_gate([c | h | u])).
RouteResult route(const Graph& g, const GeometryConfig& cfg, const Var& c, const Var& h, double uncertainty,
                  const std::string& prefix = "geo");

enum class TokenSource { instance, completion };

struct DownstreamTokens {
  Var tokens;  // [N, D]; instances first, then completion tokens
  std::vector<TokenSource> source;
  std::vector<int> owner;  // probe index for instances, instance id for completions
  Tensor coords;           // [N, 3]
  std::vector<double> gate_mean;  // per instance token; 0 when routing was skipped

  std::size_t size() const { return source.size(); }
};

struct CompletionTokens {
  Var features;  // [Nc, D]
  Tensor coords; // [Nc, 3]
  std::vector<int> instance_ids;
};

/// Routes every selected instance, adds the end-effector encoding to every
/// instance and completion token, and emits them in order.
DownstreamTokens assemble(const Graph& g, const GeometryConfig& cfg, const std::vector<InstanceToken>& insts,
                          const Var& probe_c, const CompletionTokens& comp, const geom::Vec3& p_ee,
                          const std::string& prefix = "geo");

/// Stand-in for the action expert: checks the token width and bookkeeping.
void check_downstream(const DownstreamTokens& t, int dim);

}  // namespace vla3d::model
