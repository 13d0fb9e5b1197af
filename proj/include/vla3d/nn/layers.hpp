#pragma once

#include <string>
#include <vector>

#include "vla3d/nn/ops.hpp"
#include "vla3d/nn/params.hpp"

namespace vla3d::nn {

inline constexpr double kInitStd = 0.02;
inline constexpr double kLayerNormEps = 1e-5;

// Registration. A linear layer `name` owns `name.w` [in,out] and `name.b` [1,out].
void add_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, double std = kInitStd);
void add_layer_norm(ParamStore& store, const std::string& name, std::size_t dim);
/// GELU MLP with layers `name.0`, `name.1`, ... over the given widths.
void add_mlp(ParamStore& store, const std::string& name, const std::vector<std::size_t>& widths);

/// x W + b. Throws shape_error on inner-dim mismatch and unknown_param when
/// the layer is not registered.
Var linear(const Graph& g, const Var& x, const std::string& name);
Var layer_norm(const Graph& g, const Var& x, const std::string& name, double eps = kLayerNormEps);
Var mlp(const Graph& g, const Var& x, const std::string& name, std::size_t num_layers);

}  // namespace vla3d::nn
