#include "vla3d/nn/layers.hpp"

namespace vla3d::nn {

void add_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, double std) {
  store.add_truncated_normal(name + ".w", {in, out}, std);
  store.add_constant(name + ".b", {1, out}, 0.0);
}

void add_layer_norm(ParamStore& store, const std::string& name, std::size_t dim) {
  store.add_constant(name + ".gamma", {1, dim}, 1.0);
  store.add_constant(name + ".beta", {1, dim}, 0.0);
}

void add_mlp(ParamStore& store, const std::string& name, const std::vector<std::size_t>& widths) {
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    add_linear(store, name + "." + std::to_string(i), widths[i], widths[i + 1]);
  }
}

Var linear(const Graph& g, const Var& x, const std::string& name) {
  Var w = g.param(name + ".w");
  Var b = g.param(name + ".b");
  if (x.cols() != w.rows()) {
    throw shape_error("linear '" + name + "': input width " + std::to_string(x.cols()) + " but weight is " +
                      shape_str(w.shape()));
  }
  return add_row(matmul(x, w), b);
}

Var layer_norm(const Graph& g, const Var& x, const std::string& name, double eps) {
  return layer_norm(x, g.param(name + ".gamma"), g.param(name + ".beta"), eps);
}

Var mlp(const Graph& g, const Var& x, const std::string& name, std::size_t num_layers) {
  Var h = x;
  for (std::size_t i = 0; i < num_layers; ++i) {
    h = linear(g, h, name + "." + std::to_string(i));
    if (i + 1 < num_layers) h = gelu(h);
  }
  return h;
}

}  // namespace vla3d::nn
