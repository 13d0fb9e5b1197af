#include "vla3d/model/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace vla3d::model {

void GeometryConfig::validate() const {
  if (dim <= 0) throw std::invalid_argument("geometry dim must be positive");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::invalid_argument("instance threshold must be in [0, 1]");
  if (cap < 0) throw std::invalid_argument("instance cap must be >= 0");
  if (freqs < 1) throw std::invalid_argument("end-effector encoding needs F >= 1");
  if (neighbors < 1 || bias_hidden < 1) throw std::invalid_argument("bad local context sizes");
  if (!std::isfinite(tau) || !std::isfinite(gate_bias)) throw std::invalid_argument("routing tau and bias must be finite");
}

void register_geometry(ParamStore& store, const GeometryConfig& cfg, const std::string& prefix) {
  cfg.validate();
  const std::size_t D = cfg.dim;
  nn::add_mlp(store, prefix + ".ee", {std::size_t(cfg.ee_raw_dim()), D, D});
  for (const char* n : {".q", ".k", ".v", ".out"}) nn::add_linear(store, prefix + ".ctx" + n, D, D);
  nn::add_mlp(store, prefix + ".ctx.bias", {3, std::size_t(cfg.bias_hidden), 1});
  nn::add_layer_norm(store, prefix + ".ln", D);
  nn::add_linear(store, prefix + ".gate.0", 2 * D + 1, D);
  store.add_constant(prefix + ".gate.1.w", {D, D}, 0.0);
  store.add_constant(prefix + ".gate.1.b", {1, D}, cfg.gate_bias);
}

std::vector<InstanceToken> select_instances(const Tensor& cls_logits, const Tensor& p, double threshold, int cap) {
  if (cls_logits.rows() != p.rows() || p.cols() != 3) throw shape_error("select_instances: logits and points disagree");
  std::vector<InstanceToken> all;
  for (std::size_t j = 0; j < cls_logits.rows(); ++j) {
    InstanceToken t;
    t.probe = j;
    t.logit = cls_logits.at(j, 0);
    t.confidence = 1.0 / (1.0 + std::exp(-t.logit));
    t.uncertainty = 1.0 - t.confidence;
    t.p = {p.at(j, 0), p.at(j, 1), p.at(j, 2)};
    if (t.confidence >= threshold) all.push_back(t);
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.logit > b.logit; });
  if (int(all.size()) > cap) all.resize(cap);
  return all;
}

Tensor ee_features(const Tensor& dp, int freqs) {
  if (dp.cols() != 3) throw shape_error("ee_features expects [N, 3] offsets");
  Tensor out({dp.rows(), std::size_t(3 * (1 + 2 * freqs))});
  for (std::size_t i = 0; i < dp.rows(); ++i)
    for (int a = 0; a < 3; ++a) {
      const double x = dp.at(i, a);
      out.at(i, a) = x;
      for (int f = 0; f < freqs; ++f) {
        const double w = std::numbers::pi * std::ldexp(1.0, f);
        out.at(i, 3 + 6 * f + a) = std::sin(w * x);
        out.at(i, 6 + 6 * f + a) = std::cos(w * x);
      }
    }
  return out;
}

Var ee_encode(const Graph& g, const GeometryConfig& cfg, const Tensor& p_obj, const geom::Vec3& p_ee,
              const std::string& prefix) {
  Tensor dp = p_obj;
  for (std::size_t i = 0; i < dp.rows(); ++i)
    for (int a = 0; a < 3; ++a) dp.at(i, a) -= p_ee[a];
  return nn::mlp(g, Var(ee_features(dp, cfg.freqs)), prefix + ".ee", 2);
}

std::vector<std::size_t> nearest(const Tensor& coords, const geom::Vec3& c, std::size_t k) {
  std::vector<std::size_t> idx(coords.rows());
  std::iota(idx.begin(), idx.end(), 0);
  auto d2 = [&](std::size_t i) {
    const geom::Vec3 q(coords.at(i, 0), coords.at(i, 1), coords.at(i, 2));
    return (q - c).squaredNorm();
  };
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return d2(a) < d2(b); });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

LocalContext local_context(const Graph& g, const GeometryConfig& cfg, const Var& c, const geom::Vec3& p,
                           const Var& comp_features, const Tensor& comp_coords, const std::string& prefix) {
  LocalContext out;
  const std::size_t n = comp_coords.rows();
  if (n == 0) {
    out.h = Var(Tensor({1, std::size_t(cfg.dim)}));
    return out;
  }
  if (!comp_features.defined() || comp_features.rows() != n) throw shape_error("local_context: features and coords disagree");
  out.empty = false;
  out.neighbors = nearest(comp_coords, p, std::size_t(cfg.neighbors));
  const Var z = nn::gather_rows(comp_features, out.neighbors);
  Tensor rel({out.neighbors.size(), 3});
  for (std::size_t j = 0; j < out.neighbors.size(); ++j)
    for (int a = 0; a < 3; ++a) rel.at(j, a) = comp_coords.at(out.neighbors[j], a) - p[a];
  const Var bias = nn::transpose(nn::mlp(g, Var(rel), prefix + ".ctx.bias", 2));  // [1, K]
  const Var q = nn::linear(g, c, prefix + ".ctx.q");
  const Var k = nn::linear(g, z, prefix + ".ctx.k");
  const Var v = nn::linear(g, z, prefix + ".ctx.v");
  const double dk = double(cfg.dim);
  out.weights = nn::softmax_rows(nn::add(nn::scale(nn::matmul_t(q.detach(), k.detach()), 1.0 / std::sqrt(dk)),
                                         bias.detach()))
                    .value();
  out.h = nn::linear(g, nn::softmax_attention_biased(q, k, v, cfg.dim, bias), prefix + ".ctx.out");
  return out;
}

RouteResult route(const Graph& g, const GeometryConfig& cfg, const Var& c, const Var& h, double u,
                  const std::string& prefix) {
  if (!(u >= 0.0 && u <= 1.0)) throw std::invalid_argument("uncertainty must be in [0, 1]");
  const Var uv(Tensor({1, 1}, u));
  const Var parts[] = {c, h, uv};
  RouteResult r;
  r.gate = nn::sigmoid(nn::scale(nn::mlp(g, nn::concat_cols(parts), prefix + ".gate", 2), cfg.tau));
  r.h_norm = nn::layer_norm(g, h, prefix + ".ln");
  r.c_hat = nn::add(c, nn::mul(r.gate, r.h_norm));
  return r;
}

DownstreamTokens assemble(const Graph& g, const GeometryConfig& cfg, const std::vector<InstanceToken>& insts,
                          const Var& probe_c, const CompletionTokens& comp, const geom::Vec3& p_ee,
                          const std::string& prefix) {
  DownstreamTokens out;
  const std::size_t ni = insts.size(), nc = comp.coords.rows();
  if (comp.instance_ids.size() != nc) throw shape_error("assemble: completion ids and coords disagree");
  out.coords = Tensor({ni + nc, 3});
  std::vector<Var> rows;
  for (std::size_t i = 0; i < ni; ++i) {
    const auto& t = insts[i];
    const Var c = nn::slice_rows(probe_c, t.probe, 1);
    const LocalContext ctx = local_context(g, cfg, c, t.p, comp.features, comp.coords, prefix);
    if (ctx.empty) {
      rows.push_back(c);
      out.gate_mean.push_back(0.0);
    } else {
      const RouteResult r = route(g, cfg, c, ctx.h, t.uncertainty, prefix);
      rows.push_back(r.c_hat);
      double s = 0;
      for (double v : r.gate.value().storage()) s += v;
      out.gate_mean.push_back(s / double(cfg.dim));
    }
    for (int a = 0; a < 3; ++a) out.coords.at(i, a) = t.p[a];
    out.source.push_back(TokenSource::instance);
    out.owner.push_back(int(t.probe));
  }
  for (std::size_t j = 0; j < nc; ++j) {
    for (int a = 0; a < 3; ++a) out.coords.at(ni + j, a) = comp.coords.at(j, a);
    out.source.push_back(TokenSource::completion);
    out.owner.push_back(comp.instance_ids[j]);
  }
  if (ni + nc == 0) {
    out.tokens = Var(Tensor({0, std::size_t(cfg.dim)}));
    return out;
  }
  if (nc) rows.push_back(comp.features);
  out.tokens = nn::add(nn::concat_rows(rows), ee_encode(g, cfg, out.coords, p_ee, prefix));
  return out;
}

void check_downstream(const DownstreamTokens& t, int dim) {
  const std::size_t n = t.size();
  if (!t.tokens.defined() || t.tokens.rows() != n || t.owner.size() != n || t.coords.rows() != n) {
    throw shape_error("downstream tokens: sequence bookkeeping disagrees");
  }
  if (t.tokens.cols() != std::size_t(dim)) {
    throw shape_error("downstream tokens have width " + std::to_string(t.tokens.cols()) + ", expected " +
                      std::to_string(dim));
  }
  bool seen_completion = false;
  for (auto s : t.source) {
    if (s == TokenSource::completion) seen_completion = true;
    else if (seen_completion) throw shape_error("downstream tokens: instance token after completion tokens");
  }
  t.tokens.value().check_finite("downstream tokens");
}

}  // namespace vla3d::model
