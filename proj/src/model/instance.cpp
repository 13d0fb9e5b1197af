#include "vla3d/model/instance.hpp"

#include <cmath>
#include <numbers>

namespace vla3d::model {
namespace {

std::string layer_name(const std::string& prefix, int l) { return prefix + ".dec" + std::to_string(l); }

// Space-to-depth by 2 over every view: [V*h*w, D] -> [V*(h/2)*(w/2), 4D].
std::vector<std::size_t> space_to_depth_index(int V, int h, int w, int D) {
  std::vector<std::size_t> idx;
  idx.reserve(std::size_t(V) * h * w * D);
  for (int v = 0; v < V; ++v)
    for (int i = 0; i < h / 2; ++i)
      for (int j = 0; j < w / 2; ++j)
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t src = (std::size_t(v) * h + 2 * i + dy) * w + 2 * j + dx;
            for (int c = 0; c < D; ++c) idx.push_back(src * D + c);
          }
  return idx;
}

// Depth-to-space by 2: [V*h*w, 4D] -> [V*(2h)*(2w), D].
std::vector<std::size_t> depth_to_space_index(int V, int h, int w, int D) {
  std::vector<std::size_t> idx;
  idx.reserve(std::size_t(V) * h * w * 4 * D);
  for (int v = 0; v < V; ++v)
    for (int r = 0; r < 2 * h; ++r)
      for (int q = 0; q < 2 * w; ++q) {
        const std::size_t src = (std::size_t(v) * h + r / 2) * w + q / 2;
        const int sub = (r % 2) * 2 + (q % 2);
        for (int c = 0; c < D; ++c) idx.push_back(src * 4 * D + sub * D + c);
      }
  return idx;
}

}  // namespace

void InstanceConfig::validate() const {
  if (dim <= 0 || heads <= 0 || dim % heads) throw std::invalid_argument("instance dim must be divisible by heads");
  if (num_probes < 1 || num_probes > grid_x * grid_y * grid_z) {
    throw std::invalid_argument("num_probes must be in [1, grid size " + std::to_string(grid_x * grid_y * grid_z) + "]");
  }
  if (layers < 0 || keys < 1 || scales < 1 || scales > 3) throw std::invalid_argument("bad decoder depth/keys/scales");
  if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
  if (!(tau_init > 0.0)) throw std::invalid_argument("tau_init must be positive");
  if (pe_dims < 2 || pe_dims % 2) throw std::invalid_argument("pe_dims must be even");
}

Var FeaturePyramid::level_view(std::size_t s, int v) const {
  const std::size_t n = shapes.at(s).h * shapes[s].w;
  return nn::slice_rows(levels.at(s), v * n, n);
}

Var FeaturePyramid::mask_view(int v) const {
  const std::size_t n = mask_shape.h * mask_shape.w;
  return nn::slice_rows(mask_map, v * n, n);
}

void register_instance(ParamStore& store, const InstanceConfig& cfg, const std::string& prefix) {
  cfg.validate();
  const std::size_t D = cfg.dim, M = cfg.heads, K = cfg.keys, S = cfg.scales, P = 2 * cfg.pe_dims;
  nn::add_linear(store, prefix + ".pyr.s8", D, D);
  nn::add_linear(store, prefix + ".pyr.s16", 4 * D, D);
  nn::add_linear(store, prefix + ".pyr.s32", 4 * D, D);
  nn::add_linear(store, prefix + ".pyr.up", D, 4 * D);
  store.add_truncated_normal(prefix + ".probe.c", {std::size_t(cfg.num_probes), D}, 1.0);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = layer_name(prefix, l);
    nn::add_linear(store, p + ".value", D, D);
    nn::add_linear(store, p + ".offset", D, M * K * S * 2);
    // Offsets start on a ring around the pivot, one direction per (head, key).
    Tensor& ob = store.value(p + ".offset.b");
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t k = 0; k < K; ++k) {
        const double ang = 2.0 * std::numbers::pi * double(m * K + k) / double(M * K);
        for (std::size_t s = 0; s < S; ++s) {
          const std::size_t pt = (m * K + k) * S + s;
          ob[pt * 2] = 0.5 * double(k + 1) * std::cos(ang);
          ob[pt * 2 + 1] = 0.5 * double(k + 1) * std::sin(ang);
        }
      }
    nn::add_linear(store, p + ".attw", D, M * K * S);
    nn::add_linear(store, p + ".out", D, D);
    nn::add_mlp(store, p + ".gate", {D, std::size_t(cfg.gate_hidden), 1});
    store.add_constant(p + ".tau", {1, 1}, cfg.tau_init);
    nn::add_mlp(store, p + ".coord", {D, D, 3});
  }
  nn::add_linear(store, prefix + ".head.cls", D, 1);
  store.value(prefix + ".head.cls.b")[0] = -std::log((1.0 - 0.01) / 0.01);
  nn::add_mlp(store, prefix + ".head.box", {D + P, D, 4});
  nn::add_mlp(store, prefix + ".head.mask", {D + P, D, D});
}

FeaturePyramid build_pyramid(const Graph& g, const SpatialMemory& mem, const std::string& prefix) {
  const int V = mem.views, h = mem.grid_h, w = mem.grid_w;
  const int D = int(mem.tokens.cols());
  if (h % 4 || w % 4) throw shape_error("build_pyramid: token grid must be divisible by 4 for strides 16 and 32");
  if (mem.tokens.rows() != std::size_t(V) * h * w) throw shape_error("build_pyramid: memory layout mismatch");
  FeaturePyramid pyr;
  pyr.views = V;
  const Var s8 = nn::linear(g, mem.tokens, prefix + ".pyr.s8");
  const auto i16 = space_to_depth_index(V, h, w, D);
  const Var s16 = nn::linear(g, nn::take(mem.tokens, i16, {std::size_t(V) * (h / 2) * (w / 2), 4 * std::size_t(D)}),
                             prefix + ".pyr.s16");
  const auto i32 = space_to_depth_index(V, h / 2, w / 2, D);
  const Var s32 =
      nn::linear(g, nn::take(s16, i32, {std::size_t(V) * (h / 4) * (w / 4), 4 * std::size_t(D)}), prefix + ".pyr.s32");
  pyr.levels = {s8, s16, s32};
  pyr.shapes = {{std::size_t(h), std::size_t(w)}, {std::size_t(h / 2), std::size_t(w / 2)},
                {std::size_t(h / 4), std::size_t(w / 4)}};
  const Var up = nn::linear(g, mem.tokens, prefix + ".pyr.up");
  pyr.mask_map = nn::take(up, depth_to_space_index(V, h, w, D), {std::size_t(V) * 4 * h * w, std::size_t(D)});
  pyr.mask_shape = {std::size_t(2 * h), std::size_t(2 * w)};
  return pyr;
}

Tensor probe_grid(const InstanceConfig& cfg) {
  Tensor out({std::size_t(cfg.grid_x) * cfg.grid_y * cfg.grid_z, 3});
  std::size_t r = 0;
  for (int k = 0; k < cfg.grid_z; ++k)
    for (int i = 0; i < cfg.grid_y; ++i)
      for (int j = 0; j < cfg.grid_x; ++j, ++r) {
        out.at(r, 0) = -cfg.half_extent + 2.0 * cfg.half_extent * (j + 0.5) / cfg.grid_x;
        out.at(r, 1) = -cfg.half_extent + 2.0 * cfg.half_extent * (i + 0.5) / cfg.grid_y;
        out.at(r, 2) = cfg.z_max * (k + 0.5) / cfg.grid_z;
      }
  return out;
}

Tensor project_points(const Tensor& p, const geom::CameraView& cam) {
  Tensor u({p.rows(), 2});
  for (std::size_t i = 0; i < p.rows(); ++i) {
    const auto pr = geom::project(geom::Vec3(p.at(i, 0), p.at(i, 1), p.at(i, 2)), cam);
    u.at(i, 0) = pr.u.x();
    u.at(i, 1) = pr.u.y();
  }
  return u;
}

Tensor positional_encoding(const Tensor& u, int pe_dims) {
  const int nf = pe_dims / 2;
  Tensor out({u.rows(), std::size_t(2 * pe_dims)});
  for (std::size_t i = 0; i < u.rows(); ++i)
    for (int a = 0; a < 2; ++a)
      for (int f = 0; f < nf; ++f) {
        const double w = std::numbers::pi * std::pow(2.0, 5.0 * f / std::max(1, nf - 1));
        out.at(i, a * pe_dims + 2 * f) = std::sin(w * u.at(i, a));
        out.at(i, a * pe_dims + 2 * f + 1) = std::cos(w * u.at(i, a));
      }
  return out;
}

Var deformable_attend(const Graph& g, const InstanceConfig& cfg, const Var& c, const FeaturePyramid& pyr, int view,
                      const Tensor& pivots, const std::string& lp) {
  const std::size_t J = c.rows(), M = cfg.heads, KS = std::size_t(cfg.keys) * cfg.scales;
  std::vector<Var> levels;
  std::vector<nn::LevelShape> shapes;
  for (int s = 0; s < cfg.scales; ++s) {
    levels.push_back(nn::linear(g, pyr.level_view(s, view), lp + ".value"));
    shapes.push_back(pyr.shapes.at(s));
  }
  const Var offsets = nn::scale(nn::linear(g, c, lp + ".offset"), cfg.offset_scale);
  const Var logits = nn::reshape(nn::linear(g, c, lp + ".attw"), {J * M, KS});
  const Var weights = nn::reshape(nn::softmax_rows(logits), {J, M * KS});
  const Var sampled = nn::deformable_sample(levels, shapes, pivots, offsets, weights, M, cfg.keys);
  return nn::linear(g, sampled, lp + ".out");
}

GateResult gate_and_update(const Graph& g, const Var& c, const std::vector<Var>& h, const std::string& lp) {
  if (h.empty()) throw std::invalid_argument("gate_and_update needs at least one view");
  const Var inv_tau = nn::div(Var(Tensor::scalar(1.0)), nn::clamp_min(g.param(lp + ".tau"), 0.05));
  GateResult r;
  Var total;
  for (const auto& hv : h) {
    r.gates.push_back(nn::sigmoid(nn::mul_scalar(nn::mlp(g, hv, lp + ".gate", 2), inv_tau)));
    total = total.defined() ? nn::add(total, r.gates.back()) : r.gates.back();
  }
  const Var denom = nn::clamp_min(total, 1e-6);
  r.c = c;
  for (std::size_t v = 0; v < h.size(); ++v) r.c = nn::add(r.c, nn::mul_col(h[v], nn::div(r.gates[v], denom)));
  return r;
}

Var refine_coordinate(const Graph& g, const InstanceConfig& cfg, const Var& c, const Var& p, const std::string& lp) {
  return nn::add(p, nn::scale(nn::tanh(nn::mlp(g, c, lp + ".coord", 2)), cfg.alpha));
}

Var decode_boxes(const Var& raw, const Tensor& pivots) {
  if (raw.cols() != 4 || raw.rows() != pivots.rows()) throw shape_error("decode_boxes: expected [n,4] raw outputs");
  Tensor prior({pivots.rows(), 2});
  for (std::size_t i = 0; i < pivots.rows(); ++i)
    for (int a = 0; a < 2; ++a) {
      const double u = std::clamp(pivots.at(i, a), 1e-3, 1.0 - 1e-3);
      prior.at(i, a) = std::log(u / (1.0 - u));
    }
  const Var a = nn::sigmoid(nn::add(nn::slice_cols(raw, 0, 2), Var(prior)));
  const Var w = nn::sigmoid(nn::slice_cols(raw, 2, 2));
  const Var one_minus_w = nn::add_const(nn::neg(w), 1.0);
  const Var one_minus_a = nn::add_const(nn::neg(a), 1.0);
  const Var lo = nn::mul(a, one_minus_w);
  const Var hi = nn::add(a, nn::mul(one_minus_a, w));
  const Var parts[] = {lo, hi};
  return nn::concat_cols(parts);
}

ProbeOutputs run_decoder(const Graph& g, const InstanceConfig& cfg, const FeaturePyramid& pyr,
                         const std::vector<geom::CameraView>& cams, const std::string& prefix) {
  if (cams.size() != std::size_t(pyr.views)) throw shape_error("run_decoder: camera count != pyramid views");
  ProbeOutputs out;
  const Tensor grid = probe_grid(cfg);
  out.c = nn::slice_rows(g.param(prefix + ".probe.c"), 0, cfg.num_probes);
  out.p = nn::slice_rows(Var(grid), 0, cfg.num_probes);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string lp = layer_name(prefix, l);
    out.p_history.push_back(out.p.value());
    std::vector<Var> h;
    for (std::size_t v = 0; v < cams.size(); ++v) {
      h.push_back(deformable_attend(g, cfg, out.c, pyr, int(v), project_points(out.p.value(), cams[v]), lp));
    }
    auto gr = gate_and_update(g, out.c, h, lp);
    out.gates.push_back(gr.gates);
    out.c = gr.c;
    out.p = refine_coordinate(g, cfg, out.c, out.p, lp);
  }
  out.p_history.push_back(out.p.value());
  out.cls_logits = nn::linear(g, out.c, prefix + ".head.cls");
  for (std::size_t v = 0; v < cams.size(); ++v) {
    const Tensor u = project_points(out.p.value(), cams[v]);
    out.pivots.push_back(u);
    const Var parts[] = {out.c, Var(positional_encoding(u, cfg.pe_dims))};
    const Var cu = nn::concat_cols(parts);
    out.boxes.push_back(decode_boxes(nn::mlp(g, cu, prefix + ".head.box", 2), u));
    const Var m = nn::mlp(g, cu, prefix + ".head.mask", 2);
    out.mask_logits.push_back(nn::matmul_t(m, pyr.mask_view(int(v))));
  }
  return out;
}

}  // namespace vla3d::model
