#include "vla3d/model/fusion.hpp"

#include <cmath>

namespace vla3d::model {

void RopeConfig::validate() const {
  if (head_dim <= 0 || head_dim % 6 != 0) {
    throw std::invalid_argument("rope head_dim must be a positive multiple of 6, got " + std::to_string(head_dim));
  }
  if (!(base > 1.0)) throw std::invalid_argument("rope base must exceed 1");
}

void FusionConfig::validate() const {
  if (dim <= 0 || heads <= 0 || dim % heads != 0) throw std::invalid_argument("fusion dim must be divisible by heads");
  if (rope.head_dim != head_dim()) {
    throw std::invalid_argument("rope head_dim " + std::to_string(rope.head_dim) + " != fusion head_dim " +
                                std::to_string(head_dim()));
  }
  rope.validate();
  if (patch <= 0) throw std::invalid_argument("patch must be positive");
  if (layers < 0 || ffn_ratio <= 0) throw std::invalid_argument("bad fusion depth or ffn ratio");
}

TokenInputs TokenInputs::subset(const std::vector<std::size_t>& idx) const {
  TokenInputs out;
  out.views = views;
  out.grid_h = grid_h;
  out.grid_w = grid_w;
  out.patches = Tensor({idx.size(), patches.cols()});
  out.coords = Tensor({idx.size(), 3});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const std::size_t r = idx.at(i);
    if (r >= size()) throw shape_error("token subset index out of range");
    std::copy_n(&patches.at(r, 0), patches.cols(), &out.patches.at(i, 0));
    std::copy_n(&coords.at(r, 0), 3, &out.coords.at(i, 0));
    out.view_ids.push_back(view_ids[r]);
  }
  return out;
}

TokenInputs tokenize(const scene::Scene& s, int patch) {
  if (s.views.empty()) throw std::invalid_argument("tokenize: scene has no views");
  const int H = s.height(), W = s.width();
  if (H % patch || W % patch) throw std::invalid_argument("tokenize: patch does not divide the image");
  TokenInputs t;
  t.views = int(s.views.size());
  t.grid_h = H / patch;
  t.grid_w = W / patch;
  const std::size_t per_view = std::size_t(t.grid_h) * t.grid_w;
  const std::size_t C = s.views[0].features.cols();
  t.patches = Tensor({per_view * t.views, std::size_t(patch) * patch * C});
  t.coords = Tensor({per_view * t.views, 3});
  for (int v = 0; v < t.views; ++v) {
    const auto& view = s.views[v];
    if (view.camera.width != W || view.camera.height != H || view.features.cols() != C) {
      throw shape_error("tokenize: views differ in resolution or channels");
    }
    const Tensor grid = geom::unproject_grid(view.depth, view.camera, patch);
    for (int i = 0; i < t.grid_h; ++i)
      for (int j = 0; j < t.grid_w; ++j) {
        const std::size_t row = v * per_view + std::size_t(i) * t.grid_w + j;
        double* dst = &t.patches.at(row, 0);
        for (int dy = 0; dy < patch; ++dy)
          for (int dx = 0; dx < patch; ++dx) {
            const std::size_t px = std::size_t(i * patch + dy) * W + (j * patch + dx);
            dst = std::copy_n(&view.features.at(px, 0), C, dst);
          }
        for (int k = 0; k < 3; ++k) t.coords.at(row, k) = grid.at(std::size_t(i) * t.grid_w + j, k);
        t.view_ids.push_back(v);
      }
  }
  return t;
}

Tensor rope_angles(const Tensor& coords, const RopeConfig& cfg, int heads) {
  cfg.validate();
  const int da = cfg.axis_dim(), half = cfg.head_dim / 2;
  std::vector<double> freq(da / 2);
  for (int d = 0; d < da / 2; ++d) freq[d] = cfg.coord_scale * std::pow(cfg.base, -2.0 * d / da);
  Tensor out({coords.rows(), std::size_t(heads) * half});
  for (std::size_t n = 0; n < coords.rows(); ++n)
    for (int h = 0; h < heads; ++h)
      for (int a = 0; a < 3; ++a)
        for (int d = 0; d < da / 2; ++d) out.at(n, h * half + a * (da / 2) + d) = coords.at(n, a) * freq[d];
  return out;
}

Var rope3d(const Var& x, const Tensor& coords, const RopeConfig& cfg, int heads) {
  if (x.cols() != std::size_t(heads) * cfg.head_dim || x.rows() != coords.rows()) {
    throw shape_error("rope3d: x is " + nn::shape_str(x.shape()) + " for " + std::to_string(coords.rows()) + " coords");
  }
  return nn::rotate_pairs(x, rope_angles(coords, cfg, heads));
}

void register_fusion(ParamStore& store, const FusionConfig& cfg, const std::string& prefix) {
  cfg.validate();
  const std::size_t D = cfg.dim;
  nn::add_linear(store, prefix + ".embed", cfg.patch_dim(), D);
  nn::add_mlp(store, prefix + ".coord", {3, D, D});
  nn::add_layer_norm(store, prefix + ".coord.ln", D);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = prefix + ".layer" + std::to_string(l);
    nn::add_layer_norm(store, p + ".ln1", D);
    for (const char* n : {".q", ".k", ".v", ".o"}) nn::add_linear(store, p + n, D, D);
    nn::add_layer_norm(store, p + ".ln2", D);
    nn::add_mlp(store, p + ".ffn", {D, D * cfg.ffn_ratio, D});
  }
  nn::add_layer_norm(store, prefix + ".out_ln", D);
}

Var encode_coordinates(const Graph& g, const Tensor& coords, const std::string& prefix) {
  coords.check_finite("token coordinates");
  return nn::layer_norm(g, nn::mlp(g, Var(coords), prefix + ".coord", 2), prefix + ".coord.ln");
}

SpatialMemory fuse(const Graph& g, const FusionConfig& cfg, const TokenInputs& in, const std::string& prefix,
                   FusionTrace* trace) {
  if (in.patches.rows() != in.coords.rows() || in.view_ids.size() != in.coords.rows()) {
    throw shape_error("fuse: patches, coords and view ids disagree in length");
  }
  if (in.patches.cols() != std::size_t(cfg.patch_dim())) {
    throw shape_error("fuse: patch width " + std::to_string(in.patches.cols()) + " != " + std::to_string(cfg.patch_dim()));
  }
  const std::size_t dh = cfg.head_dim();
  const Tensor angles = rope_angles(in.coords, cfg.rope, cfg.heads);
  Var x = nn::add(nn::linear(g, Var(in.patches), prefix + ".embed"), encode_coordinates(g, in.coords, prefix));
  if (trace) trace->attention.assign(cfg.layers, {});
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = prefix + ".layer" + std::to_string(l);
    const Var h = nn::layer_norm(g, x, p + ".ln1");
    const Var q = nn::rotate_pairs(nn::linear(g, h, p + ".q"), angles);
    const Var k = nn::rotate_pairs(nn::linear(g, h, p + ".k"), angles);
    const Var v = nn::linear(g, h, p + ".v");
    std::vector<Var> heads;
    for (int m = 0; m < cfg.heads; ++m) {
      const Var qm = nn::slice_cols(q, m * dh, dh), km = nn::slice_cols(k, m * dh, dh);
      heads.push_back(nn::softmax_attention(qm, km, nn::slice_cols(v, m * dh, dh), dh));
      if (trace) {
        const Var logits = nn::scale(nn::matmul_t(qm.detach(), km.detach()), 1.0 / std::sqrt(double(dh)));
        trace->attention[l].push_back(nn::softmax_rows(logits).value());
      }
    }
    x = nn::add(x, nn::linear(g, nn::concat_cols(heads), p + ".o"));
    x = nn::add(x, nn::mlp(g, nn::layer_norm(g, x, p + ".ln2"), p + ".ffn", 2));
  }
  SpatialMemory mem;
  mem.tokens = nn::layer_norm(g, x, prefix + ".out_ln");
  mem.coords = in.coords;
  mem.view_ids = in.view_ids;
  mem.views = in.views;
  mem.grid_h = in.grid_h;
  mem.grid_w = in.grid_w;
  return mem;
}

}  // namespace vla3d::model
