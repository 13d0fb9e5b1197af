#include "vla3d/model/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace vla3d::model {

using geom::Vec3;

MaskPlan plan_masks(int views, int grid_h, int grid_w, double ratio, nn::Rng rng, int block) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw std::invalid_argument("mask ratio must be in [0, 1), got " + std::to_string(ratio));
  if (views <= 0 || grid_h <= 0 || grid_w <= 0) throw std::invalid_argument("plan_masks: empty token grid");
  if (block <= 0) throw std::invalid_argument("plan_masks: block must be positive");
  const int per_view = grid_h * grid_w;
  const int target = int(std::lround(ratio * per_view));
  const int bh = std::min(block, grid_h), bw = std::min(block, grid_w);
  MaskPlan plan;
  plan.ratio = ratio;
  plan.masked.assign(views, std::vector<std::uint8_t>(per_view, 0));
  for (int v = 0; v < views; ++v) {
    nn::Rng r = rng.derive(std::uint64_t(v));
    auto& m = plan.masked[v];
    int count = 0;
    while (count < target) {
      const int i0 = int(r.index(grid_h - bh + 1)), j0 = int(r.index(grid_w - bw + 1));
      for (int i = i0; i < i0 + bh && count < target; ++i)
        for (int j = j0; j < j0 + bw && count < target; ++j) {
          auto& cell = m[std::size_t(i) * grid_w + j];
          if (!cell) {
            cell = 1;
            ++count;
          }
        }
    }
    for (int t = 0; t < per_view; ++t) {
      const std::size_t global = std::size_t(v) * per_view + t;
      (m[t] ? plan.masked_tokens : plan.visible).push_back(global);
    }
  }
  return plan;
}

void CompletionConfig::validate() const {
  if (!(radius > 0.0) || min_pts < 0) throw std::invalid_argument("bad density denoise parameters");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw std::invalid_argument("keep_fraction must be in (0, 1]");
  if (per_instance <= 0 || max_instances < 0) throw std::invalid_argument("bad completion query counts");
}

std::vector<Vec3> density_denoise(const std::vector<Vec3>& pts, double radius, int min_pts) {
  const double r2 = radius * radius;
  std::vector<Vec3> out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    int n = 0;
    for (std::size_t j = 0; j < pts.size() && n < min_pts; ++j)
      if (j != i && (pts[i] - pts[j]).squaredNorm() <= r2) ++n;
    if (n >= min_pts) out.push_back(pts[i]);
  }
  return out;
}

std::vector<std::size_t> farthest_point_sample(const std::vector<Vec3>& pts, std::size_t start, std::size_t k) {
  if (pts.empty() || k == 0) return {};
  if (start >= pts.size()) throw std::out_of_range("farthest_point_sample: start index out of range");
  k = std::min(k, pts.size());
  std::vector<double> d(pts.size(), std::numeric_limits<double>::infinity());
  std::vector<std::size_t> sel{start};
  while (sel.size() < k) {
    const Vec3& last = pts[sel.back()];
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      d[i] = std::min(d[i], (pts[i] - last).squaredNorm());
      if (d[i] > best_d) {
        best_d = d[i];
        best = i;
      }
    }
    sel.push_back(best);
  }
  return sel;
}

InstanceCompletion complete_instance(const std::vector<Vec3>& observed, const std::vector<Vec3>& dense, int instance_id,
                                     int view, const CompletionConfig& cfg) {
  cfg.validate();
  InstanceCompletion out;
  out.instance_id = instance_id;
  const auto clean = density_denoise(observed, cfg.radius, cfg.min_pts);
  out.observed = clean.size();
  if (clean.empty() || dense.empty()) return out;

  std::vector<double> dist(dense.size());
  for (std::size_t i = 0; i < dense.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& o : clean) best = std::min(best, (dense[i] - o).squaredNorm());
    dist[i] = std::sqrt(best);
  }
  std::vector<std::size_t> order(dense.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
  const std::size_t keep =
      std::max<std::size_t>(cfg.per_instance, std::size_t(std::ceil(cfg.keep_fraction * double(dense.size()))));
  order.resize(std::min(keep, order.size()));

  std::vector<Vec3> cand;
  for (auto i : order) cand.push_back(dense[i]);
  out.novelty = std::numeric_limits<double>::infinity();
  for (auto j : farthest_point_sample(cand, 0, cfg.per_instance)) {
    out.queries.push_back({cand[j], view, instance_id});
    out.novelty = std::min(out.novelty, dist[order[j]]);
  }
  // Fewer dense candidates than queries: repeat the last one to keep the count fixed.
  while (int(out.queries.size()) < cfg.per_instance) out.queries.push_back(out.queries.back());
  out.low_novelty = out.novelty < cfg.novelty_threshold;
  return out;
}

std::vector<Vec3> observed_cloud(const scene::Scene& s, std::size_t k) {
  std::vector<Vec3> pts;
  for (const auto& view : s.views) {
    const int W = view.camera.width;
    for (std::size_t i = 0; i < view.labels.size(); ++i) {
      if (view.labels[i] != int(k)) continue;
      const int row = int(i) / W, col = int(i) % W;
      if (!view.depth.is_valid(row, col)) continue;
      pts.push_back(geom::unproject(col, row, view.depth.at(row, col), view.camera));
    }
  }
  return pts;
}

std::vector<InstanceCompletion> generate_completion_coords(const scene::Scene& s, const CompletionConfig& cfg) {
  cfg.validate();
  std::vector<InstanceCompletion> out;
  for (std::size_t k = 0; k < s.truth.instances.size() && int(out.size()) < cfg.max_instances; ++k) {
    const auto& inst = s.truth.instances[k];
    const auto& px = inst.mask_pixels;
    if (px.empty() || *std::max_element(px.begin(), px.end()) == 0) continue;
    const int view = int(std::max_element(px.begin(), px.end()) - px.begin());
    std::vector<Vec3> dense;
    for (std::size_t i = 0; i < inst.surface.rows(); ++i)
      dense.emplace_back(inst.surface.at(i, 0), inst.surface.at(i, 1), inst.surface.at(i, 2));
    auto c = complete_instance(observed_cloud(s, k), dense, inst.instance_id, view, cfg);
    if (!c.queries.empty()) out.push_back(std::move(c));
  }
  return out;
}

void PredictorConfig::validate() const {
  if (dim <= 0 || heads <= 0 || dim % heads != 0) throw std::invalid_argument("predictor dim must be divisible by heads");
  if (rope.head_dim != head_dim()) throw std::invalid_argument("predictor rope head_dim must equal dim / heads");
  rope.validate();
  if (blocks < 0 || ffn_ratio <= 0 || pos_freqs <= 0 || max_views <= 0) {
    throw std::invalid_argument("bad predictor depth, ffn ratio, frequency count or view count");
  }
}

void register_predictor(ParamStore& store, const PredictorConfig& cfg, const std::string& prefix) {
  cfg.validate();
  const std::size_t D = cfg.dim;
  store.add_truncated_normal(prefix + ".start", {1, D}, cfg.embed_std);
  nn::add_linear(store, prefix + ".pos", 6 * std::size_t(cfg.pos_freqs), D);
  store.add_truncated_normal(prefix + ".view", {std::size_t(cfg.max_views), D}, cfg.embed_std);
  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string p = prefix + ".block" + std::to_string(b);
    for (const char* n : {".ln_q", ".ln_kv", ".ln_s", ".ln_f"}) nn::add_layer_norm(store, p + n, D);
    for (const char* n : {".xq", ".xk", ".xv", ".sq", ".sk", ".sv"}) nn::add_linear(store, p + n, D, D);
    const double out_std = cfg.zero_init_out ? 0.0 : nn::kInitStd;
    nn::add_linear(store, p + ".xo", D, D, out_std);
    nn::add_linear(store, p + ".so", D, D, out_std);
    nn::add_linear(store, p + ".ffn.0", D, D * cfg.ffn_ratio);
    nn::add_linear(store, p + ".ffn.1", D * cfg.ffn_ratio, D, out_std);
  }
}

Tensor fourier_position(const Tensor& coords, int freqs, double octaves) {
  Tensor out({coords.rows(), 6 * std::size_t(freqs)});
  for (std::size_t i = 0; i < coords.rows(); ++i)
    for (int a = 0; a < 3; ++a)
      for (int f = 0; f < freqs; ++f) {
        const double w = std::numbers::pi * std::pow(2.0, octaves * f / std::max(1, freqs - 1));
        out.at(i, (a * freqs + f) * 2) = std::sin(w * coords.at(i, a));
        out.at(i, (a * freqs + f) * 2 + 1) = std::cos(w * coords.at(i, a));
      }
  return out;
}

namespace {

Var inject(const Graph& g, const PredictorConfig& cfg, Var x, const Tensor& coords, const std::vector<int>& views,
           const std::string& prefix) {
  for (int v : views)
    if (v < 0 || v >= cfg.max_views) throw std::out_of_range("predictor: view id " + std::to_string(v) + " out of range");
  if (cfg.use_pos) x = nn::add(x, nn::linear(g, Var(fourier_position(coords, cfg.pos_freqs, cfg.pos_octaves)), prefix + ".pos"));
  std::vector<std::size_t> idx(views.begin(), views.end());
  return nn::add(x, nn::gather_rows(g.param(prefix + ".view"), idx));
}

Var hybrid_attention(const Graph& g, const PredictorConfig& cfg, const Var& xq, const Tensor& pq, const Var& xkv,
                     const Tensor& pkv, const std::string& p, const char* tag, Tensor* logits0) {
  const std::size_t dh = cfg.head_dim();
  const std::string t(tag);
  const Var q = rope3d(nn::linear(g, xq, p + "." + t + "q"), pq, cfg.rope, cfg.heads);
  const Var k = rope3d(nn::linear(g, xkv, p + "." + t + "k"), pkv, cfg.rope, cfg.heads);
  const Var v = nn::linear(g, xkv, p + "." + t + "v");
  std::vector<Var> heads;
  for (int m = 0; m < cfg.heads; ++m) {
    const Var qm = nn::slice_cols(q, m * dh, dh), km = nn::slice_cols(k, m * dh, dh);
    heads.push_back(nn::softmax_attention(qm, km, nn::slice_cols(v, m * dh, dh), dh));
    if (logits0 && m == 0) *logits0 = nn::scale(nn::matmul_t(qm.detach(), km.detach()), 1.0 / std::sqrt(double(dh))).value();
  }
  return nn::linear(g, nn::concat_cols(heads), p + "." + t + "o");
}

}  // namespace

Var predict(const Graph& g, const PredictorConfig& cfg, const PredictorInputs& in, const std::string& prefix,
            PredictorTrace* trace) {
  const std::size_t nv = in.context_coords.rows(), nt = in.target_coords.rows();
  if (nv == 0) throw std::invalid_argument("predict: empty visible context");
  if (!in.context.defined() || in.context.rows() != nv || in.context_views.size() != nv) {
    throw shape_error("predict: context tokens, coords and views disagree");
  }
  if (in.target_views.size() != nt) throw shape_error("predict: target coords and views disagree");
  if (nt == 0) return Var(Tensor({0, std::size_t(cfg.dim)}));

  const Var ctx = inject(g, cfg, in.context, in.context_coords, in.context_views, prefix);
  const std::vector<std::size_t> zeros(nt, 0);
  Var z = inject(g, cfg, nn::gather_rows(g.param(prefix + ".start"), zeros), in.target_coords, in.target_views, prefix);
  if (trace) trace->cross_logits.assign(cfg.blocks, Tensor());
  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string p = prefix + ".block" + std::to_string(b);
    const Var kv = nn::layer_norm(g, ctx, p + ".ln_kv");
    z = nn::add(z, hybrid_attention(g, cfg, nn::layer_norm(g, z, p + ".ln_q"), in.target_coords, kv, in.context_coords, p,
                                    "x", trace ? &trace->cross_logits[b] : nullptr));
    const Var s = nn::layer_norm(g, z, p + ".ln_s");
    z = nn::add(z, hybrid_attention(g, cfg, s, in.target_coords, s, in.target_coords, p, "s", nullptr));
    z = nn::add(z, nn::mlp(g, nn::layer_norm(g, z, p + ".ln_f"), p + ".ffn", 2));
  }
  return z;
}

void DistillWeights::validate() const {
  if (!(recon >= 0.0 && cos >= 0.0 && var >= 0.0)) throw std::invalid_argument("distillation weights must be >= 0");
  if (!(smooth_l1_beta > 0.0)) throw std::invalid_argument("smooth L1 beta must be positive");
}

Var channel_std(const Var& x) {
  const std::size_t n = x.rows();
  if (n < 2) throw shape_error("channel_std needs at least two rows");
  const Var mu = nn::scale(nn::sum_cols(x), 1.0 / double(n));
  const Var centered = nn::add_row(x, nn::neg(mu));
  const Var var = nn::scale(nn::sum_cols(nn::square(centered)), 1.0 / double(n - 1));
  return nn::sqrt(nn::add_const(var, 1e-8));
}

Var mean_cosine(const Var& a, const Var& b) {
  const Var dot = nn::sum_rows(nn::mul(a, b));
  const Var na = nn::sqrt(nn::add_const(nn::sum_rows(nn::square(a)), 1e-12));
  const Var nb = nn::sqrt(nn::add_const(nn::sum_rows(nn::square(b)), 1e-12));
  return nn::mean(nn::div(dot, nn::mul(na, nb)));
}

DistillReport distill_loss(const Var& pred, const Tensor& teacher, const DistillWeights& w) {
  w.validate();
  if (pred.shape() != teacher.shape()) {
    throw shape_error("distill_loss: prediction " + nn::shape_str(pred.shape()) + " vs teacher " +
                      nn::shape_str(teacher.shape()));
  }
  DistillReport r;
  const std::size_t n = pred.rows();
  if (n == 0) {
    r.total_var = Var(Tensor({1, 1}));
    return r;
  }
  const Var y(teacher);
  const Var recon = nn::mean(nn::smooth_l1(nn::sub(pred, y), w.smooth_l1_beta));
  const Var cs = mean_cosine(pred, y);
  const Var cos = nn::add_const(nn::neg(cs), 1.0);
  Var total = nn::add(nn::scale(recon, w.recon), nn::scale(cos, w.cos));
  if (n >= 2) {
    const Var var = nn::mean(nn::relu(nn::sub(channel_std(y), channel_std(pred))));
    r.var = var.value().item();
    total = nn::add(total, nn::scale(var, w.var));
  }
  r.recon = recon.value().item();
  r.cos = cos.value().item();
  r.cosine_similarity = cs.value().item();
  r.total = total.value().item();
  r.total_var = total;
  return r;
}

void ema_update(TeacherState& teacher, const ParamStore& student) {
  const double m = teacher.momentum;
  if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument("EMA momentum must be in [0, 1]");
  if (teacher.params.all().size() != student.all().size()) {
    throw shape_error("teacher and student have different parameter sets");
  }
  for (const auto& [name, p] : student.all()) {
    if (!teacher.params.contains(name)) throw shape_error("teacher lacks parameter '" + name + "'");
    Tensor& t = teacher.params.value(name);
    if (t.shape() != p.value.shape()) throw shape_error("teacher/student shape mismatch for '" + name + "'");
    if (!p.trainable) continue;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = m * t[i] + (1.0 - m) * p.value[i];
  }
}

}  // namespace vla3d::model
