#include "vla3d/model/inference.hpp"

#include <algorithm>
#include <map>

namespace vla3d::model {

using geom::Vec3;

std::vector<Vec3> mask_cloud(const scene::ViewData& view, const std::vector<std::uint8_t>& mask, int mask_w,
                             int mask_h) {
  const int sx = view.camera.width / mask_w, sy = view.camera.height / mask_h;
  std::vector<Vec3> pts;
  for (int i = 0; i < mask_h; ++i)
    for (int j = 0; j < mask_w; ++j) {
      if (!mask[std::size_t(i) * mask_w + j]) continue;
      const int row = i * sy + sy / 2, col = j * sx + sx / 2;
      if (!view.depth.is_valid(row, col)) continue;
      pts.push_back(geom::unproject(col, row, view.depth.at(row, col), view.camera));
    }
  return pts;
}

int mask_object(const scene::Scene& s, const std::vector<std::vector<std::uint8_t>>& view_masks, int mask_w, int mask_h) {
  std::map<int, int> votes;
  int total = 0;
  for (std::size_t v = 0; v < s.views.size(); ++v) {
    const auto& view = s.views[v];
    const int sx = view.camera.width / mask_w, sy = view.camera.height / mask_h;
    for (int i = 0; i < mask_h; ++i)
      for (int j = 0; j < mask_w; ++j)
        if (view_masks[v][std::size_t(i) * mask_w + j]) {
          ++votes[view.labels[std::size_t(i * sy + sy / 2) * view.camera.width + (j * sx + sx / 2)]];
          ++total;
        }
  }
  int best = -1, best_n = 0;
  for (auto [obj, n] : votes)
    if (obj >= 0 && n > best_n) {
      best = obj;
      best_n = n;
    }
  return 2 * best_n > total ? best : -1;
}

InferenceResult infer(const Model& m, const PreparedScene& ps) {
  const scene::Scene& s = *ps.scene;
  const Graph g(m.params);
  InferenceResult r;
  const SpatialMemory mem = fuse(g, m.cfg.fusion, ps.tokens);
  const FeaturePyramid pyr = build_pyramid(g, mem);
  r.probes = run_decoder(g, m.cfg.instance, pyr, ps.cameras);
  r.instances = select_instances(r.probes.cls_logits.value(), r.probes.p.value(), m.cfg.geo.threshold, m.cfg.geo.cap);
  r.mask_h = pyr.mask_shape.h;
  r.mask_w = pyr.mask_shape.w;
  for (const auto& t : r.instances) {
    std::vector<std::vector<std::uint8_t>> per_view;
    for (std::size_t v = 0; v < s.views.size(); ++v) {
      const Tensor& logits = r.probes.mask_logits[v].value();
      std::vector<std::uint8_t> mk(logits.cols());
      for (std::size_t k = 0; k < mk.size(); ++k) mk[k] = logits.at(t.probe, k) > 0.0;
      per_view.push_back(std::move(mk));
    }
    r.masks.push_back(std::move(per_view));
  }

  const auto& cc = m.cfg.completion;
  for (std::size_t i = 0; i < r.instances.size() && int(r.completions.size()) < cc.max_instances; ++i) {
    const auto& vm = r.masks[i];
    const int obj = mask_object(s, vm, r.mask_w, r.mask_h);
    if (obj < 0) continue;
    std::vector<Vec3> observed;
    int view = 0;
    std::size_t most = 0;
    for (std::size_t v = 0; v < s.views.size(); ++v) {
      const std::size_t n = std::count(vm[v].begin(), vm[v].end(), 1);
      if (n > most) {
        most = n;
        view = int(v);
      }
      const auto pts = mask_cloud(s.views[v], vm[v], r.mask_w, r.mask_h);
      observed.insert(observed.end(), pts.begin(), pts.end());
    }
    const Tensor& surf = s.truth.instances.at(obj).surface;
    std::vector<Vec3> dense;
    for (std::size_t k = 0; k < surf.rows(); ++k) dense.emplace_back(surf.at(k, 0), surf.at(k, 1), surf.at(k, 2));
    // Quarter-resolution clouds are sparse, so the density radius is scaled by the mask stride.
    CompletionConfig sparse = cc;
    sparse.radius = cc.radius * scene::kMaskScale;
    auto comp = complete_instance(observed, dense, int(r.instances[i].probe), view, sparse);
    if (!comp.queries.empty()) r.completions.push_back(std::move(comp));
  }

  const CompletionBatch batch = flatten_completions(r.completions);
  r.completion_features = predict_completions(g, m.cfg, mem, batch);
  CompletionTokens ct{r.completion_features, batch.coords, batch.instance_ids};
  r.tokens = assemble(g, m.cfg.geo, r.instances, r.probes.c, ct, s.truth.p_ee);
  check_downstream(r.tokens, m.cfg.geo.dim);
  return r;
}

bool hidden_from_all_views(const scene::Scene& s, const Vec3& q, double tol) {
  for (const auto& view : s.views) {
    const auto pr = geom::project(q, view.camera);
    if (pr.z_c <= 0.0) continue;
    const auto& px = pr.pixel;
    if (px.x() < -0.5 || px.y() < -0.5 || px.x() > view.camera.width - 0.5 || px.y() > view.camera.height - 0.5) continue;
    const Vec3 o = view.camera.center();
    const Vec3 d = (q - o).normalized();
    const auto hit = scene::cast_ray(s.objects, o, d);
    if (hit.object != -2 && (hit.point - q).norm() <= tol) return false;
  }
  return true;
}

SceneMetrics evaluate_scene(const Model& m, const PreparedScene& ps, bool oracle, std::uint64_t mask_seed,
                            std::size_t scene_index) {
  const scene::Scene& s = *ps.scene;
  SceneMetrics r;
  r.targets = int(ps.targets.size());
  double iou_sum = 0;
  int iou_n = 0;
  auto iou = [](const Tensor& pred_logits, std::size_t row, const Tensor& gt, bool from_truth) {
    int inter = 0, uni = 0;
    for (std::size_t k = 0; k < gt.cols(); ++k) {
      const bool a = from_truth ? gt.at(0, k) > 0.5 : pred_logits.at(row, k) > 0.0;
      const bool b = gt.at(0, k) > 0.5;
      inter += a && b;
      uni += a || b;
    }
    return uni ? double(inter) / uni : 1.0;
  };
  if (oracle) {
    for (const auto& t : ps.targets)
      for (std::size_t v = 0; v < t.valid.size(); ++v)
        if (t.valid[v]) {
          iou_sum += iou(t.masks[v], 0, t.masks[v], true);
          ++iou_n;
        }
  } else {
    const auto f = forward_stage1(Graph(m.params), m.cfg, ps);
    const Tensor& P = f.probes.p.value();
    for (std::size_t k = 0; k < ps.targets.size(); ++k) {
      const auto& t = ps.targets[k];
      const std::size_t j = f.assignment.probe_of_target[k];
      for (int a = 0; a < 3; ++a) r.centroid_l1 += std::abs(P.at(j, a) - t.centroid[a]) / double(ps.targets.size());
      for (std::size_t v = 0; v < t.valid.size(); ++v)
        if (t.valid[v]) {
          iou_sum += iou(f.probes.mask_logits[v].value(), j, t.masks[v], false);
          ++iou_n;
        }
    }
  }
  r.mask_iou = iou_n ? iou_sum / iou_n : 1.0;

  int hits = 0;
  for (const auto& c : ps.completions)
    for (const auto& q : c.queries) {
      hits += hidden_from_all_views(s, q.coord);
      ++r.completion_queries;
    }
  r.hidden_hit_rate = r.completion_queries ? double(hits) / r.completion_queries : 0.0;

  const auto f2 = forward_stage2(Graph(m.params), m.params, m.cfg, ps, stage2_plan(m.cfg, ps, mask_seed, -1, scene_index));
  r.distill_cosine = f2.loss.cosine_similarity;
  return r;
}

}  // namespace vla3d::model
