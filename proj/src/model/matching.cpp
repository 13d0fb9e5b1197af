#include "vla3d/model/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vla3d::model {
namespace {

void check_nonneg(std::initializer_list<double> v, const char* what) {
  for (double x : v)
    if (!(x >= 0.0)) throw std::invalid_argument(std::string(what) + " weights must be nonnegative");
}

scene::Box2D row_box(const Tensor& t, std::size_t r) { return {t.at(r, 0), t.at(r, 1), t.at(r, 2), t.at(r, 3)}; }

}  // namespace

void MatchCostConfig::validate() const { check_nonneg({cls, l1, giou, l3d}, "match cost"); }

void LossWeights::validate() const {
  check_nonneg({cls, box, giou, mask, dice, l3d, focal_gamma, dice_smooth}, "loss");
  if (!(focal_alpha >= 0.0 && focal_alpha <= 1.0)) throw std::invalid_argument("focal alpha must be in [0,1]");
}

int Target::num_valid() const { return int(std::count(valid.begin(), valid.end(), 1)); }

std::vector<Target> build_targets(const scene::Scene& s) {
  std::vector<Target> out;
  for (std::size_t k = 0; k < s.truth.instances.size(); ++k) {
    const auto& it = s.truth.instances[k];
    if (!it.any_valid()) continue;
    Target t;
    t.instance = int(k);
    t.centroid = it.centroid;
    t.valid = it.valid;
    t.boxes = it.boxes;
    for (const auto& view : s.views) {
      const auto q = scene::quarter_mask(view, int(k));
      t.masks.emplace_back(nn::Shape{1, q.size()}, std::vector<double>(q.begin(), q.end()));
    }
    out.push_back(std::move(t));
  }
  return out;
}

double box_giou(const scene::Box2D& a, const scene::Box2D& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  const double area_c = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) * (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
  return inter / std::max(uni, 1e-12) - (area_c - uni) / std::max(area_c, 1e-12);
}

double pairwise_cost(double p_class, const scene::Box2D& pb, const geom::Vec3& pp, const Target& t, int view,
                     const MatchCostConfig& cfg) {
  const auto& tb = t.boxes.at(view);
  const double l1 = std::abs(pb.x1 - tb.x1) + std::abs(pb.y1 - tb.y1) + std::abs(pb.x2 - tb.x2) + std::abs(pb.y2 - tb.y2);
  const double d3 = (pp - t.centroid).cwiseAbs().sum();
  return -cfg.cls * p_class + cfg.l1 * l1 + cfg.giou * (1.0 - box_giou(pb, tb)) + cfg.l3d * d3;
}

Tensor global_cost(const ProbeOutputs& out, const std::vector<Target>& targets, const MatchCostConfig& cfg) {
  const std::size_t Nq = out.cls_logits.rows();
  Tensor C({Nq, targets.size()});
  const Tensor& P = out.p.value();
  for (std::size_t j = 0; j < Nq; ++j) {
    const double pc = 1.0 / (1.0 + std::exp(-out.cls_logits.value()[j]));
    const geom::Vec3 pj(P.at(j, 0), P.at(j, 1), P.at(j, 2));
    for (std::size_t k = 0; k < targets.size(); ++k) {
      double sum = 0.0;
      int n = 0;
      for (std::size_t v = 0; v < out.boxes.size(); ++v) {
        if (!targets[k].valid.at(v)) continue;
        sum += pairwise_cost(pc, row_box(out.boxes[v].value(), j), pj, targets[k], int(v), cfg);
        ++n;
      }
      C.at(j, k) = sum / std::max(n, 1);
    }
  }
  return C;
}

Assignment hungarian(const Tensor& cost) {
  const std::size_t n = cost.rows(), m = cost.cols();
  if (m > n) throw std::invalid_argument("hungarian: more targets (" + std::to_string(m) + ") than probes (" +
                                         std::to_string(n) + ")");
  if (!cost.all_finite()) throw numeric_error("hungarian: cost matrix has non-finite entries");
  Assignment a;
  a.target_of_probe.assign(n, -1);
  a.probe_of_target.assign(m, -1);
  if (m == 0) return a;
  // Shortest augmenting paths with potentials; targets are the "rows" being
  // inserted, probes the columns. 1-based with a virtual column 0.
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(m + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> owner(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost.at(j - 1, i0 - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0);
  }
  for (std::size_t j = 1; j <= n; ++j)
    if (owner[j]) {
      a.target_of_probe[j - 1] = int(owner[j] - 1);
      a.probe_of_target[owner[j] - 1] = int(j - 1);
    }
  for (std::size_t k = 0; k < m; ++k) a.total += cost.at(a.probe_of_target[k], k);
  return a;
}

Var focal_loss(const Var& logits, const std::vector<int>& labels, double gamma, double alpha) {
  if (logits.cols() != 1 || logits.rows() != labels.size()) throw shape_error("focal_loss: logits must be [n,1] matching labels");
  // z_t = z for positives, -z for negatives; p_t = sigmoid(z_t).
  Tensor sign({labels.size(), 1}), at({labels.size(), 1});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw std::invalid_argument("focal_loss: labels must be 0 or 1");
    sign[i] = labels[i] ? 1.0 : -1.0;
    at[i] = labels[i] ? alpha : 1.0 - alpha;
  }
  const Var zt = nn::mul(logits, Var(sign));
  const Var log_pt = nn::neg(nn::softplus(nn::neg(zt)));
  const Var one_minus_pt = nn::sigmoid(nn::neg(zt));
  const Var mod = gamma == 0.0 ? Var(Tensor(sign.shape(), 1.0)) : nn::pow_const(one_minus_pt, gamma);
  return nn::neg(nn::mean(nn::mul(nn::mul(mod, log_pt), Var(at))));
}

Var giou_loss(const Var& a, const Var& b) {
  if (a.cols() != 4 || !a.value().same_shape(b.value())) throw shape_error("giou_loss: expected matching [n,4] boxes");
  auto col = [](const Var& x, std::size_t c) { return nn::slice_cols(x, c, 1); };
  const Var ax1 = col(a, 0), ay1 = col(a, 1), ax2 = col(a, 2), ay2 = col(a, 3);
  const Var bx1 = col(b, 0), by1 = col(b, 1), bx2 = col(b, 2), by2 = col(b, 3);
  const Var iw = nn::relu(nn::sub(nn::minimum(ax2, bx2), nn::maximum(ax1, bx1)));
  const Var ih = nn::relu(nn::sub(nn::minimum(ay2, by2), nn::maximum(ay1, by1)));
  const Var inter = nn::mul(iw, ih);
  const Var area_a = nn::mul(nn::sub(ax2, ax1), nn::sub(ay2, ay1));
  const Var area_b = nn::mul(nn::sub(bx2, bx1), nn::sub(by2, by1));
  const Var uni = nn::sub(nn::add(area_a, area_b), inter);
  const Var area_c = nn::mul(nn::sub(nn::maximum(ax2, bx2), nn::minimum(ax1, bx1)),
                             nn::sub(nn::maximum(ay2, by2), nn::minimum(ay1, by1)));
  const Var iou = nn::div(inter, nn::clamp_min(uni, 1e-12));
  const Var gap = nn::div(nn::sub(area_c, uni), nn::clamp_min(area_c, 1e-12));
  return nn::add_const(nn::neg(nn::sub(iou, gap)), 1.0);
}

MaskLosses mask_losses(const Var& logits, const Tensor& target, double smooth) {
  if (!logits.value().same_shape(target)) {
    throw shape_error("mask_losses: logits " + nn::shape_str(logits.shape()) + " vs target " + nn::shape_str(target.shape()));
  }
  MaskLosses r;
  // BCE with logits: softplus(z) - q z
  r.ce = nn::mean(nn::sub(nn::softplus(logits), nn::mul(logits, Var(target))));
  const Var p = nn::sigmoid(logits);
  const Var num = nn::add_const(nn::scale(nn::sum_rows(nn::mul(p, Var(target))), 2.0), smooth);
  const Var den = nn::add_const(nn::add(nn::sum_rows(p), nn::sum_rows(Var(target))), smooth);
  r.dice = nn::add_const(nn::neg(nn::mean(nn::div(num, den))), 1.0);
  return r;
}

LossReport joint_loss(const ProbeOutputs& out, const std::vector<Target>& targets, const Assignment& assignment,
                      const LossWeights& w) {
  const std::size_t Nq = out.cls_logits.rows();
  if (assignment.target_of_probe.size() != Nq) throw std::invalid_argument("joint_loss: assignment size mismatch");
  LossReport r;
  r.weights = w;
  std::vector<int> labels(Nq, 0);
  for (std::size_t j = 0; j < Nq; ++j) labels[j] = assignment.target_of_probe[j] >= 0;
  const Var l_cls = focal_loss(out.cls_logits, labels, w.focal_gamma, w.focal_alpha);

  std::vector<Var> pred_boxes, pred_masks;
  std::vector<double> tgt_boxes, tgt_masks;
  std::size_t mask_px = 0;
  std::vector<std::size_t> match_rows;
  std::vector<double> match_cent;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const int j = assignment.probe_of_target.at(k);
    if (j < 0) continue;
    const Target& t = targets[k];
    match_rows.push_back(std::size_t(j));
    for (int a = 0; a < 3; ++a) match_cent.push_back(t.centroid[a]);
    for (std::size_t v = 0; v < out.boxes.size(); ++v) {
      if (!t.valid.at(v)) continue;
      pred_boxes.push_back(nn::slice_rows(out.boxes[v], j, 1));
      tgt_boxes.insert(tgt_boxes.end(), {t.boxes[v].x1, t.boxes[v].y1, t.boxes[v].x2, t.boxes[v].y2});
      pred_masks.push_back(nn::slice_rows(out.mask_logits[v], j, 1));
      mask_px = t.masks[v].cols();
      tgt_masks.insert(tgt_masks.end(), t.masks[v].storage().begin(), t.masks[v].storage().end());
    }
  }
  r.matched_pairs = int(match_rows.size());
  r.matched_views = int(pred_boxes.size());
  const Var zero(Tensor::scalar(0.0));
  Var l1 = zero, lg = zero, lce = zero, ldice = zero, l3 = zero;
  if (!pred_boxes.empty()) {
    const std::size_t P = pred_boxes.size();
    const Var pb = nn::concat_rows(pred_boxes);
    const Tensor tb({P, 4}, tgt_boxes);
    l1 = nn::scale(nn::sum(nn::abs(nn::sub(pb, Var(tb)))), 1.0 / double(P));
    lg = nn::mean(giou_loss(pb, Var(tb)));
    const auto ml = mask_losses(nn::concat_rows(pred_masks), Tensor({P, mask_px}, tgt_masks), w.dice_smooth);
    lce = ml.ce;
    ldice = ml.dice;
  }
  if (!match_rows.empty()) {
    const Var pm = nn::gather_rows(out.p, match_rows);
    l3 = nn::scale(nn::sum(nn::abs(nn::sub(pm, Var(Tensor({match_rows.size(), 3}, match_cent))))),
                   1.0 / double(match_rows.size()));
  }
  r.cls = l_cls.value().item();
  r.l1 = l1.value().item();
  r.giou = lg.value().item();
  r.mask_ce = lce.value().item();
  r.dice = ldice.value().item();
  r.l3d = l3.value().item();
  r.total_var = nn::add(
      nn::add(nn::add(nn::scale(l_cls, w.cls), nn::scale(l1, w.box)), nn::add(nn::scale(lg, w.giou), nn::scale(lce, w.mask))),
      nn::add(nn::scale(ldice, w.dice), nn::scale(l3, w.l3d)));
  r.total = r.total_var.value().item();
  return r;
}

}  // namespace vla3d::model
