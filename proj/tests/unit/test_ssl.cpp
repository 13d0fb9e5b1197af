#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "model_fixtures.hpp"
#include "oracles.hpp"
#include "vla3d/model/model.hpp"
#include "vla3d/nn/grad_check.hpp"

using namespace vla3d;
using namespace vla3d::model;
using geom::Vec3;

namespace {

PredictorConfig tiny_predictor() {
  PredictorConfig c;
  c.dim = 12;
  c.heads = 2;
  c.blocks = 1;
  c.ffn_ratio = 2;
  c.pos_freqs = 2;
  c.rope.head_dim = 6;
  return c;
}

PredictorInputs random_inputs(nn::Rng& rng, std::size_t nv, std::size_t nt, int dim, const Tensor* ctx = nullptr) {
  PredictorInputs in;
  in.context = ctx ? Var(*ctx) : Var(oracle::random(nv, dim, rng));
  in.context_coords = oracle::random(nv, 3, rng, -0.5, 0.5);
  in.target_coords = oracle::random(nt, 3, rng, -0.5, 0.5);
  for (std::size_t i = 0; i < nv; ++i) in.context_views.push_back(int(rng.index(2)));
  for (std::size_t i = 0; i < nt; ++i) in.target_views.push_back(int(rng.index(2)));
  return in;
}

// Rows with prescribed per-column sample std (unbiased): [-s, s] / sqrt(2) scaled up.
Tensor two_rows_with_std(double s0, double s1) {
  const double k = 1.0 / std::sqrt(2.0);
  return Tensor::matrix(2, 2, {s0 * k, s1 * k, -s0 * k, -s1 * k});
}

}  // namespace

// ---- masking ----------------------------------------------------------------

TEST(PlanMasks, HalfRatioMasksHalfOfEveryView) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const MaskPlan p = plan_masks(2, 8, 8, 0.5, nn::Rng(seed));
    ASSERT_EQ(p.masked.size(), 2u);
    for (const auto& v : p.masked) EXPECT_EQ(std::count(v.begin(), v.end(), 1), 32);
    EXPECT_EQ(p.visible.size() + p.masked_tokens.size(), 128u);
  }
}

TEST(PlanMasks, RatioWithinTwoPercentAndPartition) {
  nn::Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int gh = 4 + int(rng.index(9)), gw = 4 + int(rng.index(9)), V = 1 + int(rng.index(4));
    const double r = rng.uniform(0.05, 0.95);
    const MaskPlan p = plan_masks(V, gh, gw, r, rng.derive(std::uint64_t(trial)));
    for (const auto& v : p.masked) {
      const double frac = double(std::count(v.begin(), v.end(), 1)) / double(gh * gw);
      EXPECT_LE(std::abs(frac - r), 0.5 / (gh * gw) + 1e-12);
    }
    std::set<std::size_t> all(p.visible.begin(), p.visible.end());
    for (auto t : p.masked_tokens) EXPECT_TRUE(all.insert(t).second);
    EXPECT_EQ(all.size(), std::size_t(V * gh * gw));
  }
}

TEST(PlanMasks, ZeroRatioDeterminismAndValidation) {
  EXPECT_TRUE(plan_masks(2, 8, 8, 0.0, nn::Rng(1)).masked_tokens.empty());
  const auto a = plan_masks(3, 8, 8, 0.5, nn::Rng(9)), b = plan_masks(3, 8, 8, 0.5, nn::Rng(9));
  EXPECT_EQ(a.masked, b.masked);
  EXPECT_THROW(plan_masks(2, 8, 8, 1.0, nn::Rng(1)), std::invalid_argument);
  EXPECT_THROW(plan_masks(2, 8, 8, -0.1, nn::Rng(1)), std::invalid_argument);
}

TEST(PlanMasks, ViewsMaskDifferentRegions) {
  int differ = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto p = plan_masks(2, 8, 8, 0.5, nn::Rng(s));
    differ += p.masked[0] != p.masked[1];
  }
  EXPECT_GE(differ, 18);
}

TEST(PlanMasks, MasksAreBlocky) {
  // A masked cell almost always has a masked 4-neighbour; i.i.d. masking at
  // r = 0.25 leaves about a third of masked cells isolated.
  int isolated = 0, masked = 0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto p = plan_masks(1, 8, 8, 0.25, nn::Rng(s));
    const auto& m = p.masked[0];
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j) {
        if (!m[i * 8 + j]) continue;
        ++masked;
        const bool nb = (i > 0 && m[(i - 1) * 8 + j]) || (i < 7 && m[(i + 1) * 8 + j]) || (j > 0 && m[i * 8 + j - 1]) ||
                        (j < 7 && m[i * 8 + j + 1]);
        isolated += !nb;
      }
  }
  EXPECT_LT(double(isolated) / masked, 0.02);
}

// ---- completion coordinates ------------------------------------------------

TEST(FarthestPointSample, OneDimensionalExample) {
  std::vector<Vec3> pts{{0.0, 0, 0}, {0.2, 0, 0}, {0.9, 0, 0}, {1.0, 0, 0}};
  const auto idx = farthest_point_sample(pts, 0, 3);
  ASSERT_EQ(idx.size(), 3u);
  EXPECT_EQ(pts[idx[0]].x(), 0.0);
  EXPECT_EQ(pts[idx[1]].x(), 1.0);
  EXPECT_EQ(pts[idx[2]].x(), 0.2);
}

TEST(FarthestPointSample, MatchesOracleOnRandomLines) {
  nn::Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> xs;
    std::vector<Vec3> pts;
    const std::size_t n = 3 + rng.index(30);
    for (std::size_t i = 0; i < n; ++i) {
      xs.push_back(rng.uniform(-1, 1));
      pts.emplace_back(xs.back(), 0, 0);
    }
    const std::size_t k = 1 + rng.index(n);
    const auto idx = farthest_point_sample(pts, 0, k);
    const auto ref = oracle::fps_1d(xs, 0, k);
    ASSERT_EQ(idx.size(), ref.size());
    for (std::size_t i = 0; i < k; ++i) EXPECT_EQ(pts[idx[i]].x(), ref[i]);
  }
}

TEST(DensityDenoise, MatchesBruteForceNeighbourCounts) {
  nn::Rng rng(8);
  std::vector<Vec3> pts;
  for (int i = 0; i < 200; ++i) pts.emplace_back(rng.uniform(0, 0.3), rng.uniform(0, 0.3), rng.uniform(0, 0.3));
  pts.emplace_back(5, 5, 5);  // outlier
  const auto kept = density_denoise(pts, 0.05, 4);
  std::size_t expect = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    int n = 0;
    for (std::size_t j = 0; j < pts.size(); ++j) n += j != i && (pts[i] - pts[j]).norm() <= 0.05;
    expect += n >= 4;
  }
  EXPECT_EQ(kept.size(), expect);
  for (const auto& p : kept) EXPECT_LT(p.norm(), 1.0);
}

TEST(Completion, FullyObservedObjectIsLowNovelty) {
  scene::PrimitiveObject o{scene::PrimitiveKind::sphere, {0, 0, 0.1}, 0.0, {0.2, 0.2, 0.2}, 0, 0};
  const Tensor surf = scene::dense_surface(o, 1024, 1);
  std::vector<Vec3> dense;
  for (std::size_t i = 0; i < surf.rows(); ++i) dense.emplace_back(surf.at(i, 0), surf.at(i, 1), surf.at(i, 2));
  const auto c = complete_instance(dense, dense, 0, 0, {});
  EXPECT_EQ(c.queries.size(), 5u);
  EXPECT_TRUE(c.low_novelty);
  EXPECT_LT(c.novelty, 1e-12);
}

TEST(Completion, EmptyObservedCloudIsSkipped) {
  std::vector<Vec3> dense{{0, 0, 0}, {1, 0, 0}};
  const std::vector<Vec3> lonely{{0, 0, 0}};
  EXPECT_TRUE(complete_instance({}, dense, 0, 0, {}).queries.empty());
  EXPECT_TRUE(complete_instance(lonely, dense, 0, 0, {}).queries.empty());
}

TEST(Completion, HalfObservedSphereGetsBackHemisphereQueries) {
  // Observe only the +x hemisphere of a sphere; every query should land on -x.
  scene::PrimitiveObject o{scene::PrimitiveKind::sphere, {0, 0, 0.15}, 0.0, {0.3, 0.3, 0.3}, 0, 0};
  const Tensor surf = scene::dense_surface(o, 1024, 2);
  std::vector<Vec3> dense, seen;
  for (std::size_t i = 0; i < surf.rows(); ++i) {
    dense.emplace_back(surf.at(i, 0), surf.at(i, 1), surf.at(i, 2));
    if (dense.back().x() > 0) seen.push_back(dense.back());
  }
  const auto c = complete_instance(seen, dense, 0, 0, {});
  ASSERT_EQ(c.queries.size(), 5u);
  for (const auto& q : c.queries) EXPECT_LT(q.coord.x(), 0.0);
  EXPECT_FALSE(c.low_novelty);
}

TEST(Completion, ScenesYieldFiveQueriesPerInstanceAtMostSix) {
  scene::SceneSpec spec;
  spec.num_objects = 6;
  spec.num_views = 3;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto s = scene::generate_scene(seed, spec);
    const auto comps = generate_completion_coords(s);
    EXPECT_LE(comps.size(), 6u);
    EXPECT_GE(comps.size(), 1u);
    std::set<int> ids;
    for (const auto& c : comps) {
      EXPECT_EQ(c.queries.size(), 5u);
      EXPECT_TRUE(ids.insert(c.instance_id).second);
      for (const auto& q : c.queries) {
        EXPECT_EQ(q.instance_id, c.instance_id);
        EXPECT_TRUE(q.coord.allFinite());
        EXPECT_GE(q.view, 0);
        EXPECT_LT(q.view, 3);
      }
    }
  }
}

// ---- predictor ---------------------------------------------------------------

TEST(Predictor, ZeroInitialisedOutputsPassTheInjectionsThrough) {
  const auto cfg = tiny_predictor();
  ParamStore ps(4);
  register_predictor(ps, cfg);
  nn::Rng rng(1);
  const auto in = random_inputs(rng, 7, 5, cfg.dim);
  const Tensor z = predict(Graph(ps), cfg, in).value();
  const Tensor pos = oracle::matmul(fourier_position(in.target_coords, cfg.pos_freqs), ps.value("ssl.pos.w"));
  for (std::size_t i = 0; i < 5; ++i)
    for (int d = 0; d < cfg.dim; ++d) {
      const double want = ps.value("ssl.start").at(0, d) + pos.at(i, d) + ps.value("ssl.pos.b").at(0, d) +
                          ps.value("ssl.view").at(in.target_views[i], d);
      EXPECT_NEAR(z.at(i, d), want, 1e-12);
    }
}

TEST(Predictor, TargetPermutationEquivariance) {
  auto cfg = tiny_predictor();
  cfg.zero_init_out = false;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ParamStore ps(seed);
    register_predictor(ps, cfg);
    nn::Rng rng(seed, 2);
    auto in = random_inputs(rng, 6, 4, cfg.dim);
    const Tensor a = predict(Graph(ps), cfg, in).value();
    for (int k = 0; k < 3; ++k) std::swap(in.target_coords.at(0, k), in.target_coords.at(2, k));
    std::swap(in.target_views[0], in.target_views[2]);
    const Tensor b = predict(Graph(ps), cfg, in).value();
    for (int d = 0; d < cfg.dim; ++d) {
      EXPECT_NEAR(a.at(0, d), b.at(2, d), 1e-10);
      EXPECT_NEAR(a.at(2, d), b.at(0, d), 1e-10);
      EXPECT_NEAR(a.at(1, d), b.at(1, d), 1e-10);
    }
  }
}

TEST(Predictor, LogitsTranslationInvariantWithoutAbsolutePosition) {
  auto cfg = tiny_predictor();
  cfg.use_pos = false;
  cfg.zero_init_out = false;
  nn::Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    ParamStore ps(trial);
    register_predictor(ps, cfg);
    auto in = random_inputs(rng, 6, 3, cfg.dim);
    PredictorTrace ta, tb;
    predict(Graph(ps), cfg, in, "ssl", &ta);
    const Vec3 shift(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    for (Tensor* t : {&in.context_coords, &in.target_coords})
      for (std::size_t i = 0; i < t->rows(); ++i)
        for (int k = 0; k < 3; ++k) t->at(i, k) += shift[k];
    predict(Graph(ps), cfg, in, "ssl", &tb);
    const Tensor& a = ta.cross_logits[0];
    const Tensor& b = tb.cross_logits[0];
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
  }
}

TEST(Predictor, OutputCountAndErrors) {
  const auto cfg = tiny_predictor();
  ParamStore ps(2);
  register_predictor(ps, cfg);
  nn::Rng rng(3);
  const auto in = random_inputs(rng, 5, 9, cfg.dim);
  EXPECT_EQ(predict(Graph(ps), cfg, in).rows(), 9u);
  auto empty = random_inputs(rng, 0, 3, cfg.dim);
  EXPECT_THROW(predict(Graph(ps), cfg, empty), std::invalid_argument);
  auto bad_view = in;
  bad_view.target_views[0] = cfg.max_views;
  EXPECT_THROW(predict(Graph(ps), cfg, bad_view), std::out_of_range);
}

// ---- distillation ------------------------------------------------------------

TEST(DistillLoss, PerfectPredictionIsZero) {
  nn::Rng rng(1);
  const Tensor y = oracle::random(6, 4, rng);
  const auto r = distill_loss(Var(y), y, {});
  EXPECT_EQ(r.recon, 0.0);
  EXPECT_NEAR(r.cos, 0.0, 1e-12);
  EXPECT_EQ(r.var, 0.0);
}

TEST(DistillLoss, AntipodalCosineIsTwo) {
  const Tensor y = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const Tensor z = Tensor::matrix(2, 2, {-1, 0, 0, -1});
  EXPECT_NEAR(distill_loss(Var(z), y, {}).cos, 2.0, 1e-9);
}

TEST(DistillLoss, VarianceTermArithmetic) {
  const auto r = distill_loss(Var(two_rows_with_std(0.8, 0.7)), two_rows_with_std(1.0, 0.5), {});
  EXPECT_NEAR(r.var, 0.1, 1e-7);
}

TEST(DistillLoss, VarianceZeroWhenStudentSpreadsAtLeastAsMuch) {
  nn::Rng rng(31);
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 2 + rng.index(8), d = 1 + rng.index(6);
    const Tensor y = oracle::random(n, d, rng);
    Tensor z = y;
    const double k = rng.uniform(1.0, 3.0);
    for (auto& v : z.storage()) v = v * k + 0.3;
    EXPECT_EQ(distill_loss(Var(z), y, {}).var, 0.0);
  }
}

TEST(DistillLoss, ConstantStudentAgainstVaryingTeacherIsPenalised) {
  nn::Rng rng(32);
  const Tensor y = oracle::random(10, 5, rng);
  const Tensor z({10, 5}, 0.4);
  EXPECT_GT(distill_loss(Var(z), y, {}).var, 0.1);
}

TEST(DistillLoss, DegenerateTokenCounts) {
  const auto none = distill_loss(Var(Tensor({0, 3})), Tensor({0, 3}), {});
  EXPECT_EQ(none.total, 0.0);
  const auto one = distill_loss(Var(Tensor::matrix(1, 2, {1, 2})), Tensor::matrix(1, 2, {2, 1}), {});
  EXPECT_EQ(one.var, 0.0);
  EXPECT_GT(one.recon, 0.0);
}

TEST(DistillLoss, GradientsMatchFiniteDifferences) {
  const auto cfg = tiny_predictor();
  double worst = 0.0;
  const DistillWeights full{};
  const DistillWeights only[] = {{1, 0, 0, 1}, {0, 1, 0, 1}, {0, 0, 1, 1}};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    ParamStore ps(seed);
    auto pc = cfg;
    pc.zero_init_out = false;
    register_predictor(ps, pc);
    nn::Rng rng(seed, 77);
    const auto in = random_inputs(rng, 5, 4, cfg.dim);
    const Tensor y = oracle::random(4, cfg.dim, rng);
    const DistillWeights& w = seed < 47 ? full : only[seed - 47];
    nn::GradCheckOptions opt;
    opt.max_entries_per_param = 6;
    opt.seed = seed;
    const auto rep = nn::grad_check(
        [&](const Graph& g) { return distill_loss(predict(g, pc, in), y, w).total_var; }, ps, opt);
    worst = std::max(worst, rep.max_rel_error);
  }
  EXPECT_LE(worst, 1e-4);
}

// ---- EMA ---------------------------------------------------------------------

TEST(Ema, MomentumLimitsAndBlend) {
  ParamStore s(0), t(0);
  s.add("w", Tensor({1, 2}, 0.0));
  t.add("w", Tensor({1, 2}, 1.0));
  TeacherState keep{t, 1.0};
  ema_update(keep, s);
  EXPECT_EQ(keep.params.value("w").at(0, 0), 1.0);
  TeacherState copy{t, 0.0};
  ema_update(copy, s);
  EXPECT_EQ(copy.params.value("w").at(0, 1), 0.0);
  TeacherState blend{t, 0.999};
  ema_update(blend, s);
  EXPECT_NEAR(blend.params.value("w").at(0, 0), 0.999, 1e-15);
}

TEST(Ema, FrozenParametersStayBitEqualAndShapesAreChecked) {
  ParamStore s(0), t(0);
  s.add("a", Tensor({1, 1}, 0.3), false);
  t.add("a", Tensor({1, 1}, 0.7));
  TeacherState ts{t, 0.5};
  ema_update(ts, s);
  EXPECT_EQ(ts.params.value("a").at(0, 0), 0.7);
  ParamStore bad(0);
  bad.add("a", Tensor({2, 1}, 0.0));
  EXPECT_THROW(ema_update(ts, bad), shape_error);
  ParamStore other(0);
  other.add("b", Tensor({1, 1}, 0.0));
  EXPECT_THROW(ema_update(ts, other), shape_error);
}

// ---- stage 2 -------------------------------------------------------------------

TEST(Stage2, FrozenStageOneParametersReceiveNoGradient) {
  const auto cfg = fixture::small_model_config();
  Model m(cfg, 1);
  freeze_stage1(m.params);
  scene::SceneSpec spec;
  const auto s = scene::generate_scene(3, spec);
  const auto ps = prepare_scene(s, cfg);
  const auto teacher = make_teacher(m);
  nn::GradTape tape;
  const auto f = forward_stage2(Graph(m.params, &tape), teacher.params, cfg, ps, stage2_plan(cfg, ps, 0, 0, 0));
  tape.backward(f.loss.total_var);
  double frozen_norm = 0.0;
  std::size_t ssl_entries = 0;
  for (const auto& [name, g] : tape.grads()) {
    if (name.starts_with("fusion.") || name.starts_with("inst.")) {
      for (double v : g.storage()) frozen_norm += v * v;
    }
    ssl_entries += name.starts_with("ssl.");
  }
  EXPECT_EQ(frozen_norm, 0.0);
  EXPECT_GT(ssl_entries, 0u);
  EXPECT_EQ(f.prediction.rows(), f.plan.masked_tokens.size() + 5 * ps.completions.size());
}

TEST(Stage2, RefusesTrainableStageOneAndUpdatesTeacherOnlyByEma) {
  const auto cfg = fixture::small_model_config();
  Model m(cfg, 2);
  scene::SceneSpec spec;
  std::vector<scene::Scene> scenes{scene::generate_scene(0, spec), scene::generate_scene(1, spec)};
  std::vector<PreparedScene> ps;
  for (const auto& s : scenes) ps.push_back(prepare_scene(s, cfg));
  auto teacher = make_teacher(m);
  TrainConfig tc;
  tc.steps = 3;
  tc.batch = 2;
  EXPECT_THROW(train_stage2(m, teacher, ps, tc, 0), std::logic_error);

  freeze_stage1(m.params);
  const ParamStore before = m.params;
  const std::string probe = "ssl.block0.xq.w";
  const double t0 = teacher.params.value(probe).at(0, 0);
  train_stage2(m, teacher, ps, tc, 0, [&](const StepRecord&) {});
  for (const auto& [name, p] : m.params.all()) {
    if (name.starts_with("fusion.") || name.starts_with("inst.")) {
      EXPECT_EQ(p.value, before.value(name)) << name;
      EXPECT_EQ(teacher.params.value(name), before.value(name)) << name;
    }
  }
  EXPECT_NE(m.params.value(probe).at(0, 0), before.value(probe).at(0, 0));
  EXPECT_NE(teacher.params.value(probe).at(0, 0), t0);
}
