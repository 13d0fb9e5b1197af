#include "vla3d/model/model.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace vla3d::model {

void ModelConfig::validate() const {
  fusion.validate();
  instance.validate();
  match.validate();
  loss.validate();
  ssl.validate();
  distill.validate();
  completion.validate();
  geo.validate();
  if (geo.dim != fusion.dim) throw std::invalid_argument("geometry and fusion dims differ");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw std::invalid_argument("mask ratio must be in (0, 1), got " + std::to_string(mask_ratio));
  if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) throw std::invalid_argument("EMA momentum must be in [0, 1]");
  if (ssl.dim != fusion.dim) throw std::invalid_argument("predictor and fusion dims differ");
  if (fusion.dim != instance.dim) throw std::invalid_argument("fusion and instance dims differ");
}

Model::Model(const ModelConfig& c, std::uint64_t seed) : cfg(c), params(seed) {
  cfg.validate();
  register_fusion(params, cfg.fusion);
  register_instance(params, cfg.instance);
  register_predictor(params, cfg.ssl);
  register_geometry(params, cfg.geo);
}

PreparedScene prepare_scene(const scene::Scene& s, const ModelConfig& cfg) {
  PreparedScene p;
  p.scene = &s;
  p.tokens = tokenize(s, cfg.fusion.patch);
  p.targets = build_targets(s);
  for (const auto& v : s.views) p.cameras.push_back(v.camera);
  if (int(s.views.size()) > cfg.ssl.max_views) throw std::invalid_argument("scene has more views than the predictor supports");
  p.completions = generate_completion_coords(s, cfg.completion);
  const int mh = s.height() / scene::kMaskScale, mw = s.width() / scene::kMaskScale;
  if (mh != 2 * p.tokens.grid_h || mw != 2 * p.tokens.grid_w) {
    throw std::invalid_argument("mask resolution must be twice the token grid (patch = 2 * mask scale)");
  }
  return p;
}

Stage1Forward forward_stage1(const Graph& g, const ModelConfig& cfg, const PreparedScene& ps) {
  Stage1Forward f;
  f.memory = fuse(g, cfg.fusion, ps.tokens);
  const FeaturePyramid pyr = build_pyramid(g, f.memory);
  f.probes = run_decoder(g, cfg.instance, pyr, ps.cameras);
  f.assignment = hungarian(global_cost(f.probes, ps.targets, cfg.match));
  f.loss = joint_loss(f.probes, ps.targets, f.assignment, cfg.loss);
  return f;
}

TrainConfig TrainConfig::full_scale() {
  TrainConfig c;
  c.steps = 5000;
  c.batch = 64;
  c.lr = 3e-6;
  c.warmup = 1200;
  c.final_lr = 1e-8;
  c.schedule = LrSchedule::warmup_cosine;
  return c;
}

TrainConfig TrainConfig::stage2() {
  TrainConfig c;
  c.lr = 3e-3;
  return c;
}

double TrainConfig::lr_at(int step) const {
  if (schedule == LrSchedule::constant) return lr;
  return nn::warmup_cosine_lr(step, warmup, steps, lr, final_lr);
}

void TrainConfig::validate() const {
  if (steps < 0) throw std::invalid_argument("steps must be >= 0");
  if (batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (!(lr > 0.0) || !(final_lr >= 0.0)) throw std::invalid_argument("learning rates must be positive");
  if (warmup < 0) throw std::invalid_argument("warmup must be >= 0");
  if (!(clip >= 0.0) || !(weight_decay >= 0.0)) throw std::invalid_argument("clip and weight decay must be >= 0");
  if (jobs < 1) throw std::invalid_argument("jobs must be >= 1");
}

std::vector<StepRecord> train_loop(ParamStore& params, std::size_t num_scenes, const TrainConfig& cfg,
                                   const SceneLoss& loss, const StepCallback& cb) {
  cfg.validate();
  if (num_scenes == 0) throw std::invalid_argument("training needs at least one scene");
  nn::Adam adam({.weight_decay = cfg.weight_decay});
  std::vector<StepRecord> log;
  const std::size_t B = std::size_t(cfg.batch);
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<nn::GradMap> grads(B);
    std::vector<std::vector<double>> terms(B);
    std::vector<double> totals(B);
    std::vector<std::exception_ptr> errors(B);
    auto work = [&](std::size_t i) {
      try {
        nn::GradTape tape;
        const Graph g(params, &tape);
        const Var l = loss(g, step, (std::size_t(step) * B + i) % num_scenes, terms[i]);
        totals[i] = l.value().item();
        tape.backward(l);
        grads[i] = std::move(tape.grads());
      } catch (...) {
        errors[i] = std::current_exception();
      }
    };
    const std::size_t jobs = std::min<std::size_t>(cfg.jobs, B);
    if (jobs <= 1) {
      for (std::size_t i = 0; i < B; ++i) work(i);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t t = 0; t < jobs; ++t)
        pool.emplace_back([&, t] {
          for (std::size_t i = t; i < B; i += jobs) work(i);
        });
      for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    for (double t : totals)
      if (!std::isfinite(t)) throw numeric_error("loss is not finite at step " + std::to_string(step));

    nn::GradMap sum = std::move(grads[0]);
    for (std::size_t i = 1; i < B; ++i)
      for (auto& [name, gt] : grads[i]) {
        auto [it, fresh] = sum.try_emplace(name, gt);
        if (!fresh)
          for (std::size_t k = 0; k < gt.size(); ++k) it->second[k] += gt[k];
      }
    for (auto& [_, gt] : sum)
      for (double& v : gt.storage()) v /= double(B);

    StepRecord rec;
    rec.step = step;
    rec.lr = cfg.lr_at(step);
    rec.grad_norm = nn::clip_global_norm(sum, cfg.clip);
    if (!std::isfinite(rec.grad_norm)) throw numeric_error("gradient is not finite at step " + std::to_string(step));
    adam.step(params, sum, rec.lr);
    rec.terms.assign(terms[0].size(), 0.0);
    for (std::size_t i = 0; i < B; ++i) {
      rec.total += totals[i] / double(B);
      for (std::size_t k = 0; k < rec.terms.size() && k < terms[i].size(); ++k) rec.terms[k] += terms[i][k] / double(B);
    }
    if (cb) cb(rec);
    log.push_back(std::move(rec));
  }
  return log;
}

std::vector<StepRecord> train_stage1(Model& m, const std::vector<PreparedScene>& scenes, const TrainConfig& cfg,
                                     const StepCallback& cb) {
  return train_loop(
      m.params, scenes.size(), cfg,
      [&](const Graph& g, int, std::size_t i, std::vector<double>& terms) {
        const auto f = forward_stage1(g, m.cfg, scenes[i]);
        terms = {f.loss.cls, f.loss.l1, f.loss.giou, f.loss.mask_ce, f.loss.dice, f.loss.l3d};
        return f.loss.total_var;
      },
      cb);
}

Stage1Metrics evaluate_stage1(const Model& m, const std::vector<PreparedScene>& scenes) {
  Stage1Metrics r;
  double cent = 0, best = 0;
  for (const auto& ps : scenes) {
    const auto f = forward_stage1(Graph(m.params), m.cfg, ps);
    r.loss += f.loss.total / double(scenes.size());
    const Tensor& P = f.probes.p.value();
    for (std::size_t k = 0; k < ps.targets.size(); ++k) {
      const auto& c = ps.targets[k].centroid;
      auto l1 = [&](std::size_t j) {
        return std::abs(P.at(j, 0) - c.x()) + std::abs(P.at(j, 1) - c.y()) + std::abs(P.at(j, 2) - c.z());
      };
      cent += l1(f.assignment.probe_of_target[k]);
      double b = 1e300;
      for (std::size_t j = 0; j < P.rows(); ++j) b = std::min(b, l1(j));
      best += b;
      ++r.targets;
    }
  }
  if (r.targets) {
    r.centroid_l1 = cent / r.targets;
    r.best_centroid_l1 = best / r.targets;
  }
  return r;
}

void freeze_stage1(ParamStore& params) {
  params.set_trainable("fusion.", false);
  params.set_trainable("inst.", false);
}

CompletionBatch flatten_completions(const std::vector<InstanceCompletion>& c) {
  CompletionBatch b;
  std::size_t n = 0;
  for (const auto& ic : c) n += ic.queries.size();
  b.coords = Tensor({n, 3});
  std::size_t r = 0;
  for (const auto& ic : c)
    for (const auto& q : ic.queries) {
      for (int k = 0; k < 3; ++k) b.coords.at(r, k) = q.coord[k];
      b.views.push_back(q.view);
      b.instance_ids.push_back(q.instance_id);
      ++r;
    }
  return b;
}

namespace {

Tensor gather(const Tensor& t, const std::vector<std::size_t>& idx) {
  Tensor out({idx.size(), t.cols()});
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(&t.at(idx[i], 0), t.cols(), &out.at(i, 0));
  return out;
}

Tensor stack_rows(const Tensor& a, const Tensor& b) {
  Tensor out({a.rows() + b.rows(), a.cols()});
  std::copy(a.storage().begin(), a.storage().end(), out.storage().begin());
  std::copy(b.storage().begin(), b.storage().end(), out.storage().begin() + a.size());
  return out;
}

}  // namespace

Stage2Forward forward_stage2(const Graph& g, const ParamStore& teacher, const ModelConfig& cfg, const PreparedScene& ps,
                             const MaskPlan& plan) {
  Stage2Forward f;
  f.plan = plan;
  const TokenInputs vis = ps.tokens.subset(plan.visible);
  const SpatialMemory ctx = fuse(g, cfg.fusion, vis);

  const SpatialMemory full = fuse(Graph(teacher), cfg.fusion, ps.tokens);
  f.teacher = gather(full.tokens.value(), plan.masked_tokens);

  const CompletionBatch comp = flatten_completions(ps.completions);
  PredictorInputs in;
  in.context = ctx.tokens;
  in.context_coords = ctx.coords;
  in.context_views = ctx.view_ids;
  in.target_coords = stack_rows(gather(ps.tokens.coords, plan.masked_tokens), comp.coords);
  for (auto t : plan.masked_tokens) in.target_views.push_back(ps.tokens.view_ids[t]);
  in.target_views.insert(in.target_views.end(), comp.views.begin(), comp.views.end());
  f.prediction = predict(g, cfg.ssl, in);
  const std::size_t nm = plan.masked_tokens.size();
  const Var zmask = nm ? nn::slice_rows(f.prediction, 0, nm) : Var(Tensor({0, std::size_t(cfg.ssl.dim)}));
  f.loss = distill_loss(zmask, f.teacher, cfg.distill);
  return f;
}

Var predict_completions(const Graph& g, const ModelConfig& cfg, const SpatialMemory& mem, const CompletionBatch& comp) {
  PredictorInputs in;
  in.context = mem.tokens;
  in.context_coords = mem.coords;
  in.context_views = mem.view_ids;
  in.target_coords = comp.coords;
  in.target_views = comp.views;
  return predict(g, cfg.ssl, in);
}

TeacherState make_teacher(const Model& m) { return TeacherState{m.params, m.cfg.ema_momentum}; }

MaskPlan stage2_plan(const ModelConfig& cfg, const PreparedScene& ps, std::uint64_t seed, int step,
                     std::size_t scene_index) {
  const nn::Rng rng = nn::Rng(seed).derive("mask").derive(std::uint64_t(step)).derive(std::uint64_t(scene_index));
  return plan_masks(ps.tokens.views, ps.tokens.grid_h, ps.tokens.grid_w, cfg.mask_ratio, rng);
}

SceneSource generated_scenes(const scene::SceneSpec& spec, std::uint64_t base_seed, const ModelConfig& cfg) {
  return [spec, base_seed, cfg](std::size_t i) {
    struct Owned {
      scene::Scene scene;
      PreparedScene prepared;
    };
    auto o = std::make_shared<Owned>();
    o->scene = scene::generate_scene(base_seed + i, spec);
    o->prepared = prepare_scene(o->scene, cfg);
    return std::shared_ptr<const PreparedScene>(o, &o->prepared);
  };
}

std::vector<StepRecord> train_stage2(Model& m, TeacherState& teacher, const std::vector<PreparedScene>& scenes,
                                     const TrainConfig& cfg, std::uint64_t mask_seed, const StepCallback& cb) {
  return train_stage2(
      m, teacher, scenes.size(),
      [&](std::size_t i) { return std::shared_ptr<const PreparedScene>(std::shared_ptr<void>(), &scenes.at(i)); }, cfg,
      mask_seed, cb);
}

std::vector<StepRecord> train_stage2(Model& m, TeacherState& teacher, std::size_t num_scenes, const SceneSource& source,
                                     const TrainConfig& cfg, std::uint64_t mask_seed, const StepCallback& cb) {
  for (const auto& [name, p] : m.params.all())
    if ((name.starts_with("fusion.") || name.starts_with("inst.")) && p.trainable) {
      throw std::logic_error("stage 2 requires frozen stage-1 parameters; '" + name + "' is trainable");
    }
  return train_loop(
      m.params, num_scenes, cfg,
      [&](const Graph& g, int step, std::size_t i, std::vector<double>& terms) {
        const auto ps = source(i);
        const auto f = forward_stage2(g, teacher.params, m.cfg, *ps, stage2_plan(m.cfg, *ps, mask_seed, step, i));
        terms = {f.loss.recon, f.loss.cos, f.loss.var, f.loss.cosine_similarity};
        return f.loss.total_var;
      },
      [&](const StepRecord& r) {
        ema_update(teacher, m.params);
        if (cb) cb(r);
      });
}

Stage2Metrics evaluate_stage2(const Model& m, const ParamStore& teacher, const std::vector<PreparedScene>& scenes,
                              double ratio, std::uint64_t mask_seed) {
  Stage2Metrics r;
  ModelConfig cfg = m.cfg;
  cfg.mask_ratio = ratio;
  double cos_sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto f = forward_stage2(Graph(m.params), teacher, cfg, scenes[i], stage2_plan(cfg, scenes[i], mask_seed, -1, i));
    const std::size_t nm = f.plan.masked_tokens.size();
    if (nm < 2) continue;
    const Var z = nn::slice_rows(f.prediction, 0, nm);
    cos_sum += f.loss.cosine_similarity * double(nm);
    n += nm;
    const auto mean_of = [](const Tensor& t) {
      double s = 0;
      for (double v : t.storage()) s += v;
      return s / double(t.size());
    };
    r.student_std += mean_of(channel_std(z).value()) / double(scenes.size());
    r.teacher_std += mean_of(channel_std(Var(f.teacher)).value()) / double(scenes.size());
    r.loss += f.loss.total / double(scenes.size());
  }
  if (n) r.cosine = cos_sum / double(n);
  return r;
}

}  // namespace vla3d::model
