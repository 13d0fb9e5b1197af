#include "vla3d/app/commands.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <thread>

#include "vla3d/app/criteria.hpp"
#include "vla3d/nn/checkpoint.hpp"

namespace vla3d::app {

int guarded(const std::function<int()>& fn, std::ostream& err) {
  try {
    return fn();
  } catch (const usage_error& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const config_error& e) {
    err << "invalid configuration: " << e.what() << '\n';
    return kValidation;
  } catch (const format_error& e) {
    err << "invalid input: " << e.what() << '\n';
    return kValidation;
  } catch (const std::invalid_argument& e) {
    err << "invalid argument: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntime;
  }
}

fs::path output_root() {
  const char* env = std::getenv("VLA3D_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("vla3d_out");
}

void prepare_output(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw usage_error("output path '" + dir.string() + "' exists and is not a directory");
    if (!fs::is_empty(dir) && !force) {
      throw usage_error("output directory '" + dir.string() + "' already exists; pass --force to overwrite");
    }
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory '" + dir.string() + "': " + ec.message());
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(std::max(jobs, 1), n);
  std::vector<std::exception_ptr> errors(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace {

std::string scene_file_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu.json", i);
  return buf;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + p.string() + "'");
  f << std::setprecision(17);
  return f;
}

std::vector<model::PreparedScene> prepare_all(const std::vector<scene::Scene>& scenes, const model::ModelConfig& cfg) {
  std::vector<model::PreparedScene> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back(model::prepare_scene(s, cfg));
  return out;
}

}  // namespace

std::vector<scene::Scene> load_manifest(const fs::path& dir) {
  const json m = read_json_file(dir / "manifest.json");
  if (!m.contains("scenes") || !m["scenes"].is_array()) throw format_error("manifest.json has no \"scenes\" array");
  std::vector<scene::Scene> out;
  for (const auto& e : m["scenes"]) {
    if (!e.contains("file") || !e["file"].is_string()) throw format_error("manifest entry without a \"file\" name");
    out.push_back(scene::load_scene(dir / e["file"].get<std::string>()));
  }
  if (out.empty()) throw format_error("manifest lists no scenes");
  return out;
}

std::vector<scene::Scene> generate_scenes(const RunConfig& cfg, int jobs) {
  std::vector<scene::Scene> out(std::size_t(cfg.scenes));
  parallel_for(out.size(), jobs, [&](std::size_t i) { out[i] = scene::generate_scene(cfg.seed + i, cfg.scene); });
  return out;
}

model::Model load_model(const RunConfig& cfg, const std::optional<fs::path>& checkpoint) {
  model::Model m(cfg.model, cfg.seed);
  if (checkpoint) {
    if (!fs::exists(*checkpoint)) throw std::runtime_error("checkpoint '" + checkpoint->string() + "' does not exist");
    nn::load_checkpoint(*checkpoint, m.params);
  }
  return m;
}

// ---- synth -------------------------------------------------------------------

int cmd_synth(const SynthOptions& o, std::ostream& log) {
  o.cfg.validate();
  prepare_output(o.out, o.force);
  const auto scenes = generate_scenes(o.cfg, o.jobs);
  json manifest;
  manifest["format"] = "vla3d-scenes";
  manifest["version"] = scene::kSceneFormatVersion;
  manifest["seed"] = o.cfg.seed;
  manifest["scene"] = o.cfg.to_json()["scene"];
  manifest["scenes"] = json::array();
  parallel_for(scenes.size(), o.jobs, [&](std::size_t i) { scene::save_scene(scenes[i], o.out / scene_file_name(i)); });
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    manifest["scenes"].push_back({{"file", scene_file_name(i)}, {"seed", scenes[i].seed}});
  }
  write_json_file(o.out / "manifest.json", manifest);
  log << "wrote " << scenes.size() << " scenes to " << o.out.string() << '\n';
  return kOk;
}

// ---- train ---------------------------------------------------------------------

int cmd_train(const TrainOptions& o, std::ostream& log) {
  o.cfg.validate();
  if (o.stage != 1 && o.stage != 2) throw usage_error("--stage must be 1 or 2");
  if (o.stage == 2 && !o.init) throw usage_error("stage 2 needs the stage-1 checkpoint: pass --init <stage1.ckpt>");
  if (o.init && !fs::exists(*o.init)) throw std::runtime_error("checkpoint '" + o.init->string() + "' does not exist");
  const auto scenes = o.data ? load_manifest(*o.data) : generate_scenes(o.cfg, o.jobs);
  const auto prepared = prepare_all(scenes, o.cfg.model);
  model::Model m = load_model(o.cfg, o.init);

  prepare_output(o.out, o.force);
  write_json_file(o.out / "config.json", o.cfg.to_json());
  const std::string tag = "stage" + std::to_string(o.stage);
  auto csv = open_out(o.out / (tag + "_loss.csv"));
  csv << "step,lr,grad_norm,total,"
      << (o.stage == 1 ? "cls,l1,giou,mask_ce,dice,l3d" : "recon,cos,var,cosine_similarity") << '\n';
  auto row = [&](const model::StepRecord& r) {
    csv << r.step << ',' << r.lr << ',' << r.grad_norm << ',' << r.total;
    for (double t : r.terms) csv << ',' << t;
    csv << '\n';
  };

  model::TrainConfig tc = o.stage == 1 ? o.cfg.stage1 : o.cfg.stage2;
  tc.jobs = o.jobs;
  const fs::path ckpt = o.out / (tag + ".ckpt");
  std::optional<model::TeacherState> teacher;
  if (o.stage == 2) {
    model::freeze_stage1(m.params);
    teacher = model::make_teacher(m);
    teacher->momentum = o.cfg.model.ema_momentum;
  }
  try {
    if (o.stage == 1) {
      model::train_stage1(m, prepared, tc, row);
    } else {
      model::train_stage2(m, *teacher, prepared, tc, o.cfg.seed, row);
    }
  } catch (const numeric_error& e) {
    // The failing step never reached the optimizer, so the parameters are the last good ones.
    nn::save_checkpoint(ckpt, m.params);
    if (teacher) nn::save_checkpoint(o.out / "teacher.ckpt", teacher->params);
    throw std::runtime_error(std::string("training diverged (") + e.what() + "); last good parameters saved to " +
                             ckpt.string());
  }
  nn::save_checkpoint(ckpt, m.params);
  if (teacher) nn::save_checkpoint(o.out / "teacher.ckpt", teacher->params);
  log << "stage " << o.stage << ": " << tc.steps << " steps on " << scenes.size() << " scenes, checkpoint "
      << ckpt.string() << '\n';
  return kOk;
}

// ---- run -----------------------------------------------------------------------

int cmd_run(const RunOptions& o, std::ostream& log) {
  using clock = std::chrono::steady_clock;
  o.cfg.validate();
  if (!fs::exists(o.scene)) throw std::runtime_error("scene '" + o.scene.string() + "' does not exist");
  std::vector<std::pair<std::string, double>> timing;
  auto t = clock::now();
  auto lap = [&](const char* stage) {
    const auto now = clock::now();
    timing.emplace_back(stage, std::chrono::duration<double>(now - t).count());
    t = now;
  };
  const scene::Scene s = scene::load_scene(o.scene);
  const model::Model m = load_model(o.cfg, o.checkpoint);
  lap("load");
  prepare_output(o.out, o.force);
  const auto ps = model::prepare_scene(s, m.cfg);
  lap("prepare");
  const auto r = model::infer(m, ps);
  lap("infer");

  fs::create_directories(o.out / "masks");
  for (std::size_t k = 0; k < r.masks.size(); ++k)
    for (std::size_t v = 0; v < r.masks[k].size(); ++v)
      scene::write_pgm(o.out / "masks" / ("inst" + std::to_string(k) + "_view" + std::to_string(v) + ".pgm"),
                       r.masks[k][v], r.mask_w, r.mask_h);

  {
    auto f = open_out(o.out / "instances.csv");
    f << "instance,probe,logit,confidence,uncertainty,x,y,z,completion_queries\n";
    for (std::size_t k = 0; k < r.instances.size(); ++k) {
      const auto& it = r.instances[k];
      std::size_t queries = 0;
      for (const auto& c : r.completions)
        if (c.instance_id == int(it.probe)) queries = c.queries.size();
      f << k << ',' << it.probe << ',' << it.logit << ',' << it.confidence << ',' << it.uncertainty << ',' << it.p.x()
        << ',' << it.p.y() << ',' << it.p.z() << ',' << queries << '\n';
    }
  }

  {
    const auto batch = model::flatten_completions(r.completions);
    const nn::Tensor& feats = r.completion_features.value();
    std::vector<double> intensity(batch.coords.rows());
    for (std::size_t i = 0; i < intensity.size(); ++i) {
      double n2 = 0;
      for (std::size_t c = 0; c < feats.cols(); ++c) n2 += feats.at(i, c) * feats.at(i, c);
      intensity[i] = std::sqrt(n2);
    }
    scene::write_ply(o.out / "completions.ply", batch.coords, &intensity);
  }

  {
    auto f = open_out(o.out / "tokens.csv");
    constexpr std::size_t kShown = 8;
    const nn::Tensor& tok = r.tokens.tokens.value();
    const std::size_t shown = std::min(kShown, tok.cols());
    f << "index,source,owner,x,y,z,gate_mean";
    for (std::size_t c = 0; c < shown; ++c) f << ",f" << c;
    f << '\n';
    for (std::size_t i = 0; i < r.tokens.size(); ++i) {
      const bool inst = r.tokens.source[i] == model::TokenSource::instance;
      f << i << ',' << (inst ? "instance" : "completion") << ',' << r.tokens.owner[i] << ',' << r.tokens.coords.at(i, 0)
        << ',' << r.tokens.coords.at(i, 1) << ',' << r.tokens.coords.at(i, 2) << ','
        << (i < r.tokens.gate_mean.size() ? r.tokens.gate_mean[i] : 0.0);
      for (std::size_t c = 0; c < shown; ++c) f << ',' << tok.at(i, c);
      f << '\n';
    }
  }
  lap("write");

  {
    auto f = open_out(o.out / "timing.csv");
    f << std::setprecision(6) << "stage,seconds\n";
    for (const auto& [stage, sec] : timing) f << stage << ',' << sec << '\n';
  }
  log << r.instances.size() << " instances, " << r.tokens.size() << " downstream tokens, written to " << o.out.string()
      << '\n';
  return kOk;
}

// ---- eval ----------------------------------------------------------------------

int cmd_eval(const EvalOptions& o, std::ostream& log) {
  o.cfg.validate();
  const auto scenes = o.data ? load_manifest(*o.data) : generate_scenes(o.cfg, o.jobs);
  const auto prepared = prepare_all(scenes, o.cfg.model);
  const model::Model m = load_model(o.cfg, o.checkpoint);
  prepare_output(o.out, o.force);
  std::vector<model::SceneMetrics> metrics(prepared.size());
  parallel_for(prepared.size(), o.jobs,
               [&](std::size_t i) { metrics[i] = model::evaluate_scene(m, prepared[i], o.oracle, o.cfg.seed, i); });

  auto f = open_out(o.out / "metrics.csv");
  f << "scene,seed,targets,centroid_l1,mask_iou,hidden_hit_rate,distill_cosine,completion_queries\n";
  model::SceneMetrics mean;
  double targets = 0, queries = 0;
  const double n = double(metrics.size());
  for (std::size_t i = 0; i < metrics.size(); ++i) {
    const auto& x = metrics[i];
    f << i << ',' << scenes[i].seed << ',' << x.targets << ',' << x.centroid_l1 << ',' << x.mask_iou << ','
      << x.hidden_hit_rate << ',' << x.distill_cosine << ',' << x.completion_queries << '\n';
    mean.centroid_l1 += x.centroid_l1 / n;
    mean.mask_iou += x.mask_iou / n;
    mean.hidden_hit_rate += x.hidden_hit_rate / n;
    mean.distill_cosine += x.distill_cosine / n;
    targets += x.targets / n;
    queries += x.completion_queries / n;
  }
  f << "mean,," << targets << ',' << mean.centroid_l1 << ',' << mean.mask_iou << ',' << mean.hidden_hit_rate << ','
    << mean.distill_cosine << ',' << queries << '\n';
  log << std::setprecision(6) << "mean over " << metrics.size() << " scenes: centroid L1 " << mean.centroid_l1
      << " m, mask IoU " << mean.mask_iou << ", hidden hit rate " << mean.hidden_hit_rate << ", distillation cosine "
      << mean.distill_cosine << '\n';
  return kOk;
}

// ---- check ---------------------------------------------------------------------

int cmd_check(const CheckOptions& o, std::ostream& log) {
  o.cfg.validate();
  log << "configuration: ok\n";
  CriteriaContext ctx(o.jobs, &log, o.full);
  std::vector<int> ids = quick_criteria();
  if (o.full) {
    ids.clear();
    for (int i = 1; i <= kNumCriteria; ++i) ids.push_back(i);
  }
  int failed = 0;
  for (int id : ids) {
    const auto r = run_criterion(id, ctx);
    print_result(r, log, true);
    log.flush();
    failed += !r.passed();
  }
  log << (failed ? std::to_string(failed) + " check(s) failed" : std::string("all checks passed")) << '\n';
  return failed ? kRuntime : kOk;
}

}  // namespace vla3d::app
