#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include "vla3d/app/commands.hpp"
#include "vla3d/app/config.hpp"
#include "vla3d/nn/checkpoint.hpp"

using namespace vla3d;
using namespace vla3d::app;

namespace {

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("vla3d_app_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream f(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(f, l);) out.push_back(l);
  return out;
}

std::string config_message(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const config_error& e) {
    return e.what();
  }
  return "";
}

RunConfig with(const std::vector<std::string>& overrides) { return resolve_config("desk", nullptr, overrides); }

// A small model that keeps command tests fast.
RunConfig small(int scenes = 2) {
  return with({"scenes=" + std::to_string(scenes), "model.dim=24", "model.heads=2", "model.fusion_layers=1",
               "model.decoder_layers=2", "model.probes=8", "model.probe_grid=[2,2,2]", "model.predictor_blocks=1",
               "model.ffn_ratio=2", "stage1.steps=2", "stage1.batch=2", "stage2.steps=2", "stage2.batch=2"});
}

}  // namespace

// ---- configuration -----------------------------------------------------------

TEST(Config, DefaultsCarryTheAppendixConstants) {
  const RunConfig c = preset("desk");
  EXPECT_EQ(c.model.loss.cls, 2.0);
  EXPECT_EQ(c.model.ema_momentum, 0.999);
  EXPECT_EQ(c.model.mask_ratio, 0.5);
  EXPECT_EQ(c.stage1.clip, 0.5);
  EXPECT_EQ(c.stage1.lr, 1e-3);
  EXPECT_EQ(c.stage1.steps, 300);
  EXPECT_EQ(c.stage1.batch, 4);
  EXPECT_EQ(c.stage1.schedule, model::LrSchedule::constant);
  const RunConfig p = preset("full");
  EXPECT_EQ(p.stage1.steps, 5000);
  EXPECT_EQ(p.stage1.batch, 64);
  EXPECT_EQ(p.stage1.warmup, 1200);
  EXPECT_EQ(p.stage1.lr, 3e-6);
  EXPECT_EQ(p.stage2.schedule, model::LrSchedule::warmup_cosine);
  EXPECT_THROW(preset("lab"), config_error);
}

TEST(Config, JsonRoundTripIsLossless) {
  const RunConfig c = with({"seed=12", "scene.only_kind=\"box\"", "model.alpha=0.05", "model.lambda.var=3",
                            "stage2.schedule=\"warmup_cosine\"", "model.heads=2"});
  const RunConfig back = config_from_json(c.to_json(), preset("desk"));
  EXPECT_EQ(back.to_json().dump(), c.to_json().dump());
  EXPECT_EQ(back.seed, 12u);
  EXPECT_EQ(back.scene.only_kind, scene::PrimitiveKind::box);
  EXPECT_EQ(back.model.fusion.rope.head_dim, 48);
  EXPECT_EQ(back.model.ssl.rope.head_dim, 48);
  EXPECT_EQ(back.model.distill.var, 3.0);
}

TEST(Config, UnknownKeysAreRejectedByFullPath) {
  EXPECT_EQ(config_message([] { with({"model.lambda.foo=1"}); }), "unknown key 'model.lambda.foo'");
  EXPECT_EQ(config_message([] { with({"stagee1.steps=1"}); }), "unknown key 'stagee1'");
  EXPECT_EQ(config_message([] { with({"scene.objects=2"}); }), "unknown key 'scene.objects'");
}

TEST(Config, ViolationsNameTheKey) {
  EXPECT_EQ(config_message([] { with({"model.mask_ratio=1.1"}); }), "model.mask_ratio: must be in (0, 1), got 1.1");
  EXPECT_EQ(config_message([] { with({"scene.num_objects=7"}); }), "scene.num_objects: must be in [0, 6], got 7");
  EXPECT_EQ(config_message([] { with({"model.dim=\"big\""}); }), "model.dim: expected an integer, got \"big\"");
  EXPECT_EQ(config_message([] { with({"model.heads=8", "model.dim=64"}); }),
            "model.heads: head_dim = dim / heads = 8 must be divisible by 6");
  EXPECT_EQ(config_message([] { with({"model.heads=5"}); }).rfind("model.heads: must divide model.dim", 0), 0u);
  EXPECT_EQ(config_message([] { with({"scene.only_kind=\"cone\""}); }),
            "scene.only_kind: expected \"sphere\", \"box\" or \"cylinder\", got \"cone\"");
  EXPECT_EQ(config_message([] { with({"stage2.schedule=\"step\""}); }).rfind("stage2.schedule:", 0), 0u);
  EXPECT_EQ(config_message([] { with({"model.probes=40"}); }).rfind("model.probes:", 0), 0u);
  EXPECT_EQ(config_message([] { with({"stage1.batch=0"}); }), "stage1.batch: must be >= 1, got 0");
  EXPECT_EQ(config_message([] { with({"seed=-1"}); }).rfind("seed:", 0), 0u);
  EXPECT_EQ(config_message([] { with({"model.lambda.dice=-1"}); }), "model.lambda.dice: must be nonnegative, got -1.0");
  EXPECT_NO_THROW(with({"model.heads=16"}));  // head_dim 6
}

TEST(Config, FileMergesBetweenPresetAndOverrides) {
  const auto dir = temp_dir("config_file");
  write_json_file(dir / "c.json", json{{"model", {{"alpha", 0.2}}}, {"seed", 4}});
  const fs::path file = dir / "c.json";
  const RunConfig c = resolve_config("desk", &file, {"seed=5"});
  EXPECT_EQ(c.model.instance.alpha, 0.2);
  EXPECT_EQ(c.seed, 5u);
  std::ofstream(dir / "bad.json") << "{\"seed\": ";
  const fs::path bad = dir / "bad.json";
  EXPECT_THROW(resolve_config("desk", &bad, {}), config_error);
  json j = json::object();
  EXPECT_THROW(apply_override(j, "novalue"), config_error);
}

TEST(Guarded, ExitCodes) {
  std::ostringstream err;
  EXPECT_EQ(guarded([] { return 0; }, err), kOk);
  EXPECT_EQ(guarded([]() -> int { throw usage_error("u"); }, err), kUsage);
  EXPECT_EQ(guarded([]() -> int { throw config_error("c"); }, err), kValidation);
  EXPECT_EQ(guarded([]() -> int { throw format_error("f"); }, err), kValidation);
  EXPECT_EQ(guarded([]() -> int { throw std::runtime_error("r"); }, err), kRuntime);
  EXPECT_NE(err.str().find("invalid configuration: c"), std::string::npos);
}

TEST(ParallelFor, CoversEveryIndexAndRethrows) {
  std::vector<int> hit(100, 0);
  parallel_for(hit.size(), 4, [&](std::size_t i) { hit[i] += 1; });
  EXPECT_EQ(std::count(hit.begin(), hit.end(), 1), 100);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) { if (i == 7) throw std::runtime_error("x"); }), std::runtime_error);
}

// ---- synth ---------------------------------------------------------------------

TEST(Synth, WritesScenesAndManifestDeterministically) {
  const auto dir = temp_dir("synth");
  std::ostringstream log;
  const RunConfig cfg = with({"scenes=3"});
  cmd_synth({cfg, dir / "a", false, 1}, log);
  cmd_synth({cfg, dir / "b", false, 2}, log);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / e.path().filename())) << e.path();
  }
  EXPECT_EQ(files, 3u * 2 + 1);
  const auto scenes = load_manifest(dir / "a");
  ASSERT_EQ(scenes.size(), 3u);
  EXPECT_EQ(scenes[2].seed, 2u);
  EXPECT_EQ(scenes[1], scene::generate_scene(1, cfg.scene));
  EXPECT_EQ(guarded([&] { return cmd_synth({cfg, dir / "a", false, 1}, log); }, log), kUsage);
  EXPECT_EQ(guarded([&] { return cmd_synth({cfg, dir / "a", true, 1}, log); }, log), kOk);
}

// ---- train ---------------------------------------------------------------------

TEST(Train, StageTwoNeedsAStageOneCheckpoint) {
  const auto dir = temp_dir("train_dep");
  std::ostringstream log;
  TrainOptions o{small(), 2, std::nullopt, std::nullopt, dir / "out", false, 1};
  EXPECT_EQ(guarded([&] { return cmd_train(o, log); }, log), kUsage);
  EXPECT_NE(log.str().find("--init"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "out"));
  o.init = dir / "missing.ckpt";
  EXPECT_EQ(guarded([&] { return cmd_train(o, log); }, log), kRuntime);
}

TEST(Train, WritesCheckpointsLossCsvAndConfig) {
  const auto dir = temp_dir("train");
  std::ostringstream log;
  const RunConfig cfg = small();
  cmd_train({cfg, 1, std::nullopt, std::nullopt, dir / "s1", false, 2}, log);
  auto csv = lines(dir / "s1" / "stage1_loss.csv");
  ASSERT_EQ(csv.size(), 3u);
  EXPECT_EQ(csv[0], "step,lr,grad_norm,total,cls,l1,giou,mask_ce,dice,l3d");
  EXPECT_EQ(config_from_json(read_json_file(dir / "s1" / "config.json"), preset("desk")).to_json(), cfg.to_json());

  cmd_train({cfg, 2, std::nullopt, dir / "s1" / "stage1.ckpt", dir / "s2", false, 1}, log);
  csv = lines(dir / "s2" / "stage2_loss.csv");
  ASSERT_EQ(csv.size(), 3u);
  EXPECT_EQ(csv[0], "step,lr,grad_norm,total,recon,cos,var,cosine_similarity");
  EXPECT_TRUE(fs::exists(dir / "s2" / "teacher.ckpt"));

  // Stage 2 leaves every stage-1 parameter untouched.
  model::Model a = load_model(cfg, dir / "s1" / "stage1.ckpt"), b = load_model(cfg, dir / "s2" / "stage2.ckpt");
  for (const auto& [name, p] : a.params.all()) {
    if (name.starts_with("fusion.") || name.starts_with("inst.")) EXPECT_EQ(p.value, b.params.value(name)) << name;
  }
  bool moved = false;
  for (const auto& [name, p] : a.params.all())
    if (name.starts_with("ssl.") && !(p.value == b.params.value(name))) moved = true;
  EXPECT_TRUE(moved);

  // Same flags, same bytes; also independent of the job count.
  cmd_train({cfg, 1, std::nullopt, std::nullopt, dir / "s1b", false, 1}, log);
  for (const char* f : {"stage1.ckpt", "stage1_loss.csv", "config.json"})
    EXPECT_EQ(slurp(dir / "s1" / f), slurp(dir / "s1b" / f)) << f;
}

TEST(Train, DivergenceSavesLastGoodParametersAndExitsRuntime) {
  const auto dir = temp_dir("diverge");
  std::ostringstream log;
  RunConfig cfg = small(1);
  auto s = scene::generate_scene(0, cfg.scene);
  s.views[0].features.at(10, 3) = std::numeric_limits<double>::quiet_NaN();
  scene::save_scene(s, dir / "data" / "scene_0000.json");
  write_json_file(dir / "data" / "manifest.json", json{{"scenes", {{{"file", "scene_0000.json"}}}}});
  TrainOptions o{cfg, 1, dir / "data", std::nullopt, dir / "out", false, 1};
  EXPECT_EQ(guarded([&] { return cmd_train(o, log); }, log), kRuntime);
  EXPECT_NE(log.str().find("last good parameters"), std::string::npos);
  ASSERT_TRUE(fs::exists(dir / "out" / "stage1.ckpt"));
  const model::Model init(cfg.model, cfg.seed);
  const model::Model saved = load_model(cfg, dir / "out" / "stage1.ckpt");
  for (const auto& [name, p] : init.params.all()) EXPECT_EQ(p.value, saved.params.value(name)) << name;
}

// ---- run -----------------------------------------------------------------------

TEST(Run, UntrainedModelOnEmptySceneGivesEmptyInstanceCsv) {
  const auto dir = temp_dir("run_empty");
  std::ostringstream log;
  RunConfig cfg = small();
  cfg.scene.num_objects = 0;
  scene::save_scene(scene::generate_scene(3, cfg.scene), dir / "empty.json");
  EXPECT_EQ(guarded([&] { return cmd_run({cfg, std::nullopt, dir / "empty.json", dir / "out", false}, log); }, log), kOk);
  EXPECT_EQ(lines(dir / "out" / "instances.csv").size(), 1u);
  EXPECT_EQ(lines(dir / "out" / "tokens.csv").size(), 1u);
  EXPECT_TRUE(fs::exists(dir / "out" / "completions.ply"));
  EXPECT_EQ(lines(dir / "out" / "timing.csv").front(), "stage,seconds");
  // Existing output directory without --force.
  EXPECT_EQ(guarded([&] { return cmd_run({cfg, std::nullopt, dir / "empty.json", dir / "out", false}, log); }, log), kUsage);
  EXPECT_EQ(guarded([&] { return cmd_run({cfg, std::nullopt, dir / "nope.json", dir / "out2", false}, log); }, log),
            kRuntime);
}

TEST(Run, IncompatibleCheckpointIsRejected) {
  const auto dir = temp_dir("run_incompatible");
  std::ostringstream log;
  const RunConfig cfg = small();
  scene::save_scene(scene::generate_scene(0, cfg.scene), dir / "s.json");
  nn::save_checkpoint(dir / "other.ckpt", model::Model(preset("desk").model, 0).params);
  EXPECT_EQ(guarded([&] { return cmd_run({cfg, dir / "other.ckpt", dir / "s.json", dir / "out", false}, log); }, log),
            kValidation);
  EXPECT_FALSE(fs::exists(dir / "out"));
}

TEST(Run, MasksRoundTripThroughPgmAndOutputsAgree) {
  const auto dir = temp_dir("run_masks");
  std::ostringstream log;
  const RunConfig cfg = small();
  model::Model m(cfg.model, cfg.seed);
  // Every probe becomes an instance; random mask logits give nontrivial masks.
  m.params.value("inst.head.cls.b")[0] = 5.0;
  nn::save_checkpoint(dir / "m.ckpt", m.params);
  const auto s = scene::generate_scene(5, cfg.scene);
  scene::save_scene(s, dir / "s.json");
  cmd_run({cfg, dir / "m.ckpt", dir / "s.json", dir / "out", false}, log);

  const auto loaded = scene::load_scene(dir / "s.json");
  const auto ps = model::prepare_scene(loaded, cfg.model);
  const auto r = model::infer(m, ps);
  ASSERT_FALSE(r.instances.empty());
  std::size_t positive = 0;
  for (std::size_t k = 0; k < r.masks.size(); ++k)
    for (std::size_t v = 0; v < r.masks[k].size(); ++v) {
      const auto img = scene::read_pgm(dir / "out" / "masks" / ("inst" + std::to_string(k) + "_view" + std::to_string(v) + ".pgm"));
      EXPECT_EQ(img.width, r.mask_w);
      EXPECT_EQ(img.height, r.mask_h);
      EXPECT_EQ(img.mask, r.masks[k][v]);
      positive += std::count(img.mask.begin(), img.mask.end(), 1);
    }
  EXPECT_GT(positive, 0u);
  EXPECT_EQ(lines(dir / "out" / "instances.csv").size(), r.instances.size() + 1);
  EXPECT_EQ(lines(dir / "out" / "tokens.csv").size(), r.tokens.size() + 1);
  const auto ply = lines(dir / "out" / "completions.ply");
  std::size_t queries = 0;
  for (const auto& c : r.completions) queries += c.queries.size();
  EXPECT_EQ(ply[2], "element vertex " + std::to_string(queries));
  EXPECT_EQ(ply[6], "property double intensity");

  // Everything but the timing report is reproducible.
  cmd_run({cfg, dir / "m.ckpt", dir / "s.json", dir / "out2", false}, log);
  for (const char* f : {"instances.csv", "tokens.csv", "completions.ply", "masks/inst0_view1.pgm"})
    EXPECT_EQ(slurp(dir / "out" / f), slurp(dir / "out2" / f)) << f;
}

TEST(Pgm, ReaderRejectsOtherFormats) {
  const auto dir = temp_dir("pgm");
  std::ofstream(dir / "a.pgm") << "P2\n2 2\n255\n0 0 0 0\n";
  EXPECT_THROW(scene::read_pgm(dir / "a.pgm"), format_error);
  std::ofstream(dir / "b.pgm", std::ios::binary) << "P5\n4 4\n255\n\xff";
  EXPECT_THROW(scene::read_pgm(dir / "b.pgm"), format_error);
}

// ---- eval ----------------------------------------------------------------------

TEST(Eval, OracleIsExactAndUntrainedRunsAreReproducible) {
  const auto dir = temp_dir("eval");
  std::ostringstream log;
  const RunConfig cfg = small(3);
  cmd_eval({cfg, std::nullopt, std::nullopt, dir / "oracle", false, true, 2}, log);
  const auto rows = lines(dir / "oracle" / "metrics.csv");
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], "scene,seed,targets,centroid_l1,mask_iou,hidden_hit_rate,distill_cosine,completion_queries");
  EXPECT_EQ(rows[4].rfind("mean,,", 0), 0u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::stringstream ss(rows[i]);
    std::vector<std::string> col;
    for (std::string c; std::getline(ss, c, ',');) col.push_back(c);
    EXPECT_EQ(std::stod(col[3]), 0.0);
    EXPECT_EQ(std::stod(col[4]), 1.0);
  }
  cmd_eval({cfg, std::nullopt, std::nullopt, dir / "a", false, false, 1}, log);
  cmd_eval({cfg, std::nullopt, std::nullopt, dir / "b", false, false, 3}, log);
  EXPECT_EQ(slurp(dir / "a" / "metrics.csv"), slurp(dir / "b" / "metrics.csv"));
  EXPECT_EQ(lines(dir / "a" / "metrics.csv").size(), 5u);
}

// ---- check ---------------------------------------------------------------------

TEST(Check, QuickSuiteReportsMeasuredValuesAgainstTolerances) {
  std::ostringstream log;
  EXPECT_EQ(cmd_check({preset("desk"), false, 1}, log), kOk);
  const std::string out = log.str();
  EXPECT_NE(out.find("configuration: ok"), std::string::npos);
  EXPECT_NE(out.find("all checks passed"), std::string::npos);
  EXPECT_NE(out.find("PASS"), std::string::npos);
  EXPECT_EQ(out.find("FAIL"), std::string::npos);
}
