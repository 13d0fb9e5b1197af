// vla3d: scene synthesis, two-stage training, inference, evaluation and the
// invariant suite.

#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vla3d/app/commands.hpp"

using namespace vla3d::app;

namespace {

struct Common {
  std::optional<fs::path> config;
  std::string preset = "desk";
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out;
  bool force = false;
  int jobs = 1;
};

void add_common(CLI::App* sub, Common& c, bool writes) {
  sub->add_option("--config", c.config, "JSON run configuration")->check(CLI::ExistingFile);
  sub->add_option("--preset", c.preset, "named defaults: desk or full")->capture_default_str();
  sub->add_option("--set", c.sets, "override one key, e.g. --set model.mask_ratio=0.25");
  sub->add_option("--seed", c.seed, "base seed");
  sub->add_option("--jobs", c.jobs, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  if (writes) {
    sub->add_option("--out", c.out, "output directory (default: $VLA3D_OUTPUT_ROOT/<command>)");
    sub->add_flag("--force", c.force, "write into an existing nonempty directory");
  }
}

/// Config file defaults to config.json next to a checkpoint written by train.
RunConfig resolve(const Common& c, std::vector<std::string> extra, const std::optional<fs::path>& checkpoint = {}) {
  std::optional<fs::path> file = c.config;
  if (!file && checkpoint) {
    const fs::path beside = checkpoint->parent_path() / "config.json";
    if (fs::exists(beside)) file = beside;
  }
  if (c.seed) extra.insert(extra.begin(), "seed=" + std::to_string(*c.seed));
  std::vector<std::string> sets = extra;
  sets.insert(sets.end(), c.sets.begin(), c.sets.end());
  return resolve_config(c.preset, file ? &*file : nullptr, sets);
}

fs::path out_dir(const Common& c, const std::string& name) { return c.out ? *c.out : output_root() / name; }

template <class T>
void push_if(std::vector<std::string>& v, const std::string& key, const std::optional<T>& x) {
  if (x) v.push_back(key + "=" + std::to_string(*x));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D perception front-end for vision-language-action policies"};
  app.require_subcommand(1);

  Common c;
  std::optional<int> scenes, objects, views, steps, batch;
  std::optional<double> lr, mask_ratio;
  std::optional<fs::path> data, init, checkpoint, scene_file;
  bool oracle = false, full = false;
  int stage = 1;

  auto* synth = app.add_subcommand("synth", "generate synthetic scenes and a manifest");
  add_common(synth, c, true);
  synth->add_option("--scenes", scenes, "number of scenes");
  synth->add_option("--objects", objects, "objects per scene (0-6)");
  synth->add_option("--views", views, "views per scene (2-4)");

  auto* train = app.add_subcommand("train", "train stage 1 (fusion + instances) or stage 2 (predictor)");
  add_common(train, c, true);
  train->add_option("--stage", stage, "1 or 2")->capture_default_str();
  train->add_option("--steps", steps, "optimizer steps");
  train->add_option("--lr", lr, "learning rate");
  train->add_option("--batch", batch, "scenes per step");
  train->add_option("--mask-ratio", mask_ratio, "stage-2 masking ratio");
  train->add_option("--data", data, "synth output directory (default: generate from the config)");
  train->add_option("--init", init, "stage-1 checkpoint (required for stage 2)");
  train->add_option("--scenes", scenes, "number of generated scenes");
  train->add_option("--objects", objects, "objects per generated scene");
  train->add_option("--views", views, "views per generated scene");

  auto* run = app.add_subcommand("run", "full forward pass on one scene");
  add_common(run, c, true);
  run->add_option("--checkpoint", checkpoint, "parameters (default: untrained)");
  run->add_option("--scene", scene_file, "scene JSON written by synth")->required();

  auto* eval = app.add_subcommand("eval", "geometric metrics per scene");
  add_common(eval, c, true);
  eval->add_option("--checkpoint", checkpoint, "parameters (default: untrained)");
  eval->add_option("--data", data, "synth output directory (default: generate from the config)");
  eval->add_option("--scenes", scenes, "number of generated scenes");
  eval->add_option("--objects", objects, "objects per generated scene");
  eval->add_option("--views", views, "views per generated scene");
  eval->add_flag("--oracle", oracle, "substitute ground truth for the probes");

  auto* check = app.add_subcommand("check", "invariant suite");
  add_common(check, c, false);
  check->add_option("--mask-ratio", mask_ratio, "masking ratio to validate");
  check->add_flag("--full", full, "also run the training-based criteria");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  std::vector<std::string> sets;
  push_if(sets, "scenes", scenes);
  push_if(sets, "scene.num_objects", objects);
  push_if(sets, "scene.num_views", views);
  if (mask_ratio) {
    std::ostringstream s;
    s << std::setprecision(17) << "model.mask_ratio=" << *mask_ratio;
    sets.push_back(s.str());
  }
  const std::string stage_key = "stage" + std::to_string(stage);
  push_if(sets, stage_key + ".steps", steps);
  push_if(sets, stage_key + ".batch", batch);
  if (lr) {
    std::ostringstream s;
    s << std::setprecision(17) << stage_key << ".lr=" << *lr;
    sets.push_back(s.str());
  }

  return guarded(
      [&]() -> int {
        if (*synth) return cmd_synth({resolve(c, sets), out_dir(c, "synth"), c.force, c.jobs}, std::cout);
        if (*train) {
          TrainOptions o{resolve(c, sets, init), stage, data, init, out_dir(c, "train_stage" + std::to_string(stage)),
                         c.force, c.jobs};
          return cmd_train(o, std::cout);
        }
        if (*run) return cmd_run({resolve(c, sets, checkpoint), checkpoint, *scene_file, out_dir(c, "run"), c.force}, std::cout);
        if (*eval) {
          EvalOptions o{resolve(c, sets, checkpoint), checkpoint, data, out_dir(c, "eval"), c.force, oracle, c.jobs};
          return cmd_eval(o, std::cout);
        }
        return cmd_check({resolve(c, sets), full, c.jobs}, std::cout);
      },
      std::cerr);
}
