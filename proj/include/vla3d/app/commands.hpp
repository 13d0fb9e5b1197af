#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vla3d/app/config.hpp"
#include "vla3d/model/inference.hpp"

namespace vla3d::app {

namespace fs = std::filesystem;

/// Bad flag combination or refused action; exit code 1.
class usage_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum ExitCode : int { kOk = 0, kUsage = 1, kValidation = 2, kRuntime = 3 };

/// Runs `fn`, printing any error to `err`, and maps it to an exit code.
int guarded(const std::function<int()>& fn, std::ostream& err);

/// $VLA3D_OUTPUT_ROOT, or "vla3d_out" when unset.
fs::path output_root();
/// Creates `dir`; refuses a nonempty existing directory unless `force`.
void prepare_output(const fs::path& dir, bool force);

/// Calls fn(i) for i < n on up to `jobs` threads; rethrows the first error by index.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

/// Scenes named by a synth manifest, in manifest order.
std::vector<scene::Scene> load_manifest(const fs::path& dir);
/// Scene i uses seed cfg.seed + i.
std::vector<scene::Scene> generate_scenes(const RunConfig& cfg, int jobs = 1);

struct SynthOptions {
  RunConfig cfg;
  fs::path out;
  bool force = false;
  int jobs = 1;
};
/// Writes scene_XXXX.json (+ .tensors) and manifest.json.
int cmd_synth(const SynthOptions& o, std::ostream& log);

struct TrainOptions {
  RunConfig cfg;
  int stage = 1;
  std::optional<fs::path> data;  // synth output; generated from cfg when absent
  std::optional<fs::path> init;  // stage-1 checkpoint, required for stage 2
  fs::path out;
  bool force = false;
  int jobs = 1;
};
/// Writes stage{N}.ckpt, stage{N}_loss.csv, config.json (and teacher.ckpt for
/// stage 2). A non-finite loss saves the last good parameters and rethrows.
int cmd_train(const TrainOptions& o, std::ostream& log);

struct RunOptions {
  RunConfig cfg;
  std::optional<fs::path> checkpoint;  // untrained parameters when absent
  fs::path scene;
  fs::path out;
  bool force = false;
};
/// Writes masks/inst{k}_view{v}.pgm, instances.csv, completions.ply,
/// tokens.csv and timing.csv.
int cmd_run(const RunOptions& o, std::ostream& log);

struct EvalOptions {
  RunConfig cfg;
  std::optional<fs::path> checkpoint;
  std::optional<fs::path> data;
  fs::path out;
  bool force = false;
  bool oracle = false;
  int jobs = 1;
};
/// Writes metrics.csv: one row per scene and a final mean row.
int cmd_eval(const EvalOptions& o, std::ostream& log);

struct CheckOptions {
  RunConfig cfg;
  bool full = false;  // include the training-based criteria
  int jobs = 1;
};
/// Invariant suite; nonzero exit when any check fails.
int cmd_check(const CheckOptions& o, std::ostream& log);

/// Model with parameters from `checkpoint` (seeded init when absent).
model::Model load_model(const RunConfig& cfg, const std::optional<fs::path>& checkpoint);

}  // namespace vla3d::app
