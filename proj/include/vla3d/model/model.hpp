#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vla3d/model/fusion.hpp"
#include "vla3d/model/geometry.hpp"
#include "vla3d/model/instance.hpp"
#include "vla3d/model/matching.hpp"
#include "vla3d/model/ssl.hpp"
#include "vla3d/nn/optim.hpp"

namespace vla3d::model {

struct ModelConfig {
  FusionConfig fusion;
  InstanceConfig instance;
  MatchCostConfig match;
  LossWeights loss;
  PredictorConfig ssl;
  DistillWeights distill;
  CompletionConfig completion;
  GeometryConfig geo;
  double mask_ratio = 0.5;
  double ema_momentum = 0.999;

  void validate() const;
};

/// Parameters of every module, registered under "fusion.", "inst.", ...
struct Model {
  ModelConfig cfg;
  ParamStore params;

  Model(const ModelConfig& cfg, std::uint64_t seed);
};

/// Scene with everything the model needs precomputed.
struct PreparedScene {
  const scene::Scene* scene = nullptr;
  TokenInputs tokens;
  std::vector<Target> targets;
  std::vector<geom::CameraView> cameras;
  std::vector<InstanceCompletion> completions;  // from ground-truth masks
};
PreparedScene prepare_scene(const scene::Scene& s, const ModelConfig& cfg);

struct Stage1Forward {
  SpatialMemory memory;
  ProbeOutputs probes;
  Assignment assignment;
  LossReport loss;
};
Stage1Forward forward_stage1(const Graph& g, const ModelConfig& cfg, const PreparedScene& ps);

enum class LrSchedule { constant, warmup_cosine };

struct TrainConfig {
  LrSchedule schedule = LrSchedule::constant;
  int steps = 300;
  int batch = 4;
  double lr = 1e-3;
  int warmup = 30;
  double final_lr = 1e-5;
  double clip = 0.5;
  double weight_decay = 1e-4;
  int jobs = 1;

  double lr_at(int step) const;
  /// Stage-2 desk-scale default: constant 3e-3.
  static TrainConfig stage2();
  /// Full-scale schedule: 1200 warmup steps to 3e-6, cosine to 1e-8 over
  /// 3800 more, batch 64.
  static TrainConfig full_scale();
  void validate() const;
};

struct StepRecord {
  int step = 0;
  double lr = 0;
  double grad_norm = 0;
  std::vector<double> terms;  // stage-specific, mean over the batch
  double total = 0;
};

using StepCallback = std::function<void(const StepRecord&)>;

/// Per-scene loss closure used by the generic trainer: returns the scalar
/// loss and fills stage-specific terms.
using SceneLoss =
    std::function<Var(const Graph& g, int step, std::size_t scene_index, std::vector<double>& terms)>;

/// Deterministic minibatch AdamW: step s uses scenes (s*batch + i) mod n.
/// Per-scene gradients are computed in parallel (cfg.jobs) and reduced in
/// batch order, so results do not depend on the job count.
std::vector<StepRecord> train_loop(ParamStore& params, std::size_t num_scenes, const TrainConfig& cfg,
                                   const SceneLoss& loss, const StepCallback& cb = {});

std::vector<StepRecord> train_stage1(Model& m, const std::vector<PreparedScene>& scenes, const TrainConfig& cfg,
                                     const StepCallback& cb = {});

struct Stage1Metrics {
  double loss = 0;               // mean joint loss
  double centroid_l1 = 0;        // mean L1 (summed over axes) of matched probes
  double best_centroid_l1 = 0;   // mean over targets of the closest probe
  int targets = 0;
};
Stage1Metrics evaluate_stage1(const Model& m, const std::vector<PreparedScene>& scenes);

/// Marks every fusion and instance-module parameter frozen.
void freeze_stage1(ParamStore& params);

struct CompletionBatch {
  Tensor coords;  // [Nc, 3]
  std::vector<int> views;
  std::vector<int> instance_ids;
};
CompletionBatch flatten_completions(const std::vector<InstanceCompletion>& c);

struct Stage2Forward {
  MaskPlan plan;
  Var prediction;  // [N_mask + N_comp, D]
  Tensor teacher;  // [N_mask, D]
  DistillReport loss;
};

/// Student: frozen fusion over the visible tokens, then the predictor at
/// [masked, completion] coordinates. Teacher: fusion over all tokens with
/// the teacher's parameters, read at the masked tokens.
Stage2Forward forward_stage2(const Graph& g, const ParamStore& teacher, const ModelConfig& cfg, const PreparedScene& ps,
                             const MaskPlan& plan);

/// Inference path: no masking, completion coordinates only.
Var predict_completions(const Graph& g, const ModelConfig& cfg, const SpatialMemory& mem, const CompletionBatch& comp);

TeacherState make_teacher(const Model& m);

/// Seeded mask for (step, scene); independent of batch composition.
MaskPlan stage2_plan(const ModelConfig& cfg, const PreparedScene& ps, std::uint64_t seed, int step,
                     std::size_t scene_index);

/// Scene `i` of a possibly unbounded family, built on demand.
using SceneSource = std::function<std::shared_ptr<const PreparedScene>(std::size_t index)>;

/// Scene source that owns freshly generated scenes: index i uses seed base_seed + i.
SceneSource generated_scenes(const scene::SceneSpec& spec, std::uint64_t base_seed, const ModelConfig& cfg);

/// Requires frozen stage-1 parameters; updates the teacher by EMA after every step.
std::vector<StepRecord> train_stage2(Model& m, TeacherState& teacher, const std::vector<PreparedScene>& scenes,
                                     const TrainConfig& cfg, std::uint64_t mask_seed, const StepCallback& cb = {});
std::vector<StepRecord> train_stage2(Model& m, TeacherState& teacher, std::size_t num_scenes, const SceneSource& source,
                                     const TrainConfig& cfg, std::uint64_t mask_seed, const StepCallback& cb = {});

struct Stage2Metrics {
  double cosine = 0;       // mean over masked tokens of all scenes
  double student_std = 0;  // mean per-channel std of predictions, averaged over scenes
  double teacher_std = 0;
  double loss = 0;
};
Stage2Metrics evaluate_stage2(const Model& m, const ParamStore& teacher, const std::vector<PreparedScene>& scenes,
                              double ratio, std::uint64_t mask_seed);

}  // namespace vla3d::model
