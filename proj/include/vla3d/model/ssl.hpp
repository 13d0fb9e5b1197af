#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vla3d/model/fusion.hpp"
#include "vla3d/nn/rng.hpp"

namespace vla3d::model {

// ---- masking ---------------------------------------------------------------

struct MaskPlan {
  double ratio = 0.0;
  std::vector<std::vector<std::uint8_t>> masked;  // [view][token in view]
  std::vector<std::size_t> visible;               // global token indices, ascending
  std::vector<std::size_t> masked_tokens;         // global token indices, ascending
};

/// Block-structured masks drawn independently per view: square blocks of
/// `block` tokens per side are dropped at random positions until exactly
/// round(ratio * tokens_per_view) tokens of that view are masked.
MaskPlan plan_masks(int views, int grid_h, int grid_w, double ratio, nn::Rng rng, int block = 4);

// ---- completion coordinates ------------------------------------------------

struct CompletionConfig {
  double radius = 0.05;         // density neighborhood
  int min_pts = 4;              // neighbors required to keep an observed point
  double keep_fraction = 0.1;   // farthest share of the dense surface kept
  int per_instance = 5;
  int max_instances = scene::kMaxObjects;
  double novelty_threshold = 0.02;  // below this, the object is essentially fully observed

  void validate() const;
};

struct CompletionQuery {
  geom::Vec3 coord;
  int view = 0;
  int instance_id = 0;
};

struct InstanceCompletion {
  int instance_id = 0;
  std::vector<CompletionQuery> queries;
  std::size_t observed = 0;  // points left after denoising
  double novelty = 0.0;      // smallest distance-to-observed among the queries
  bool low_novelty = false;
};

/// Drops points with fewer than `min_pts` other points within `radius`.
std::vector<geom::Vec3> density_denoise(const std::vector<geom::Vec3>& pts, double radius, int min_pts);
/// Greedy farthest point sampling; returns indices, starting with `start`.
std::vector<std::size_t> farthest_point_sample(const std::vector<geom::Vec3>& pts, std::size_t start, std::size_t k);

/// Completion queries from an observed cloud and a dense candidate shape.
/// Returns no queries when the denoised cloud is empty.
InstanceCompletion complete_instance(const std::vector<geom::Vec3>& observed, const std::vector<geom::Vec3>& dense,
                                     int instance_id, int view, const CompletionConfig& cfg);

/// Observed cloud of a ground-truth instance: its mask pixels unprojected in every view.
std::vector<geom::Vec3> observed_cloud(const scene::Scene& s, std::size_t instance);

/// Completion queries for every instance with mask pixels, using the dense
/// analytic surface as the shape completion.
std::vector<InstanceCompletion> generate_completion_coords(const scene::Scene& s, const CompletionConfig& cfg = {});

// ---- predictor -------------------------------------------------------------

struct PredictorConfig {
  int dim = 96;
  int heads = 4;
  int blocks = 2;
  int ffn_ratio = 4;
  int pos_freqs = 8;
  double pos_octaves = 5.0;  // highest frequency is pi * 2^pos_octaves
  int max_views = 4;
  bool use_pos = true;  // Fourier position injection (disabled only in tests)
  bool zero_init_out = true;
  double embed_std = nn::kInitStd;  // init scale of the start token and view table  // attention and FFN output projections start at zero
  RopeConfig rope;

  int head_dim() const { return dim / heads; }
  void validate() const;
};

void register_predictor(ParamStore& store, const PredictorConfig& cfg, const std::string& prefix = "ssl");

/// [N, 6F]: per axis, sin/cos pairs at frequencies pi * 2^(octaves*f/(F-1)).
Tensor fourier_position(const Tensor& coords, int freqs, double octaves = 5.0);

struct PredictorInputs {
  Var context;  // [Nv, D]
  Tensor context_coords;
  std::vector<int> context_views;
  Tensor target_coords;  // [Nt, 3], masked first then completion
  std::vector<int> target_views;
};

struct PredictorTrace {
  std::vector<Tensor> cross_logits;  // per block, head 0, pre-softmax
};

/// Targets start from a learned token plus position and view injections,
/// then each block runs cross-attention to the context, self-attention
/// among targets and an FFN (pre-norm residuals, rope on Q and K).
Var predict(const Graph& g, const PredictorConfig& cfg, const PredictorInputs& in, const std::string& prefix = "ssl",
            PredictorTrace* trace = nullptr);

// ---- distillation ----------------------------------------------------------

struct DistillWeights {
  double recon = 1.0;
  double cos = 0.1;
  double var = 10.0;
  double smooth_l1_beta = 1.0;

  void validate() const;
};

struct DistillReport {
  double recon = 0, cos = 0, var = 0, total = 0;
  double cosine_similarity = 0;  // mean over tokens
  Var total_var;
};

/// Per-channel standard deviation over rows, sqrt(unbiased var + 1e-8). [1, D].
Var channel_std(const Var& x);
/// Mean row-wise cosine similarity. [1, 1].
Var mean_cosine(const Var& a, const Var& b);
/// teacher is a constant target.
DistillReport distill_loss(const Var& pred, const Tensor& teacher, const DistillWeights& w);

// ---- teacher ---------------------------------------------------------------

struct TeacherState {
  ParamStore params;
  double momentum = 0.999;
};

/// theta_T <- m theta_T + (1 - m) theta_S for every trainable student
/// parameter. Frozen parameters are left untouched so they stay bit-equal.
void ema_update(TeacherState& teacher, const ParamStore& student);

}  // namespace vla3d::model
