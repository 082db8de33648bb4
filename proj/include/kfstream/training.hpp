#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "kfstream/diffusion.hpp"
#include "kfstream/kvcache.hpp"
#include "kfstream/model.hpp"
#include "kfstream/procworld.hpp"

namespace kfs {

enum class Stage { teacher, pca, fsf };
const char* stage_name(Stage s);
Stage parse_stage(const std::string& s);

// F-SF flow-matching target on self-rollouts.
enum class FmTarget { ground_truth, teacher };
const char* fm_target_name(FmTarget t);
FmTarget parse_fm_target(const std::string& s);

struct TrainConfig {
  Stage stage = Stage::teacher;
  std::size_t iterations = 3000;
  double learning_rate = 1e-3;
  std::size_t batch_size = 8;
  std::size_t window_frames = 30;
  std::size_t chunk_size = 3;
  double p_block = 0.5;
  std::size_t max_hidden = 6;
  double lambda_reg = 1.0;
  double lambda_cos = 0.1;
  double lambda_fm = 1.0;
  double lambda_adv = 0.05;
  double disc_learning_rate = 1e-3;
  FmTarget fm_target = FmTarget::ground_truth;
  double grad_clip = 1.0;
  double weight_decay = 0.0;
  bool temporal_masking = true;
  // F-SF: keyframe emitted at a uniformly random rollout index (false: fixed index).
  bool random_kf_timing = true;
  std::size_t capacity_past = 9;
  std::size_t capacity_future = 3;
  StepSchedule schedule;
  std::size_t train_episodes = 2000;
  std::size_t episode_frames = 48;
  std::uint64_t seed = 0;
  std::size_t log_every = 50;
  // Teacher stage: fraction of windows drawn with independent per-frame levels.
  double teacher_mixed_fraction = 0.5;
  // Teacher stage: abort if the final validation loss exceeds this.
  double teacher_loss_threshold = 1.0;

  void validate() const;
  // Tuned defaults for a stage (iterations, learning rate, clipping).
  static TrainConfig for_stage(Stage stage);
};

// Adam with decoupled weight decay over a list of tensors.
class AdamW {
 public:
  AdamW(double lr, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  // grads[i] may be empty (no gradient for that tensor this step).
  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads);
  double learning_rate() const { return lr_; }

 private:
  double lr_, wd_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Scales gradients in place so their global L2 norm is at most max_norm; returns the pre-clip norm.
double clip_gradients(std::vector<Tensor>& grads, double max_norm);
// Collects gradients for tensors [offset, offset + count) from a backward() result.
std::vector<Tensor> gather_grads(const std::map<ParamId, Tensor>& grads, std::size_t offset, std::size_t count);

// 2-layer MLP on per-frame teacher features producing one logit per frame.
struct Discriminator {
  std::vector<Tensor> params;  // w1 [F x H], b1 [1 x H], w2 [H x 1], b2 [1 x 1]
  static Discriminator init(std::size_t feature_dim, std::size_t hidden, std::mt19937_64& rng);
  Var logits(Graph& g, Var features, bool trainable, ParamId offset) const;
  std::size_t feature_dim() const { return params.at(0).rows(); }
};

// Training windows cropped from procedurally generated episodes.
class WorldDataset {
 public:
  WorldDataset(WorldSpec spec, std::size_t episodes, std::size_t episode_frames, std::uint64_t seed,
               bool validation = false);
  struct Window {
    Tensor frames;  // [T x d], frame 0 is the conditioning frame
    PromptSchedule schedule;
    std::uint64_t episode_seed = 0;
  };
  Window sample(std::mt19937_64& rng, std::size_t frames) const;
  const std::vector<Episode>& episodes() const { return episodes_; }
  const WorldSpec& spec() const { return spec_; }

 private:
  WorldSpec spec_;
  std::vector<Episode> episodes_;
};

// Restriction of a schedule to frames [start, start + length), re-based to 0.
PromptSchedule crop_schedule(const PromptSchedule& s, std::size_t start, std::size_t length);
// Cross-attention mask: temporal (global + own segment) or every current token.
AttentionMask schedule_cross_mask(const PromptSchedule& s, std::size_t frames, bool temporal_masking,
                                  std::vector<int>* tokens);

struct TrainLog {
  struct Row {
    std::size_t iteration = 0;
    std::string metric;
    double value = 0.0;
  };
  std::vector<Row> rows;
  std::vector<std::string> warnings;
  void add(std::size_t it, std::string metric, double v) { rows.push_back({it, std::move(metric), v}); }
  void write_csv(const std::string& path) const;
};

using ProgressFn = std::function<void(std::size_t iteration, const std::map<std::string, double>& metrics)>;

Model train_teacher(const TrainConfig& config, const WorldDataset& data, const ModelConfig& model_config,
                    TrainLog* log = nullptr, const ProgressFn& progress = {});
// Mean flow-matching loss of the teacher on fixed validation windows.
double teacher_validation_loss(const Model& teacher, const WorldDataset& val, std::size_t windows,
                               std::size_t frames, std::uint64_t seed);

Model pca_distill(const Model& teacher, const TrainConfig& config, const WorldDataset& data, TrainLog* log = nullptr,
                  const ProgressFn& progress = {});

// One self-rollout over a window with its losses and student gradients.
struct FsfRollout {
  double fm = 0.0, adv = 0.0, total = 0.0;
  std::vector<Tensor> grads;  // per student tensor
  std::vector<Tensor> fake_features, real_features;
  std::vector<Lineage> context_lineage;  // lineage of every context entry the student attended to
  std::size_t kf_emitted_at = 0;         // cursor at the first keyframe emission
  std::size_t keyframes = 0;
};
FsfRollout fsf_rollout(const Model& student, const Model& teacher, const Discriminator& disc, const TrainConfig& config,
                       const WorldDataset::Window& window, std::mt19937_64& rng);

// Flags discriminator collapse: accuracy above `threshold` for `patience`
// consecutive steps. update() returns true once, on the step it first trips.
class CollapseMonitor {
 public:
  explicit CollapseMonitor(double threshold = 0.99, std::size_t patience = 100)
      : threshold_(threshold), patience_(patience) {}
  bool update(double accuracy);
  bool tripped() const { return tripped_; }

 private:
  double threshold_;
  std::size_t patience_;
  std::size_t run_ = 0;
  bool tripped_ = false;
};

struct FsfResult {
  Model student;
  Discriminator disc;
};
FsfResult fsf_train(const Model& student, const Model& teacher, Discriminator disc, const TrainConfig& config,
                    const WorldDataset& data, TrainLog* log = nullptr, const ProgressFn& progress = {});

// Throws std::logic_error if any query row of a spanned chunk sees a hidden chunk.
void assert_pca_mask(const AttentionMask& mask, std::size_t chunk_size, std::span<const SpanSpec> spans);
// Throws std::logic_error if any cache entry carries ground-truth lineage.
void assert_self_generated(const DualRegionKVCache& cache);

// Per-frame embedding by a model's final normalized features (clean frame, no prompt).
Embedder teacher_embedder(const Model& teacher);

// KF forecasting probe: from clean ground-truth context ending at `cursor`
// (at most `context_frames` frames), predict the chunk `offset` chunks ahead.
Tensor forecast_chunk(const Model& student, const Tensor& frames, const PromptSchedule& schedule, std::size_t cursor,
                      std::size_t offset_chunks, std::size_t chunk_size, std::size_t context_frames,
                      const StepSchedule& steps, bool temporal_masking, std::uint64_t noise_seed);

}  // namespace kfs
