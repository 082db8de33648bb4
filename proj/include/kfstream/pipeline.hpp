#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "kfstream/procworld.hpp"
#include "kfstream/sampler.hpp"
#include "kfstream/training.hpp"

namespace kfs {

// A stage that needs a checkpoint which has not been produced yet.
class PrerequisiteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Everything a run depends on. Parsed from JSON where every key is optional and
// falls back to the defaults below; stage seeds are derived from `seed`.
struct RunConfig {
  WorldParams world;
  ModelConfig model;
  TrainConfig teacher = TrainConfig::for_stage(Stage::teacher);
  TrainConfig pca = TrainConfig::for_stage(Stage::pca);
  TrainConfig fsf = TrainConfig::for_stage(Stage::fsf);
  SamplerConfig sampler;
  std::size_t eval_episodes = 50;   // 4-segment validation episodes for adherence
  std::size_t drift_episodes = 10;  // single-segment validation episodes for drift
  std::size_t eval_segments = 4;
  std::size_t eval_frames = 48;
  std::size_t val_episodes = 64;  // teacher validation loss windows
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::string out = "runs";

  RunConfig() { derive_seeds(); }
  static RunConfig parse(const std::string& json_text);
  static RunConfig load(const std::string& path);
  std::string to_json() const;
  // Applies the run seed to the world, stage and sampler seeds.
  void derive_seeds();
  void validate() const;
  // FNV-1a of the canonical JSON, hex.
  std::string hash() const;
  // Hash of what determines trained weights (world, model, training stages, seed).
  std::string training_hash() const;
  const TrainConfig& stage_config(Stage s) const;
};

std::uint64_t derive_seed(std::uint64_t run_seed, std::string_view name);

// A trained model: the teacher, or a student stage with or without temporal
// masking. `causal` students are distilled with p_block = 0 (next-chunk only).
struct Variant {
  Stage stage = Stage::teacher;
  bool causal = false;
  bool temporal_masking = true;
  std::string name() const;
  static Variant parse(const std::string& name);
  bool operator==(const Variant&) const = default;
};

std::string checkpoint_path(const RunConfig& cfg, const Variant& v);

struct TrainOutcome {
  Model model;
  TrainLog log;
  std::string path;
  bool reused = false;
  double validation_loss = 0.0;  // teacher only
  double seconds = 0.0;
};

// Trains a variant and writes its checkpoint and metrics CSV. Throws
// PrerequisiteError when a required checkpoint is missing and NumericalError on
// divergence or a teacher that misses its validation-loss threshold.
TrainOutcome train_variant(const RunConfig& cfg, const Variant& v, const ProgressFn& progress = {});
// Loads the checkpoint if it was trained under the same training hash, otherwise
// trains it (and its prerequisites when `train_prerequisites`).
TrainOutcome ensure_variant(const RunConfig& cfg, const Variant& v, bool train_prerequisites = true,
                            const ProgressFn& progress = {});
std::optional<Model> load_variant(const RunConfig& cfg, const Variant& v);

struct EvalMetrics {
  double adherence = 0.0;
  std::size_t adherence_scored = 0;
  double drift_average = 0.0;
  double drift_max = 0.0;
  double drift_ratio = 0.0;
  double drift_acceleration = 0.0;
  double raw_drift_ratio = 0.0;
  double smoothness = 0.0;
  std::vector<DriftReport> drift_runs;  // one per drift episode
  std::vector<double> raw_ratio_runs;
  std::vector<double> adherence_runs;  // one per adherence episode
};

// Episode sets used by evaluation: validation split only.
std::vector<Episode> adherence_episodes(const RunConfig& cfg, const WorldSpec& spec);
std::vector<Episode> drift_episodes(const RunConfig& cfg, const WorldSpec& spec);
Tensor conditioning_frame(const Episode& ep, const ModelConfig& mc);

EvalMetrics evaluate(const RunConfig& cfg, const WorldSpec& spec, const Model& model, const SamplerConfig& sampler,
                     const Embedder& embed);

struct AblationRow {
  std::string label;
  Variant variant;
  SampleMode mode = SampleMode::future_guided;
  bool present = false;
  EvalMetrics metrics;
};
std::vector<AblationRow> ablation_grid();
// Evaluates every row; rows whose checkpoint is absent stay `present = false`
// unless `train_missing` is set.
std::vector<AblationRow> run_ablation(const RunConfig& cfg, bool train_missing, const ProgressFn& progress = {});
void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows, const std::string& config_hash);

struct BenchRow {
  std::size_t frames = 0;
  bool cached = true;
  double seconds = 0.0;
  double chunks_per_second = 0.0;
  double first_chunk_seconds = 0.0;
};
std::vector<BenchRow> bench(const Model& model, const SamplerConfig& base, const Tensor& frame0,
                            const PromptSchedule& schedule, const std::vector<std::size_t>& frame_counts,
                            std::size_t repeats);

// Runs fn(i) for i in [0, n) on at most `workers` threads; rethrows the first error.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// Prompt schedule and update files (JSON).
PromptSchedule read_schedule(const std::string& path);
std::vector<PromptUpdate> read_updates(const std::string& path);

}  // namespace kfs
