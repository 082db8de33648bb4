#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "kfstream/model.hpp"
#include "kfstream/tensor.hpp"

namespace kfs {

struct WorldParams {
  std::size_t state_dim = 16;
  std::size_t num_steps = 8;
  std::size_t num_tasks = 4;
  std::size_t steps_per_task = 4;
  double noise_std = 0.02;  // process noise added at every transition
  double scene_std = 1.5;   // per-episode constant offset
  double goal_std = 1.0;
  double init_std = 0.3;
  double rho_min = 0.8;
  double rho_max = 0.9;
  double rotation = 0.5;  // scale of the rotation angles in each step matrix
  std::size_t min_segment = 6;
  std::uint64_t seed = 1;
  int global_token_base = 0;
  int local_token_base = 16;

  std::map<std::string, std::string> to_kv() const;
  static WorldParams from_kv(const std::map<std::string, std::string>& kv);
};

// One step of the procedure: s' = A s + b + noise with A = rho * Q, Q a
// rotation. b = (I - A) goal, so the state contracts toward `goal` while rotating.
struct StepDynamics {
  Tensor A;     // [d x d]
  Tensor b;     // [d]
  Tensor goal;  // [d]
  double rho = 0.0;
};

struct WorldSpec {
  WorldParams params;
  std::vector<StepDynamics> steps;
  std::vector<std::vector<int>> tasks;  // allowed step ids per task

  static WorldSpec generate(const WorldParams& params);
  int global_token(std::size_t task) const { return params.global_token_base + static_cast<int>(task); }
  int local_token(std::size_t step) const { return params.local_token_base + static_cast<int>(step); }
  // Step id for a local token, or -1.
  int step_of_token(int token) const;
  double spectral_radius(std::size_t step) const;
};

struct Episode {
  Tensor frames;  // [T x d]
  PromptSchedule schedule;
  std::vector<int> labels;  // active step per frame
  std::vector<int> segment_steps;
  std::size_t task = 0;
  std::uint64_t seed = 0;
  Tensor scene;  // [d]

  std::size_t num_frames() const { return frames.rows(); }
};

Episode generate_episode(const WorldSpec& spec, std::mt19937_64& rng, std::size_t num_frames,
                         std::size_t num_segments);
// Deterministic episode for a seed (same seed, same episode).
Episode episode_for_seed(const WorldSpec& spec, std::uint64_t seed, std::size_t num_frames, std::size_t num_segments);
// 9:1 split keyed on the episode seed.
bool is_validation_seed(std::uint64_t seed);
// The n-th seed (n = 0, 1, ...) that falls in the requested split.
std::uint64_t split_seed(std::uint64_t base, std::size_t n, bool validation);

void write_episode(const std::string& path, const WorldSpec& spec, const Episode& ep);
Episode read_episode(const std::string& path, WorldParams* params = nullptr);

// Frame embedding used by drift and smoothness metrics.
using Embedder = std::function<std::vector<double>(const Tensor& frame)>;
Embedder raw_state_embedder();

struct DriftReport {
  std::vector<double> curve;
  double average = 0.0;
  double max = 0.0;
  double ratio = 0.0;         // slope of the linear fit
  double acceleration = 0.0;  // quadratic coefficient of the degree-2 fit
};

double cosine_distance(const std::vector<double>& a, const std::vector<double>& b);
DriftReport drift_report(const Tensor& video, const Embedder& embed, std::size_t every = 10);
// Least-squares polynomial coefficients (c0, c1, ...) of y against x.
std::vector<double> polyfit(const std::vector<double>& x, const std::vector<double>& y, std::size_t degree);

struct StepFit {
  int best_step = -1;  // -1 when the best residual is tied
  std::vector<double> residuals;
};
// Scores every step hypothesis on frames [begin, end) using transitions whose
// target frame lies in the range. The per-hypothesis constant absorbs the scene.
StepFit fit_step(const WorldSpec& spec, const Tensor& video, std::size_t begin, std::size_t end);

struct AdherenceResult {
  double fraction = 0.0;
  std::size_t scored = 0;
  std::size_t matched = 0;
  std::vector<std::size_t> skipped;  // segments shorter than 2 frames
};
AdherenceResult segment_adherence(const WorldSpec& spec, const Tensor& video, const PromptSchedule& schedule);

double smoothness(const Tensor& video, const Embedder& embed);

// 2-D PCA projection of the frames, drawn as a connected trajectory.
void render_projection_png(const std::string& path, const Tensor& video, const std::vector<int>& labels,
                           std::size_t size = 256);

}  // namespace kfs
