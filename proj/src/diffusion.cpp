#include "kfstream/diffusion.hpp"

#include <stdexcept>
#include <string>

namespace kfs {

namespace {

std::size_t frames_of(const Tensor& x, std::size_t patches) {
  if (x.rank() != 2 || patches == 0 || x.rows() % patches != 0) {
    throw DimensionError("latent tensor rows must be a multiple of the patch count");
  }
  return x.rows() / patches;
}

void check_levels(const std::vector<double>& levels, std::size_t frames) {
  if (levels.size() != frames) {
    throw DimensionError("expected " + std::to_string(frames) + " noise levels, got " + std::to_string(levels.size()));
  }
  for (double t : levels)
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("noise level " + std::to_string(t) + " outside [0,1]");
}

}  // namespace

void StepSchedule::validate() const {
  if (levels.empty()) throw std::invalid_argument("step schedule is empty");
  if (levels.front() != 1.0) throw std::invalid_argument("step schedule must start at level 1");
  for (std::size_t i = 1; i < levels.size(); ++i) {
    if (!(levels[i] < levels[i - 1])) throw std::invalid_argument("step schedule must be strictly descending");
  }
  if (!(levels.back() > 0.0)) throw std::invalid_argument("step schedule levels must be in (0,1]");
}

Tensor interpolate(const Tensor& clean, const Tensor& noise, const std::vector<double>& levels, std::size_t patches) {
  if (clean.shape() != noise.shape()) throw DimensionError("interpolate: clean/noise shape mismatch");
  const auto frames = frames_of(clean, patches);
  check_levels(levels, frames);
  auto out = clean;
  const auto row = patches * clean.cols();
  for (std::size_t f = 0; f < frames; ++f) {
    const double t = levels[f];
    for (std::size_t i = f * row; i < (f + 1) * row; ++i) out[i] = (1.0 - t) * clean[i] + t * noise[i];
  }
  return out;
}

Tensor target_velocity(const Tensor& clean, const Tensor& noise) {
  if (clean.shape() != noise.shape()) throw DimensionError("target_velocity: shape mismatch");
  auto v = noise;
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= clean[i];
  return v;
}

Tensor clean_estimate(const Tensor& noisy, const Tensor& velocity, const std::vector<double>& levels,
                      std::size_t patches) {
  if (noisy.shape() != velocity.shape()) throw DimensionError("clean_estimate: shape mismatch");
  const auto frames = frames_of(noisy, patches);
  check_levels(levels, frames);
  auto out = noisy;
  const auto row = patches * noisy.cols();
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t i = f * row; i < (f + 1) * row; ++i) out[i] -= levels[f] * velocity[i];
  return out;
}

Tensor gaussian(std::mt19937_64& rng, Shape shape, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor few_step_denoise(const VelocityFn& velocity, Tensor init, const StepSchedule& schedule, std::size_t patches,
                        const std::vector<bool>& frozen) {
  schedule.validate();
  const auto frames = frames_of(init, patches);
  if (!frozen.empty() && frozen.size() != frames) throw DimensionError("few_step_denoise: frozen flags per frame");
  auto is_frozen = [&](std::size_t f) { return !frozen.empty() && frozen[f]; };
  auto x = std::move(init);
  const auto row = patches * x.cols();
  for (std::size_t s = 0; s < schedule.levels.size(); ++s) {
    const double ta = schedule.levels[s];
    const double tb = s + 1 < schedule.levels.size() ? schedule.levels[s + 1] : 0.0;
    std::vector<double> levels(frames, ta);
    for (std::size_t f = 0; f < frames; ++f)
      if (is_frozen(f)) levels[f] = 0.0;
    auto v = velocity(x, levels);
    if (v.shape() != x.shape()) throw DimensionError("few_step_denoise: velocity shape mismatch");
    if (!v.is_finite()) throw NumericalError("few_step_denoise: non-finite velocity");
    for (std::size_t f = 0; f < frames; ++f) {
      if (is_frozen(f)) continue;
      for (std::size_t i = f * row; i < (f + 1) * row; ++i) x[i] += (tb - ta) * v[i];
    }
  }
  return x;
}

}  // namespace kfs
