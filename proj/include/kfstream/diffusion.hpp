#pragma once

#include <functional>
#include <random>
#include <vector>

#include "kfstream/tensor.hpp"

namespace kfs {

// Descending noise levels visited by the few-step sampler; the last step
// integrates from levels.back() to 0.
struct StepSchedule {
  std::vector<double> levels{1.0, 0.75, 0.5, 0.25};
  void validate() const;
};

// Rows are grouped per frame: frame f owns rows [f*patches, (f+1)*patches).
Tensor interpolate(const Tensor& clean, const Tensor& noise, const std::vector<double>& levels, std::size_t patches);
Tensor target_velocity(const Tensor& clean, const Tensor& noise);
// x0 = x_t - t * v, per frame.
Tensor clean_estimate(const Tensor& noisy, const Tensor& velocity, const std::vector<double>& levels,
                      std::size_t patches);

Tensor gaussian(std::mt19937_64& rng, Shape shape, double stddev = 1.0);

// Velocity prediction for the current state and per-frame levels.
using VelocityFn = std::function<Tensor(const Tensor& x, const std::vector<double>& levels)>;

// Euler integration over the schedule. Frames flagged in `frozen` are held at
// level 0 and never updated (the conditioning frame).
Tensor few_step_denoise(const VelocityFn& velocity, Tensor init, const StepSchedule& schedule, std::size_t patches,
                        const std::vector<bool>& frozen = {});

}  // namespace kfs
