#include <map>

#include "doctest.h"
#include "kfstream/diffusion.hpp"
#include "support.hpp"

using namespace kfs;
using kfs::testing::random_tensor;

TEST_CASE("interpolate endpoints and midpoint") {
  std::mt19937_64 rng(1);
  auto clean = random_tensor(rng, {6, 3});
  auto noise = random_tensor(rng, {6, 3});
  CHECK(interpolate(clean, noise, {0, 0, 0}, 2) == clean);
  CHECK(interpolate(clean, noise, {1, 1, 1}, 2) == noise);
  auto mid = interpolate(clean, noise, {0.5, 0.5, 0.5}, 2);
  for (std::size_t i = 0; i < mid.size(); ++i) CHECK(mid[i] == doctest::Approx(0.5 * (clean[i] + noise[i])));
  CHECK_THROWS_AS(interpolate(clean, noise, {0, 1.2, 0}, 2), std::invalid_argument);
  CHECK_THROWS_AS(interpolate(clean, noise, {0, 1}, 2), DimensionError);
  CHECK_THROWS_AS(interpolate(clean, random_tensor(rng, {6, 2}), {0, 0, 0}, 2), DimensionError);
}

TEST_CASE("changing one frame's level only changes that frame") {
  std::mt19937_64 rng(2);
  auto clean = random_tensor(rng, {8, 2});
  auto noise = random_tensor(rng, {8, 2});
  std::vector<double> levels{0.1, 0.3, 0.5, 0.7};
  auto base = interpolate(clean, noise, levels, 2);
  for (std::size_t j = 0; j < 4; ++j) {
    auto l2 = levels;
    l2[j] = 0.95;
    auto x = interpolate(clean, noise, l2, 2);
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 2; ++c) {
        if (r / 2 == j) CHECK(x.at(r, c) != base.at(r, c));
        else CHECK(x.at(r, c) == base.at(r, c));
      }
  }
}

TEST_CASE("target velocity is the time derivative of the path") {
  std::mt19937_64 rng(3);
  auto clean = random_tensor(rng, {4, 3});
  auto noise = random_tensor(rng, {4, 3});
  CHECK(l2_norm(target_velocity(clean, clean)) == 0.0);
  CHECK(target_velocity(Tensor::zeros({4, 3}), noise) == noise);
  const auto v = target_velocity(clean, noise);
  const double h = 1e-6;
  for (double t : {0.2, 0.5, 0.8}) {
    auto up = interpolate(clean, noise, std::vector<double>(4, t + h), 1);
    auto down = interpolate(clean, noise, std::vector<double>(4, t - h), 1);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::abs((up[i] - down[i]) / (2 * h) - v[i]) <= 1e-8);
  }
}

TEST_CASE("schedule validation") {
  CHECK_NOTHROW(StepSchedule{}.validate());
  CHECK_NOTHROW(StepSchedule{{1.0}}.validate());
  CHECK_THROWS(StepSchedule{{}}.validate());
  CHECK_THROWS(StepSchedule{{0.9, 0.5}}.validate());
  CHECK_THROWS(StepSchedule{{1.0, 0.5, 0.5}}.validate());
  CHECK_THROWS(StepSchedule{{1.0, 0.5, 0.0}}.validate());
}

TEST_CASE("oracle velocity recovers the clean latents for every schedule") {
  std::mt19937_64 rng(4);
  auto clean = random_tensor(rng, {6, 4});
  auto noise = random_tensor(rng, {6, 4});
  // The exact field of the linear path: v = noise - clean everywhere.
  VelocityFn oracle = [&](const Tensor&, const std::vector<double>&) { return target_velocity(clean, noise); };
  for (const auto& levels : std::vector<std::vector<double>>{{1.0}, {1.0, 0.5}, {1.0, 0.75, 0.5, 0.25}, {1.0, 0.9, 0.1}}) {
    auto out = few_step_denoise(oracle, noise, StepSchedule{levels}, 2);
    CHECK(max_abs_diff(out, clean) <= 1e-12);
  }
}

TEST_CASE("single step schedule is x1 - v(x1, 1)") {
  std::mt19937_64 rng(5);
  auto x1 = random_tensor(rng, {3, 2});
  auto fixed = random_tensor(rng, {3, 2});
  std::vector<double> seen;
  VelocityFn f = [&](const Tensor&, const std::vector<double>& levels) {
    seen = levels;
    return fixed;
  };
  auto out = few_step_denoise(f, x1, StepSchedule{{1.0}}, 1);
  CHECK(seen == std::vector<double>{1, 1, 1});
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == x1[i] - fixed[i]);
}

TEST_CASE("frozen frames are held at level 0") {
  std::mt19937_64 rng(6);
  auto init = random_tensor(rng, {3, 2});
  std::vector<std::vector<double>> calls;
  VelocityFn f = [&](const Tensor& x, const std::vector<double>& levels) {
    calls.push_back(levels);
    return Tensor::full(x.shape(), 1.0);
  };
  auto out = few_step_denoise(f, init, StepSchedule{}, 1, {true, false, false});
  REQUIRE(calls.size() == 4);
  for (const auto& l : calls) CHECK(l[0] == 0.0);
  CHECK(calls[2][1] == 0.5);
  for (std::size_t c = 0; c < 2; ++c) {
    CHECK(out.at(0, c) == init.at(0, c));
    CHECK(out.at(1, c) == doctest::Approx(init.at(1, c) - 1.0));
  }
  VelocityFn bad = [](const Tensor& x, const std::vector<double>&) {
    auto t = Tensor::zeros(x.shape());
    t[0] = std::nan("");
    return t;
  };
  CHECK_THROWS_AS(few_step_denoise(bad, init, StepSchedule{}, 1), NumericalError);
}

TEST_CASE("a fitted 1-D velocity model samples the data distribution") {
  // Data N(2, 0.5^2). The model is a per-level linear regression v = a x + b
  // trained on (x_t, noise - clean) pairs. The regression learns the
  // conditional mean field, whose Euler integration needs a fine schedule.
  const double mu = 2.0, sd = 0.5;
  std::mt19937_64 rng(7);
  std::normal_distribution<double> data(mu, sd), unit(0.0, 1.0);
  StepSchedule schedule{{}};
  for (int k = 32; k > 0; --k) schedule.levels.push_back(k / 32.0);
  std::map<double, std::pair<double, double>> fit;
  for (double t : schedule.levels) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
      const double x0 = data(rng), e = unit(rng);
      const double x = (1 - t) * x0 + t * e, y = e - x0;
      sx += x;
      sy += y;
      sxx += x * x;
      sxy += x * y;
    }
    const double a = (sxy - sx * sy / n) / (sxx - sx * sx / n);
    fit[t] = {a, (sy - a * sx) / n};
  }
  VelocityFn model = [&](const Tensor& x, const std::vector<double>& levels) {
    auto v = x;
    const auto [a, b] = fit.at(levels[0]);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a * x[i] + b;
    return v;
  };
  const std::size_t samples = 10000;
  auto out = few_step_denoise(model, gaussian(rng, {samples, 1}), schedule, samples);
  double m = 0, s2 = 0;
  for (std::size_t i = 0; i < samples; ++i) m += out[i] / samples;
  for (std::size_t i = 0; i < samples; ++i) s2 += (out[i] - m) * (out[i] - m) / (samples - 1);
  CHECK(std::abs(m - mu) <= 0.1 * mu);
  CHECK(std::abs(std::sqrt(s2) - sd) <= 0.1 * sd);
}
