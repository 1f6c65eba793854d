#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "rpdac/optim.hpp"

using namespace rpdac;

namespace {

std::vector<NamedParameter> oneParam(std::vector<double> values, bool decay = true) {
  const std::size_t n = values.size();
  return {{"w", Tensor::fromData({n}, std::move(values), true), decay}};
}

void setGrad(NamedParameter& p, const std::vector<double>& g) {
  auto dst = p.tensor.mutableGrad();
  std::copy(g.begin(), g.end(), dst.begin());
}

}  // namespace

TEST(Schedule, EndpointsAndPeakAreExact) {
  const TrainConfig cfg;
  const std::size_t total = 1000;
  EXPECT_EQ(oneCycleLr(0, total, cfg), 0.002 / 25.0);
  EXPECT_NEAR(oneCycleLr(0, total, cfg), 8e-5, 1e-20);
  const std::size_t warm = warmupSteps(total, cfg);
  EXPECT_EQ(warm, 50u);
  EXPECT_EQ(oneCycleLr(warm, total, cfg), 0.002);
  EXPECT_NEAR(oneCycleLr(total - 1, total, cfg), 2e-7, 1e-20);
  double peak = 0.0;
  for (std::size_t s = 0; s < total; ++s) peak = std::max(peak, oneCycleLr(s, total, cfg));
  EXPECT_EQ(peak, 0.002);
  EXPECT_THROW(oneCycleLr(total, total, cfg), std::out_of_range);
}

TEST(Schedule, WarmupIsLinearAndDecayMonotone) {
  const TrainConfig cfg;
  const std::size_t total = 400, warm = warmupSteps(total, cfg);
  for (std::size_t s = 0; s <= warm; ++s)
    EXPECT_NEAR(oneCycleLr(s, total, cfg), 8e-5 + (0.002 - 8e-5) * double(s) / double(warm), 1e-15);
  for (std::size_t s = warm + 1; s < total; ++s) EXPECT_LE(oneCycleLr(s, total, cfg), oneCycleLr(s - 1, total, cfg));
}

TEST(AdamW, ZeroGradientNoDecayIsNoOp) {
  auto params = oneParam({0.5, -1.5, 2.0});
  setGrad(params[0], {0, 0, 0});
  OptimizerState state;
  adamwStep(params, state, 0.01, AdamWConfig{0.9, 0.999, 1e-8, 0.0});
  EXPECT_EQ(params[0].tensor[0], 0.5);
  EXPECT_EQ(params[0].tensor[1], -1.5);
  EXPECT_EQ(params[0].tensor[2], 2.0);
}

TEST(AdamW, DecoupledDecayOnly) {
  auto params = oneParam({0.5, -1.5});
  setGrad(params[0], {0, 0});
  OptimizerState state;
  adamwStep(params, state, 0.1, AdamWConfig{});
  EXPECT_NEAR(params[0].tensor[0], 0.5 * (1 - 0.1 * 0.01), 1e-15);
  EXPECT_NEAR(params[0].tensor[1], -1.5 * (1 - 0.1 * 0.01), 1e-15);

  auto frozen = oneParam({0.5}, false);
  setGrad(frozen[0], {0});
  OptimizerState s2;
  adamwStep(frozen, s2, 0.1, AdamWConfig{});
  EXPECT_EQ(frozen[0].tensor[0], 0.5);
}

TEST(AdamW, ConstantGradientApproachesSignStep) {
  auto params = oneParam({0.0, 0.0});
  OptimizerState state;
  const double lr = 1e-3;
  double prev[2] = {0, 0};
  for (int it = 0; it < 2000; ++it) {
    setGrad(params[0], {0.3, -2.0});
    prev[0] = params[0].tensor[0];
    prev[1] = params[0].tensor[1];
    adamwStep(params, state, lr, AdamWConfig{0.9, 0.999, 1e-8, 0.0});
    params[0].tensor.zeroGrad();
  }
  EXPECT_NEAR(params[0].tensor[0] - prev[0], -lr, 1e-3 * lr);
  EXPECT_NEAR(params[0].tensor[1] - prev[1], lr, 1e-3 * lr);
}

TEST(AdamW, MatchesReferenceRecurrence) {
  Rng rng(1);
  std::vector<double> w(5), m(5, 0.0), v(5, 0.0);
  for (auto& x : w) x = rng.uniform(-1, 1);
  auto params = oneParam(w);
  OptimizerState state;
  const AdamWConfig cfg{0.9, 0.999, 1e-8, 0.01};
  for (int t = 1; t <= 20; ++t) {
    std::vector<double> g(5);
    for (auto& x : g) x = rng.uniform(-1, 1);
    const double lr = 0.01 / t;
    setGrad(params[0], g);
    adamwStep(params, state, lr, cfg);
    params[0].tensor.zeroGrad();
    for (std::size_t i = 0; i < 5; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      w[i] -= lr * 0.01 * w[i];
      w[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(params[0].tensor[i], w[i], 1e-14);
  }
  EXPECT_EQ(state.step, 20u);
}

TEST(AdamW, NonFiniteGradientAbortsBeforeAnyChange) {
  std::vector<NamedParameter> params{{"a", Tensor::fromData({2}, {1, 2}, true), true},
                                     {"b.weight", Tensor::fromData({1}, {3}, true), true}};
  setGrad(params[0], {0.5, 0.5});
  setGrad(params[1], {std::numeric_limits<double>::quiet_NaN()});
  OptimizerState state;
  try {
    adamwStep(params, state, 0.1, AdamWConfig{});
    FAIL() << "expected NonFiniteGradient";
  } catch (const NonFiniteGradient& e) {
    EXPECT_EQ(e.parameter(), "b.weight");
    EXPECT_NE(std::string(e.what()).find("b.weight"), std::string::npos);
  }
  EXPECT_EQ(params[0].tensor[0], 1.0);
  EXPECT_EQ(params[0].tensor[1], 2.0);
  EXPECT_EQ(params[1].tensor[0], 3.0);
  EXPECT_EQ(state.step, 0u);
}

TEST(TrainConfig, ValidateRejectsBadValues) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.batchSize(), 64u);
  cfg.miniBatch = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.peakLr = -1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
