#include "rpdac/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace rpdac {

void TrainConfig::validate() const {
  if (miniBatch == 0 || accumSteps == 0) throw std::invalid_argument("miniBatch and accumSteps must be positive");
  if (!(warmupFraction > 0.0 && warmupFraction < 1.0))
    throw std::invalid_argument("warmupFraction must lie in (0, 1)");
  if (!(peakLr > 0.0)) throw std::invalid_argument("peakLr must be positive");
  if (!(finalLrFactor > 0.0)) throw std::invalid_argument("finalLrFactor must be positive");
}

std::size_t warmupSteps(std::size_t totalSteps, const TrainConfig& cfg) {
  if (totalSteps < 3) return 0;
  const auto w = static_cast<std::size_t>(std::llround(cfg.warmupFraction * static_cast<double>(totalSteps)));
  return std::clamp<std::size_t>(w, 1, totalSteps - 2);
}

double oneCycleLr(std::size_t step, std::size_t totalSteps, const TrainConfig& cfg) {
  if (step >= totalSteps)
    throw std::out_of_range("lr step " + std::to_string(step) + " outside schedule of " +
                            std::to_string(totalSteps));
  const double peak = cfg.peakLr;
  const double initial = peak / 25.0;
  const double last = peak * cfg.finalLrFactor;
  if (totalSteps < 3) return step == 0 ? initial : last;
  const std::size_t warm = warmupSteps(totalSteps, cfg);
  if (step <= warm) return std::lerp(initial, peak, static_cast<double>(step) / static_cast<double>(warm));
  const double t = static_cast<double>(step - warm) / static_cast<double>(totalSteps - 1 - warm);
  return std::lerp(last, peak, 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

AdamWConfig adamwConfigFrom(const TrainConfig& cfg) {
  return AdamWConfig{cfg.beta1, cfg.beta2, cfg.adamEps, cfg.weightDecay};
}

void adamwStep(std::vector<NamedParameter>& params, OptimizerState& state, double lr, const AdamWConfig& cfg) {
  for (const auto& p : params) {
    if (!p.tensor.hasGrad()) continue;
    for (double g : p.tensor.grad())
      if (!std::isfinite(g)) throw NonFiniteGradient(p.name);
  }
  if (state.firstMoment.size() != params.size()) {
    state.firstMoment.clear();
    state.secondMoment.clear();
    for (const auto& p : params) {
      state.firstMoment.emplace_back(p.tensor.size(), 0.0);
      state.secondMoment.emplace_back(p.tensor.size(), 0.0);
    }
  }
  ++state.step;
  const double bias1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto values = p.tensor.data();
    auto grad = p.tensor.grad();
    const bool hasGrad = !grad.empty();
    auto& m = state.firstMoment[k];
    auto& v = state.secondMoment[k];
    if (m.size() != values.size()) throw std::logic_error("optimizer state shape mismatch for " + p.name);
    const double decay = p.decay ? 1.0 - lr * cfg.weightDecay : 1.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = hasGrad ? grad[i] : 0.0;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double mHat = m[i] / bias1;
      const double vHat = v[i] / bias2;
      values[i] = values[i] * decay - lr * mHat / (std::sqrt(vHat) + cfg.eps);
    }
  }
}

}  // namespace rpdac
