#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "rpdac/nn.hpp"

namespace rpdac {

struct TrainConfig {
  std::size_t epochs = 800;
  /// When non-zero, overrides epochs as the number of alternating iterations.
  std::size_t iterations = 0;
  std::size_t miniBatch = 8;
  std::size_t accumSteps = 8;
  double peakLr = 0.002;
  double warmupFraction = 0.05;
  double finalLrFactor = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adamEps = 1e-8;
  double weightDecay = 0.01;
  std::uint64_t seed = 0;

  std::size_t batchSize() const { return miniBatch * accumSteps; }
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Linear warmup from peakLr/25 to peakLr over round(warmupFraction *
/// totalSteps) steps, then cosine decay reaching peakLr * finalLrFactor at
/// step totalSteps - 1. Throws std::out_of_range outside [0, totalSteps).
double oneCycleLr(std::size_t step, std::size_t totalSteps, const TrainConfig& cfg);
std::size_t warmupSteps(std::size_t totalSteps, const TrainConfig& cfg);

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& parameter)
      : std::runtime_error("non-finite gradient in parameter " + parameter), parameter_(parameter) {}
  const std::string& parameter() const { return parameter_; }

 private:
  std::string parameter_;
};

struct OptimizerState {
  std::vector<std::vector<double>> firstMoment;
  std::vector<std::vector<double>> secondMoment;
  std::size_t step = 0;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weightDecay = 0.01;
};

AdamWConfig adamwConfigFrom(const TrainConfig& cfg);

/// Decoupled-weight-decay Adam on each parameter's accumulated grad (absent
/// grads count as zero). Parameters with `decay == false` skip weight decay.
/// All grads are validated before anything is modified.
void adamwStep(std::vector<NamedParameter>& params, OptimizerState& state, double lr, const AdamWConfig& cfg);

class AdamW {
 public:
  AdamW(std::vector<NamedParameter> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {}

  void step(double lr) { adamwStep(params_, state_, lr, cfg_); }
  void zeroGrad() { zeroGrads(params_); }

  std::vector<NamedParameter>& parameters() { return params_; }
  const OptimizerState& state() const { return state_; }

 private:
  std::vector<NamedParameter> params_;
  AdamWConfig cfg_;
  OptimizerState state_;
};

}  // namespace rpdac
