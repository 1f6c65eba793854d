#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rpdac/dataset.hpp"
#include "rpdac/detector.hpp"
#include "rpdac/optim.hpp"
#include "rpdac/rpdac.hpp"
#include "rpdac/stain.hpp"

namespace rpdac {

struct AugmentConfig {
  bool stain = true;
  bool geometric = true;
  bool filter = true;
  GeometricOptions geometricOptions;
  FilterOptions filterOptions;
  bool operator==(const AugmentConfig&) const = default;
};

using DomainKey = std::pair<int, int>;  // (scanner, tissue)
using ProfileMap = std::map<DomainKey, StainProfile>;

struct TrainerOptions {
  TrainConfig train;
  AugmentConfig augment;
  /// Off: plain detector training (no step 1, no agnostic term).
  bool useDac = true;
  double agnosticWeight = 1.0;
  bool dacStepFirst = true;
  std::size_t workers = 1;
  std::size_t checkpointEvery = 0;
  std::filesystem::path outDir;
  std::size_t logEvery = 0;  // progress lines on stderr; 0 = silent
};

/// Detector, DAC and prototype banks trained together.
struct Model {
  Model(const DetectorConfig& det, const DacHeadConfig& dac, std::uint64_t seed);

  Detector detector;
  DacModel dac;
  std::vector<PrototypeBank> banks;

  /// DAC layer weights followed by prototypes.
  std::vector<NamedParameter> dacParameters();
  /// Everything, for checkpoints.
  std::vector<NamedParameter> allParameters();
};

struct TrainSample {
  RgbImage image;
  std::vector<Point> points;
  DomainLabel label;
  bool labeled = true;
  int regionId = 0;
};

TrainSample toSample(const AnnotatedRegion& region);

struct StepMetrics {
  double dacLoss = 0.0;
  double detLoss = 0.0;
  double agnosticLoss = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Owns the two optimizers and implements the two alternating updates.
class Trainer {
 public:
  Trainer(Model& model, const TrainerOptions& opts);

  /// DAC layers + prototypes only, from unaugmented samples. The loss of each
  /// mini-batch is normalized by the total sample count so accumulation over
  /// mini-batches equals one update on the concatenated batch.
  StepMetrics step1DacUpdate(std::span<const std::vector<TrainSample>> miniBatches, double lr);
  /// Detector weights only: detection loss (labeled samples) plus the
  /// agnostic term (all samples) with prototypes and DAC layers frozen.
  StepMetrics step2DetectorUpdate(std::span<const std::vector<TrainSample>> miniBatches, double lr);

  AdamW& detectorOptimizer() { return detOpt_; }
  AdamW& dacOptimizer() { return dacOpt_; }

 private:
  Model& model_;
  TrainerOptions opts_;
  AdamW detOpt_;
  AdamW dacOpt_;
};

struct IterationMetrics {
  std::size_t iteration = 0;
  double lr = 0.0;
  double dacLoss = 0.0;
  double detLoss = 0.0;
  double agnosticLoss = 0.0;
  std::vector<double> gateSigmoids;
  std::string prototypeDigest;
  std::string stepOrder;
};

/// One JSON object, no trailing newline.
std::string toJsonLine(const IterationMetrics& m);

/// Applies the stain (profile of the sample's scanner/tissue, if present),
/// geometric and blur/sharpen augmentations, in that order.
TrainSample augmentSample(const TrainSample& sample, const ProfileMap& profiles, const AugmentConfig& cfg,
                          const StainMatrix& stains, std::uint64_t seed);

std::size_t totalIterations(const TrainConfig& cfg, std::size_t datasetSize);

struct TrainResult {
  std::vector<IterationMetrics> log;
  /// Region ids in the order they entered training batches (with repeats).
  std::vector<int> regionsSeen;
};

/// Alternating optimization over `samples`. Writes one JSON line per
/// iteration to `metricsLog` when given; saves checkpoints into
/// opts.outDir every `checkpointEvery` iterations and at the end (when
/// outDir is set). A non-finite loss aborts with TrainingDiverged after
/// writing `diverged.ckpt`.
TrainResult trainLoop(Model& model, std::span<const TrainSample> samples, const ProfileMap& profiles,
                      const TrainerOptions& opts, std::ostream* metricsLog = nullptr);

/// Runs `fn(i)` for i in [0, n) on up to `workers` threads.
template <class Fn>
void parallelFor(std::size_t n, std::size_t workers, Fn&& fn);

}  // namespace rpdac

#include <thread>

namespace rpdac {

template <class Fn>
void parallelFor(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
}

}  // namespace rpdac
