#include "rpdac/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>

#include "json.hpp"

namespace rpdac {

Model::Model(const DetectorConfig& det, const DacHeadConfig& dacCfg, std::uint64_t seed)
    : detector(det, deriveSeed(seed, 1)),
      dac(detector.totalTapChannels(), dacCfg, deriveSeed(seed, 2)),
      banks(makeBanks(dacCfg)) {}

std::vector<NamedParameter> Model::dacParameters() {
  auto params = dac.parameters();
  for (auto& p : prototypeParameters(banks)) params.push_back(std::move(p));
  return params;
}

std::vector<NamedParameter> Model::allParameters() {
  auto params = detector.parameters();
  for (auto& p : dacParameters()) params.push_back(std::move(p));
  return params;
}

TrainSample toSample(const AnnotatedRegion& region) {
  return TrainSample{region.image, region.points, region.label, region.labeled, region.id};
}

// ---- Trainer --------------------------------------------------------------

Trainer::Trainer(Model& model, const TrainerOptions& opts)
    : model_(model),
      opts_(opts),
      detOpt_(model.detector.parameters(), adamwConfigFrom(opts.train)),
      dacOpt_(model.dacParameters(), adamwConfigFrom(opts.train)) {}

namespace {

std::size_t countSamples(std::span<const std::vector<TrainSample>> miniBatches) {
  std::size_t n = 0;
  for (const auto& b : miniBatches) n += b.size();
  if (n == 0) throw std::invalid_argument("training step needs at least one sample");
  return n;
}

}  // namespace

StepMetrics Trainer::step1DacUpdate(std::span<const std::vector<TrainSample>> miniBatches, double lr) {
  const double n = static_cast<double>(countSamples(miniBatches));
  StepMetrics metrics;
  auto& detParams = detOpt_.parameters();
  auto& dacParams = dacOpt_.parameters();
  setTrainable(detParams, false);
  setTrainable(dacParams, true);
  dacOpt_.zeroGrad();
  for (const auto& batch : miniBatches) {
    if (batch.empty()) continue;
    Graph g;
    std::vector<DacPrediction> preds;
    std::vector<DomainLabel> labels;
    for (const auto& s : batch) {
      Graph frozen(false);
      const DetectorOutput out = model_.detector.forward(frozen, s.image);
      preds.push_back(model_.dac.forward(g, out.taps));
      labels.push_back(s.label);
    }
    Tensor loss = dacLoss(g, model_.banks, preds, labels, n);
    metrics.dacLoss += loss.item();
    g.backward(loss);
  }
  if (!std::isfinite(metrics.dacLoss)) throw TrainingDiverged("non-finite DAC loss");
  dacOpt_.step(lr);
  dacOpt_.zeroGrad();
  setTrainable(detParams, true);
  return metrics;
}

StepMetrics Trainer::step2DetectorUpdate(std::span<const std::vector<TrainSample>> miniBatches, double lr) {
  const double n = static_cast<double>(countSamples(miniBatches));
  StepMetrics metrics;
  auto& detParams = detOpt_.parameters();
  auto& dacParams = dacOpt_.parameters();
  setTrainable(dacParams, false);
  setTrainable(detParams, true);
  detOpt_.zeroGrad();
  for (const auto& batch : miniBatches) {
    if (batch.empty()) continue;
    Graph g;
    std::vector<Tensor> detTerms;
    std::vector<DacPrediction> preds;
    for (const auto& s : batch) {
      const DetectorOutput out = model_.detector.forward(g, s.image);
      if (s.labeled) detTerms.push_back(detectionLoss(g, out.pred, s.points));
      if (opts_.useDac) preds.push_back(model_.dac.forward(g, out.taps));
    }
    std::vector<Tensor> parts;
    if (!detTerms.empty()) {
      Tensor det = scale(g, sumScalars(g, detTerms), 1.0 / n);
      metrics.detLoss += det.item();
      parts.push_back(det);
    }
    if (opts_.useDac) {
      Tensor agn = agnosticLoss(g, model_.banks, preds, n);
      metrics.agnosticLoss += agn.item();
      parts.push_back(opts_.agnosticWeight == 1.0 ? agn : scale(g, agn, opts_.agnosticWeight));
    }
    if (parts.empty()) continue;
    Tensor loss = sumScalars(g, parts);
    g.backward(loss);
  }
  if (!std::isfinite(metrics.detLoss) || !std::isfinite(metrics.agnosticLoss))
    throw TrainingDiverged("non-finite detector loss");
  detOpt_.step(lr);
  detOpt_.zeroGrad();
  setTrainable(dacParams, true);
  return metrics;
}

// ---- loop -----------------------------------------------------------------

std::string toJsonLine(const IterationMetrics& m) {
  nlohmann::json j;
  j["iteration"] = m.iteration;
  j["lr"] = m.lr;
  j["dac_loss"] = m.dacLoss;
  j["det_loss"] = m.detLoss;
  j["agnostic_loss"] = m.agnosticLoss;
  j["gate_sigmoids"] = m.gateSigmoids;
  j["prototype_coords_digest"] = m.prototypeDigest;
  j["step_order"] = m.stepOrder;
  return j.dump();
}

TrainSample augmentSample(const TrainSample& sample, const ProfileMap& profiles, const AugmentConfig& cfg,
                          const StainMatrix& stains, std::uint64_t seed) {
  Rng rng(seed);
  TrainSample out = sample;
  if (cfg.stain) {
    auto it = profiles.find({sample.label.scanner, sample.label.tissue});
    if (it != profiles.end()) out.image = augmentStain(out.image, sampleAlphas(it->second, rng), stains);
  }
  if (cfg.geometric) {
    auto [img, pts] = geometricAugment(out.image, out.points, rng, cfg.geometricOptions);
    out.image = std::move(img);
    out.points = std::move(pts);
  }
  if (cfg.filter) out.image = blurOrSharpen(out.image, rng, cfg.filterOptions);
  return out;
}

std::size_t totalIterations(const TrainConfig& cfg, std::size_t datasetSize) {
  if (cfg.iterations > 0) return cfg.iterations;
  const std::size_t perEpoch = (datasetSize + cfg.batchSize() - 1) / cfg.batchSize();
  return std::max<std::size_t>(1, cfg.epochs * perEpoch);
}

namespace {

std::string hexDigest(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void checkpoint(Model& model, const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path());
  saveCheckpoint(path, model.allParameters());
}

}  // namespace

TrainResult trainLoop(Model& model, std::span<const TrainSample> samples, const ProfileMap& profiles,
                      const TrainerOptions& opts, std::ostream* metricsLog) {
  if (samples.empty()) throw std::invalid_argument("training split is empty");
  opts.train.validate();
  for (const auto& s : samples)
    if (s.image.height != model.detector.config().inputSize || s.image.width != model.detector.config().inputSize)
      throw std::invalid_argument("training sample size does not match detector inputSize");

  Trainer trainer(model, opts);
  const StainMatrix stains = StainMatrix::standard();
  const std::size_t total = totalIterations(opts.train, samples.size());
  const std::size_t batch = opts.train.batchSize();
  Rng order(deriveSeed(opts.train.seed, 0x5eed));
  std::vector<std::size_t> perm(samples.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), order.engine());
  std::size_t cursor = 0;

  TrainResult result;
  const std::string stepOrder = !opts.useDac ? "detector-only" : opts.dacStepFirst ? "dac,detector" : "detector,dac";
  for (std::size_t it = 0; it < total; ++it) {
    std::vector<std::size_t> picks(batch);
    for (auto& p : picks) {
      if (cursor == perm.size()) {
        std::shuffle(perm.begin(), perm.end(), order.engine());
        cursor = 0;
      }
      p = perm[cursor++];
    }
    for (auto p : picks) result.regionsSeen.push_back(samples[p].regionId);

    std::vector<std::vector<TrainSample>> plain(opts.train.accumSteps), augmented(opts.train.accumSteps);
    for (std::size_t k = 0; k < opts.train.accumSteps; ++k) {
      augmented[k].resize(opts.train.miniBatch);
      for (std::size_t j = 0; j < opts.train.miniBatch; ++j) {
        const TrainSample& src = samples[picks[k * opts.train.miniBatch + j]];
        if (opts.useDac) plain[k].push_back(src);
      }
    }
    parallelFor(batch, opts.workers, [&](std::size_t i) {
      const std::size_t k = i / opts.train.miniBatch, j = i % opts.train.miniBatch;
      augmented[k][j] = augmentSample(samples[picks[i]], profiles, opts.augment, stains,
                                      deriveSeed(opts.train.seed, it + 1, i));
    });

    const double lr = oneCycleLr(it, total, opts.train);
    IterationMetrics m;
    m.iteration = it;
    m.lr = lr;
    m.stepOrder = stepOrder;
    auto runStep1 = [&] { m.dacLoss = trainer.step1DacUpdate(plain, lr).dacLoss; };
    auto runStep2 = [&] {
      const StepMetrics s = trainer.step2DetectorUpdate(augmented, lr);
      m.detLoss = s.detLoss;
      m.agnosticLoss = s.agnosticLoss;
    };
    try {
      if (!opts.useDac) {
        runStep2();
      } else if (opts.dacStepFirst) {
        runStep1();
        runStep2();
      } else {
        runStep2();
        runStep1();
      }
    } catch (const TrainingDiverged& e) {
      if (!opts.outDir.empty()) checkpoint(model, opts.outDir / "diverged.ckpt");
      throw TrainingDiverged(std::string(e.what()) + " at iteration " + std::to_string(it));
    }
    m.gateSigmoids = model.detector.gateSigmoids();
    m.prototypeDigest = hexDigest(parameterDigest(prototypeParameters(model.banks)));
    if (metricsLog) *metricsLog << toJsonLine(m) << '\n';
    if (opts.logEvery && (it % opts.logEvery == 0 || it + 1 == total))
      std::cerr << "iter " << it << "/" << total << " lr " << lr << " dac " << m.dacLoss << " det " << m.detLoss
                << " agn " << m.agnosticLoss << '\n';
    result.log.push_back(std::move(m));
    if (!opts.outDir.empty() && opts.checkpointEvery && (it + 1) % opts.checkpointEvery == 0)
      checkpoint(model, opts.outDir / ("iter_" + std::to_string(it + 1) + ".ckpt"));
  }
  if (!opts.outDir.empty()) checkpoint(model, opts.outDir / "final.ckpt");
  return result;
}

}  // namespace rpdac
