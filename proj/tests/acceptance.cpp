// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.
// Optional arguments restrict the run to criteria whose key is listed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "rpdac/eval.hpp"
#include "rpdac/gradcheck.hpp"
#include "rpdac/synth.hpp"
#include "rpdac/trainer.hpp"

using namespace rpdac;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

double seconds(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

// ---- gradients ------------------------------------------------------------------

Outcome gradientSuite() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t rows = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed)
    for (const auto& row : runGradcheckSuite(seed)) {
      ++rows;
      o.require(row.passed(), "seed " + std::to_string(seed) + " " + row.op + "/" + row.input);
      o.require(row.tolerance <= kComposedTolerance, row.op + " tolerance too loose");
    }
  const double t = seconds(t0);
  o.require(t < 120.0, fmt("runtime %.1fs >= 120s", t));
  if (o.pass) o.detail = std::to_string(rows) + " checks over 20 seeds in " + fmt("%.1fs", t);
  return o;
}

// ---- colour ---------------------------------------------------------------------

Outcome colorSuite() {
  Outcome o;
  const StainMatrix m = StainMatrix::standard();
  Rng rng(21);
  RgbImage img(31, 29);
  for (auto& v : img.data) v = rng.uniform(kOdFloor, 1.0);
  const RgbImage back = hedToRgb(rgbToHed(img, m), m);
  double worst = 0.0;
  for (std::size_t i = 0; i < img.data.size(); ++i) worst = std::max(worst, std::abs(img.data[i] - back.data[i]));
  o.require(worst <= 1e-6, fmt("round trip error %.3g", worst));

  const RgbImage same = augmentStain(img, StainAlphas{1, 1, 1}, m);
  double idErr = 0.0;
  for (std::size_t i = 0; i < img.data.size(); ++i) idErr = std::max(idErr, std::abs(img.data[i] - same.data[i]));
  o.require(idErr <= 1e-6, fmt("identity alphas error %.3g", idErr));

  const RgbImage white(4, 4, 1.0);
  double whiteErr = 0.0;
  for (int t = 0; t < 100; ++t) {
    const StainAlphas a{rng.uniform(0.01, 5), rng.uniform(0.01, 5), rng.uniform(0.01, 5)};
    for (double v : augmentStain(white, a, m).data) whiteErr = std::max(whiteErr, std::abs(v - 1.0));
  }
  o.require(whiteErr <= 1e-6, fmt("white pixel moved by %.3g", whiteErr));

  const BetaSpec specs[] = {{2, 2, 0.4, 0.8}, {2, 5, 1.0, 0.0}, {0.5, 0.7, 2.0, -1.0}, {8, 3, 0.3, 0.9}};
  constexpr int kDraws = 100000;
  for (const auto& s : specs) {
    double total = 0.0;
    for (int i = 0; i < kDraws; ++i) total += sampleBetaSpec(s, rng);
    const double ab = s.a + s.b;
    const double se = s.scale * std::sqrt(s.a * s.b / (ab * ab * (ab + 1.0))) / std::sqrt(double(kDraws));
    const double expected = s.shift + s.scale * s.a / ab;
    o.require(std::abs(total / kDraws - expected) <= 3.0 * se,
              fmt("beta(%g,%g) mean off by %.3g", s.a, s.b, total / kDraws - expected));
  }
  if (o.pass) o.detail = fmt("round trip %.2g, beta means within 3 SE", worst);
  return o;
}

// ---- RP-DAC analytics --------------------------------------------------------------

DacPrediction single(std::vector<double> z, bool grad = false) {
  const std::size_t n = z.size();
  return DacPrediction{{Tensor::fromData({n}, std::move(z), grad)}};
}

Outcome rpdacAnalytics() {
  Outcome o;
  {
    std::vector<PrototypeBank> banks{PrototypeBank(2)};
    const std::vector<DomainLabel> labels{{0, 0, 0}};
    Graph g(false);
    const double a = dacLoss(g, banks, std::vector{single({0.1, 0.0})}, labels).item();
    const double b = dacLoss(g, banks, std::vector{single({1.0, 0.0})}, labels).item();
    o.require(std::abs(a - 0.0405) <= 1e-12, fmt("case 1 gave %.15g", a));
    o.require(std::abs(b - 0.405) <= 1e-12, fmt("case 2 gave %.15g", b));
  }
  {
    Rng rng(3);
    std::vector<PrototypeBank> banks{PrototypeBank(4)};
    for (auto& v : banks[0].prototypes().data()) v = rng.uniform(-1, 1);
    std::vector<double> centroid(4, 0.0);
    for (std::size_t l = 0; l < 4; ++l)
      for (std::size_t j = 0; j < 4; ++j) centroid[j] += banks[0].prototypes()[l * 4 + j] / 4.0;
    // Dyadic prototypes make the centroid exactly representable.
    std::vector<PrototypeBank> dyadic{PrototypeBank(2)};
    const std::vector preds{single(dyadic[0].centroid(), true)};
    Graph g;
    g.backward(agnosticLoss(g, dyadic, preds));
    for (double v : preds[0].z[0].grad()) o.require(v == 0.0, fmt("agnostic gradient %.3g at centroid", v));
    const std::vector general{single(centroid, true)};
    Graph g2;
    g2.backward(agnosticLoss(g2, banks, general));
    for (double v : general[0].z[0].grad()) o.require(std::abs(v) <= 1e-15, fmt("agnostic gradient %.3g", v));
  }
  {
    Rng rng(5);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<PrototypeBank> banks{PrototypeBank(3)};
      for (auto& v : banks[0].prototypes().data()) v = rng.uniform(-2, 2);
      const int label = trial % 3;
      std::vector<double> z(3);
      for (auto& v : z) v = rng.uniform(-1, 1);
      const std::vector preds{single(z)};
      const std::vector<DomainLabel> labels{{label, 0, 0}};
      banks[0].prototypes().setRequiresGrad(true);
      for (int it = 0; it < 500; ++it) {
        Graph g;
        g.backward(dacLoss(g, banks, preds, labels));
        auto p = banks[0].prototypes().data();
        auto gr = banks[0].prototypes().grad();
        for (std::size_t k = 0; k < p.size(); ++k) p[k] -= 0.3 * gr[k];  // 0.1 after the 1/n factor
        banks[0].prototypes().zeroGrad();
      }
      for (std::size_t j = 0; j < 3; ++j) {
        const double target = 0.1 * (int(j) == label ? 1.0 : 0.0) + 0.9 * z[j];
        worst = std::max(worst, std::abs(banks[0].prototypes()[std::size_t(label) * 3 + j] - target));
      }
    }
    o.require(worst <= 1e-6, fmt("prototype off fixed point by %.3g", worst));
  }
  if (o.pass) o.detail = "hand cases, centroid gradient and fixed point";
  return o;
}

// ---- trainer ------------------------------------------------------------------------

constexpr std::size_t kSmall = 64;

DetectorConfig smallDetector() {
  DetectorConfig cfg;
  cfg.inputSize = kSmall;
  cfg.baseChannels = 4;
  cfg.boxSize = 12;
  return cfg;
}

std::vector<TrainSample> smallSamples(std::size_t perDomain, std::uint64_t seed) {
  SynthConfig sc = SynthConfig::threeDomains();
  sc.regionsPerDomain = perDomain;
  sc.regionSize = kSmall;
  sc.blobRadiusMin = 2.0;
  sc.blobRadiusMax = 3.0;
  sc.seed = seed;
  std::vector<TrainSample> out;
  for (const auto& r : generateDataset(sc)) out.push_back(toSample(r));
  return out;
}

std::vector<std::vector<TrainSample>> chunk(const std::vector<TrainSample>& s, std::size_t size) {
  std::vector<std::vector<TrainSample>> out;
  for (std::size_t i = 0; i < s.size(); i += size)
    out.emplace_back(s.begin() + std::ptrdiff_t(i), s.begin() + std::ptrdiff_t(std::min(s.size(), i + size)));
  return out;
}

TrainerOptions smallOptions(std::size_t miniBatch, std::size_t accum) {
  TrainerOptions o;
  o.train.miniBatch = miniBatch;
  o.train.accumSteps = accum;
  o.train.seed = 3;
  return o;
}

std::vector<double> anchorValues(const Model& m) {
  std::vector<double> out;
  for (const auto& b : m.banks) out.insert(out.end(), b.anchors().data().begin(), b.anchors().data().end());
  return out;
}

Outcome stepIsolation() {
  Outcome o;
  Model model(smallDetector(), DacHeadConfig{8, {3}}, 1);
  const auto batches = chunk(smallSamples(2, 10), 2);
  Trainer trainer(model, smallOptions(2, 3));
  const auto anchors = anchorValues(model);
  for (int it = 0; it < 100 && o.pass; ++it) {
    const auto trunk = parameterDigest(model.detector.parameters());
    trainer.step1DacUpdate(batches, 1e-3);
    o.require(parameterDigest(model.detector.parameters()) == trunk, "step 1 moved the trunk at " + std::to_string(it));
    const auto dac = parameterDigest(model.dac.parameters());
    const auto protos = parameterDigest(prototypeParameters(model.banks));
    trainer.step2DetectorUpdate(batches, 1e-3);
    o.require(parameterDigest(model.dac.parameters()) == dac, "step 2 moved DAC layers at " + std::to_string(it));
    o.require(parameterDigest(prototypeParameters(model.banks)) == protos,
              "step 2 moved prototypes at " + std::to_string(it));
    o.require(parameterDigest(model.detector.parameters()) != trunk, "step 2 left the trunk unchanged");
  }
  o.require(anchorValues(model) == anchors, "anchors changed");
  if (o.pass) o.detail = "100 iterations, digests stable per step, anchors constant";
  return o;
}

double maxParamDiff(const std::vector<NamedParameter>& a, const std::vector<NamedParameter>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].tensor.size(); ++j) d = std::max(d, std::abs(a[i].tensor[j] - b[i].tensor[j]));
  return d;
}

Outcome accumulation() {
  Outcome o;
  const auto samples = smallSamples(22, 11);
  const std::vector<TrainSample> batch(samples.begin(), samples.begin() + 64);
  Model a(smallDetector(), DacHeadConfig{8, {3}}, 2), b(smallDetector(), DacHeadConfig{8, {3}}, 2);
  Trainer ta(a, smallOptions(8, 8)), tb(b, smallOptions(64, 1));
  const auto small = chunk(batch, 8), large = chunk(batch, 64);
  ta.step1DacUpdate(small, 2e-3);
  tb.step1DacUpdate(large, 2e-3);
  const double d1 = maxParamDiff(a.dacParameters(), b.dacParameters());
  ta.step2DetectorUpdate(small, 2e-3);
  tb.step2DetectorUpdate(large, 2e-3);
  const double d2 = maxParamDiff(a.detector.parameters(), b.detector.parameters());
  o.require(d1 <= 1e-10, fmt("DAC update differs by %.3g", d1));
  o.require(d2 <= 1e-10, fmt("detector update differs by %.3g", d2));
  o.detail += fmt("max difference %.2g (DAC) %.2g (detector)", d1, d2);
  return o;
}

Outcome schedule() {
  Outcome o;
  const TrainConfig cfg;
  const std::size_t total = 2000;
  o.require(cfg.peakLr == 2e-3, "peak lr default");
  o.require(oneCycleLr(0, total, cfg) == 0.002 / 25.0, "lr(0)");
  o.require(std::abs(oneCycleLr(0, total, cfg) - 8e-5) <= 1e-20, fmt("lr(0)=%.17g", oneCycleLr(0, total, cfg)));
  double peak = 0.0;
  for (std::size_t s = 0; s < total; ++s) peak = std::max(peak, oneCycleLr(s, total, cfg));
  o.require(peak == 2e-3, fmt("peak %.17g", peak));
  const double last = oneCycleLr(total - 1, total, cfg);
  o.require(std::abs(last - 2e-7) <= 1e-20, fmt("final %.17g", last));
  if (o.pass) o.detail = "8e-5 / 2e-3 / 2e-7";
  return o;
}

// ---- evaluation oracles --------------------------------------------------------

bool sameDetections(std::vector<Detection> a, std::vector<Detection> b, double tol) {
  if (a.size() != b.size()) return false;
  const auto order = [](const Detection& p, const Detection& q) { return std::tie(p.x, p.y) < std::tie(q.x, q.y); };
  std::sort(a.begin(), a.end(), order);
  std::sort(b.begin(), b.end(), order);
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::abs(a[i].x - b[i].x) > tol || std::abs(a[i].y - b[i].y) > tol || std::abs(a[i].score - b[i].score) > tol)
      return false;
  return true;
}

Outcome evalOracles() {
  Outcome o;
  Rng rng(6);
  std::size_t f1Mismatch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t np = rng.index(7), nt = rng.index(7);
    std::vector<Detection> preds;
    std::vector<Point> pp, truths;
    for (std::size_t i = 0; i < np; ++i) {
      preds.push_back({rng.uniform(0, 80), rng.uniform(0, 80), 50, 1.0});
      pp.push_back({preds.back().x, preds.back().y});
    }
    for (std::size_t i = 0; i < nt; ++i) truths.push_back({rng.uniform(0, 80), rng.uniform(0, 80)});
    const std::size_t tp = oracle::exhaustiveMatches(pp, truths, 30);
    const auto got = f1Score(preds, truths, 0.403, 30);
    f1Mismatch += got.match.truePositives != tp || got.f1 != scoreCounts(tp, np - tp, nt - tp, 30).f1;
  }
  o.require(f1Mismatch == 0, std::to_string(f1Mismatch) + " of 1000 F1 instances differ from exhaustive matching");

  std::size_t mergeMismatch = 0, notIdempotent = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.index(10);
    std::vector<Detection> all;
    for (std::size_t i = 0; i < n; ++i) all.push_back({rng.uniform(0, 120), rng.uniform(0, 120), 50, rng.uniform()});
    const auto got = mergeDetections(std::vector<std::vector<Detection>>{all}, 25);
    mergeMismatch += !sameDetections(got, oracle::bruteForceMerge(all, 25), 1e-9);
    notIdempotent += !sameDetections(mergeDetections(std::vector<std::vector<Detection>>{got}, 25), got, 0.0);
  }
  o.require(mergeMismatch == 0, std::to_string(mergeMismatch) + " merges differ from brute force");
  o.require(notIdempotent == 0, std::to_string(notIdempotent) + " merges not idempotent");

  const std::vector<Point> truths{{10, 10}, {100, 100}, {200, 200}};
  const std::vector<Detection> two{{12, 10, 50, 0.9}, {500, 500, 50, 0.9}};
  const auto r = f1Score(two, truths);
  o.require(r.precision == 0.5 && r.recall == 1.0 / 3.0 && r.f1 == 0.4, fmt("worked example F1 %.17g", r.f1));
  if (o.pass) o.detail = "1000 F1 instances, 1000 merges, worked example 0.4";
  return o;
}

// ---- synthetic domain adaptation ----------------------------------------------

constexpr int kHeldOut = 2;

LooConfig experimentConfig(std::uint64_t seed, bool useDac) {
  LooConfig cfg;
  cfg.seed = seed;
  cfg.detector.baseChannels = 4;
  cfg.detector.boxSize = 16;
  cfg.dac.reducedChannels = 16;
  cfg.dac.headDims = {3};
  cfg.eval.mergeRadius = 8;
  cfg.eval.matchRadius = 8;
  cfg.trainer.useDac = useDac;
  cfg.trainer.train.iterations = 2000;
  cfg.trainer.train.miniBatch = 2;
  cfg.trainer.train.accumSteps = 2;
  cfg.trainer.augment.geometricOptions.maxTranslation = 16;
  return cfg;
}

struct ArmResult {
  double probe = 0.0;
  double heldOutF1 = 0.0;
};

// Probe on tap features of fresh regions from the two seen domains.
double domainProbe(const Detector& detector, std::uint64_t seed) {
  SynthConfig pc = SynthConfig::threeDomains();
  pc.seed = seed + 1000;
  pc.regionsPerDomain = 60;
  std::vector<AnnotatedRegion> train, test;
  for (const auto& r : generateDataset(pc)) {
    if (r.label.scanner == kHeldOut) continue;
    (r.id % 60 < 40 ? train : test).push_back(r);
  }
  std::vector<int> ytr, yte;
  for (const auto& r : train) ytr.push_back(r.label.scanner);
  for (const auto& r : test) yte.push_back(r.label.scanner);
  return linearProbeAccuracy(collectTapFeatures(detector, train), ytr, collectTapFeatures(detector, test), yte);
}

ArmResult runArm(const std::vector<AnnotatedRegion>& data, std::uint64_t seed, bool useDac) {
  const auto out = leaveOneDomainOut(data, kHeldOut, experimentConfig(seed, useDac));
  return {domainProbe(out.model.detector, seed), out.report.heldOut.f1};
}

Outcome domainAdaptation() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  int passing = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    SynthConfig sc = SynthConfig::threeDomains();
    sc.seed = seed;
    const auto data = generateDataset(sc);
    const ArmResult dac = runArm(data, seed, true), plain = runArm(data, seed, false);
    const bool a = dac.probe <= 0.60 && plain.probe >= 0.85;
    const bool b = dac.heldOutF1 >= plain.heldOutF1 - 0.02;
    passing += a && b;
    std::printf("  seed %llu: probe %.3f (RP-DAC) vs %.3f (ablation) [%s]; held-out F1 %.3f vs %.3f [%s]\n",
                static_cast<unsigned long long>(seed), dac.probe, plain.probe, a ? "ok" : "no", dac.heldOutF1,
                plain.heldOutF1, b ? "ok" : "no");
    std::fflush(stdout);
  }
  const double t = seconds(t0);
  o.require(passing >= 2, std::to_string(passing) + " of 3 seeds meet both conditions");
  o.detail += (o.pass ? std::to_string(passing) + " of 3 seeds pass" : std::string()) + fmt(", %.0f min", t / 60.0);
  return o;
}

// ---- overfit -----------------------------------------------------------------------------

Outcome overfit() {
  Outcome o;
  SynthConfig sc = SynthConfig::threeDomains();
  sc.seed = 3;
  sc.regionsPerDomain = 1;
  const auto regions = generateDataset(sc);
  AnnotatedRegion region = regions.front();
  for (const auto& r : regions)
    if (r.points.size() >= 3) {
      region = r;
      break;
    }
  DetectorConfig det;
  det.boxSize = 16;
  Model model(det, DacHeadConfig{16, {3}}, 1);
  TrainerOptions opts;
  opts.train.iterations = 500;
  opts.train.miniBatch = 1;
  opts.train.accumSteps = 1;
  opts.train.peakLr = 0.005;
  opts.useDac = false;
  opts.augment = AugmentConfig{false, false, false, {}, {}};
  const std::vector<TrainSample> samples{toSample(region)};
  trainLoop(model, samples, {}, opts);

  Graph g(false);
  const double loss = detectionLoss(g, model.detector.forward(g, region.image).pred, region.points).item();
  EvalConfig ec;
  ec.mergeRadius = 8;
  ec.matchRadius = 8;
  ec.tta = false;  // mirrored views are out of distribution without flip augmentation
  const auto report = evaluateRegions(model.detector, std::vector{region}, ec);
  o.require(loss < 1e-2, fmt("detection loss %.3g", loss));
  o.require(report.overall.f1 == 1.0, fmt("F1 %.3f", report.overall.f1));
  o.detail += fmt("%g targets, loss %.3g, F1 %.3f", double(region.points.size()), loss, report.overall.f1);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::set<std::string> only(argv + 1, argv + argc);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradients", gradientSuite},     {"color", colorSuite},       {"rpdac", rpdacAnalytics},
      {"isolation", stepIsolation},     {"accumulation", accumulation}, {"schedule", schedule},
      {"eval", evalOracles},            {"domain", domainAdaptation}, {"overfit", overfit}};
  int failed = 0;
  for (const auto& [key, run] : criteria) {
    if (!only.empty() && !only.count(key)) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failed += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", key.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
