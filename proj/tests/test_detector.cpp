#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "rpdac/detector.hpp"

using namespace rpdac;

namespace {

DetectorConfig smallConfig(std::size_t size = 64) {
  DetectorConfig cfg;
  cfg.inputSize = size;
  cfg.baseChannels = 4;
  cfg.boxSize = 16;
  return cfg;
}

RgbImage randomImage(std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  RgbImage img(size, size);
  for (auto& v : img.data) v = rng.uniform(0.2, 1.0);
  return img;
}

GridPrediction constantGrid(std::size_t size, double logit, double offset = 0.5) {
  GridPrediction p;
  p.imageHeight = p.imageWidth = size;
  for (std::size_t k = 0; k < 3; ++k) {
    const std::size_t s = kScaleStrides[k], n = size / s;
    p.scales[k] = {s, Tensor::full({1, n, n}, logit), Tensor::full({2, n, n}, offset)};
  }
  return p;
}

void setCell(GridPrediction& p, std::size_t scale, std::size_t cx, std::size_t cy, double logit, double ox,
             double oy) {
  auto& sc = p.scales[scale];
  const std::size_t w = sc.objectness.dim(2), h = sc.objectness.dim(1);
  sc.objectness.data()[cy * w + cx] = logit;
  sc.offsets.data()[cy * w + cx] = ox;
  sc.offsets.data()[h * w + cy * w + cx] = oy;
}

double logit(double p) { return std::log(p / (1.0 - p)); }

double maxAbsDiff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Detector, TapShapesFollowStrides) {
  DetectorConfig cfg;
  cfg.inputSize = 256;
  const Detector det(cfg, 1);
  Graph g(false);
  const auto out = det.forward(g, randomImage(256, 2));
  const std::size_t spatial[3] = {32, 16, 8};
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(out.taps[k].dim(0), det.tapChannels()[k]);
    EXPECT_EQ(out.taps[k].dim(1), spatial[k]);
    EXPECT_EQ(out.taps[k].dim(2), spatial[k]);
    EXPECT_EQ(out.pred.scales[k].stride, kScaleStrides[k]);
    EXPECT_EQ(out.pred.scales[k].objectness.shape(), (Shape{1, spatial[k], spatial[k]}));
    EXPECT_EQ(out.pred.scales[k].offsets.shape(), (Shape{2, spatial[k], spatial[k]}));
  }
  EXPECT_EQ(tapFeatures(out).size(), det.totalTapChannels());
}

TEST(Detector, RejectsWrongInputSize) {
  const Detector det(smallConfig(), 1);
  Graph g(false);
  EXPECT_THROW(det.forward(g, randomImage(96, 1)), std::invalid_argument);
}

TEST(Detector, ForwardIsBitDeterministic) {
  const Detector det(smallConfig(), 3);
  const RgbImage img = randomImage(64, 4);
  Graph g1(false), g2(false);
  const auto a = det.forward(g1, img), b = det.forward(g2, img);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(a.pred.scales[k].objectness.data().size(), b.pred.scales[k].objectness.data().size());
    EXPECT_EQ(maxAbsDiff(a.pred.scales[k].objectness, b.pred.scales[k].objectness), 0.0);
    EXPECT_EQ(maxAbsDiff(a.pred.scales[k].offsets, b.pred.scales[k].offsets), 0.0);
    EXPECT_EQ(maxAbsDiff(a.taps[k], b.taps[k]), 0.0);
  }
}

TEST(Detector, OffsetsStayInUnitInterval) {
  const Detector det(smallConfig(), 5);
  Graph g(false);
  const auto out = det.forward(g, randomImage(64, 6));
  for (const auto& sc : out.pred.scales)
    for (double v : sc.offsets.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
}

TEST(Detector, SaturatedGatesEqualUngatedArchitecture) {
  DetectorConfig gated = smallConfig(), plain = smallConfig();
  plain.gatedJoins = false;
  Detector a(gated, 9);
  const Detector b(plain, 9);
  for (auto& p : a.parameters())
    if (p.name.ends_with(".gate")) p.tensor.data()[0] = 40.0;
  const RgbImage img = randomImage(64, 10);
  Graph g1(false), g2(false);
  const auto x = a.forward(g1, img), y = b.forward(g2, img);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_LE(maxAbsDiff(x.pred.scales[k].objectness, y.pred.scales[k].objectness), 1e-8);
    EXPECT_LE(maxAbsDiff(x.taps[k], y.taps[k]), 1e-8);
  }
}

TEST(Detector, GateGradientMatchesFiniteDifferences) {
  const Detector det(smallConfig(32), 11);
  const RgbImage img = randomImage(32, 12);
  for (const auto& gate : det.gates()) {
    const auto f = [&](Graph& g, const Tensor&) {
      const auto out = det.forward(g, img);
      std::vector<Tensor> sums;
      for (const auto& sc : out.pred.scales) sums.push_back(sum(g, sc.objectness));
      return sumScalars(g, sums);
    };
    const auto r = finiteDiffCheck(f, gate);
    EXPECT_TRUE(r.finite);
    EXPECT_TRUE(r.passes(1e-4)) << r.maxRelError;
  }
}

TEST(DetectionLoss, SaturatedNegatives) {
  const GridPrediction p = constantGrid(64, -20.0);
  Graph g(false);
  EXPECT_LT(detectionLoss(g, p, {}).item(), 1e-6);
}

TEST(DetectionLoss, SaturatedPerfectPrediction) {
  const Point ann{21.0, 45.0};
  GridPrediction p = constantGrid(64, -20.0);
  for (std::size_t k = 0; k < 3; ++k) {
    const double s = static_cast<double>(kScaleStrides[k]);
    const auto cx = static_cast<std::size_t>(ann.x / s), cy = static_cast<std::size_t>(ann.y / s);
    setCell(p, k, cx, cy, 20.0, ann.x / s - double(cx), ann.y / s - double(cy));
  }
  Graph g(false);
  const double loss = detectionLoss(g, p, std::vector{ann}).item();
  EXPECT_GE(loss, 0.0);
  EXPECT_LT(loss, 1e-4);
}

TEST(DetectionLoss, NonNegativeOnRandomPredictions) {
  const Detector det(smallConfig(), 13);
  Graph g(false);
  const auto out = det.forward(g, randomImage(64, 14));
  EXPECT_GE(detectionLoss(g, out.pred, std::vector<Point>{{5, 5}, {60, 30}}).item(), 0.0);
  EXPECT_GE(detectionLoss(g, out.pred, {}).item(), 0.0);
}

TEST(DetectionLoss, DecreasesMonotonicallyWhenOverfitting) {
  Detector det(smallConfig(), 15);
  const RgbImage img = randomImage(64, 16);
  const std::vector<Point> ann{{20, 20}, {44, 40}};
  double prev = INFINITY, first = 0.0;
  for (int step = 0; step < 200; ++step) {
    Graph g;
    const Tensor loss = detectionLoss(g, det.forward(g, img).pred, ann);
    ASSERT_LT(loss.item(), prev) << "step " << step;
    prev = loss.item();
    if (step == 0) first = prev;
    g.backward(loss);
    for (auto& p : det.parameters()) {
      auto v = p.tensor.data();
      const auto gr = p.tensor.grad();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.01 * gr[i];
    }
    zeroGrads(det.parameters());
  }
  EXPECT_LT(prev, 0.9 * first);
}

TEST(Decode, EmptyBelowThreshold) {
  EXPECT_TRUE(decode(constantGrid(256, -20.0), 0.403, 50).empty());
}

TEST(Decode, CellCenterFromOffsets) {
  GridPrediction p = constantGrid(256, -20.0);
  setCell(p, 0, 3, 4, 20.0, 0.5, 0.5);
  const auto dets = decode(p, 0.403, 50);
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_EQ(dets[0].x, 28.0);
  EXPECT_EQ(dets[0].y, 36.0);
  EXPECT_EQ(dets[0].size, 50.0);
}

TEST(Decode, SuppressesCloseLowerScore) {
  GridPrediction p = constantGrid(256, -20.0);
  setCell(p, 0, 3, 4, logit(0.8), 0.75, 0.5);
  setCell(p, 0, 4, 4, logit(0.9), 0.25, 0.5);
  const auto dets = decode(p, 0.403, 50);
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_NEAR(dets[0].score, 0.9, 1e-12);
  EXPECT_EQ(dets[0].x, 34.0);
}

TEST(Decode, InvariantsMatchBruteForceOracle) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    GridPrediction p = constantGrid(128, -20.0);
    struct Cand {
      double x, y, score;
    };
    std::vector<Cand> cands;
    for (std::size_t k = 0; k < 3; ++k) {
      auto& sc = p.scales[k];
      const std::size_t n = sc.objectness.dim(1);
      for (std::size_t i = 0; i < n * n; ++i) {
        sc.objectness.data()[i] = rng.uniform(-4, 2);
        sc.offsets.data()[i] = rng.uniform();
        sc.offsets.data()[n * n + i] = rng.uniform();
        const double score = 1.0 / (1.0 + std::exp(-sc.objectness[i]));
        if (score >= 0.4)
          cands.push_back({(double(i % n) + sc.offsets[i]) * double(sc.stride),
                           (double(i / n) + sc.offsets[n * n + i]) * double(sc.stride), score});
      }
    }
    // Greedy oracle: visit by descending score, keep if far from every kept one.
    std::stable_sort(cands.begin(), cands.end(), [](auto& a, auto& b) { return a.score > b.score; });
    std::vector<Cand> kept;
    for (const auto& c : cands)
      if (std::none_of(kept.begin(), kept.end(),
                       [&](auto& k) { return std::hypot(k.x - c.x, k.y - c.y) < 10.0; }))
        kept.push_back(c);
    const auto dets = decode(p, 0.4, 20);
    ASSERT_EQ(dets.size(), kept.size());
    for (std::size_t i = 0; i < dets.size(); ++i) {
      EXPECT_GE(dets[i].score, 0.4);
      for (std::size_t j = 0; j < i; ++j) EXPECT_GE(std::hypot(dets[i].x - dets[j].x, dets[i].y - dets[j].y), 10.0);
    }
    std::vector<double> a, b;
    for (auto& d : dets) a.push_back(d.score);
    for (auto& k : kept) b.push_back(k.score);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(Checkpoint, RoundTripRestoresForwardBitwise) {
  const auto dir = std::filesystem::temp_directory_path() / "rpdac_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "det.ckpt";
  const Detector a(smallConfig(), 21);
  saveCheckpoint(path, a.parameters());
  Detector b(smallConfig(), 22);
  restoreParameters(b.parameters(), loadCheckpoint(path));
  EXPECT_EQ(parameterDigest(a.parameters()), parameterDigest(b.parameters()));
  const RgbImage img = randomImage(64, 23);
  Graph g1(false), g2(false);
  const auto x = a.forward(g1, img), y = b.forward(g2, img);
  for (std::size_t k = 0; k < 3; ++k)
    EXPECT_EQ(maxAbsDiff(x.pred.scales[k].objectness, y.pred.scales[k].objectness), 0.0);

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 5);
  EXPECT_THROW(loadCheckpoint(path), std::runtime_error);
  std::ofstream(path, std::ios::binary) << "NOTACKPT";
  EXPECT_THROW(loadCheckpoint(path), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RestoreRejectsMissingOrMismatched) {
  Detector a(smallConfig(), 24);
  std::vector<NamedTensor> saved;
  for (const auto& p : a.parameters()) saved.push_back({p.name, p.tensor.clone()});
  auto missing = saved;
  missing.pop_back();
  EXPECT_THROW(restoreParameters(a.parameters(), missing), std::runtime_error);
  auto wrong = saved;
  wrong[0].tensor = Tensor::zeros({1});
  EXPECT_THROW(restoreParameters(a.parameters(), wrong), std::runtime_error);
}
