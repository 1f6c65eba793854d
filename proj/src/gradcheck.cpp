#include "rpdac/gradcheck.hpp"

#include "rpdac/detector.hpp"
#include "rpdac/random.hpp"
#include "rpdac/rpdac.hpp"

namespace rpdac {

namespace {

Tensor randomTensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shapeNumel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::fromData(std::move(shape), std::move(v));
}

// Values bounded away from zero so kinks (relu) stay out of the stencil.
Tensor awayFromZero(Rng& rng, Shape shape) {
  std::vector<double> v(shapeNumel(shape));
  for (auto& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
  return Tensor::fromData(std::move(shape), std::move(v));
}

// Random linear read-out so every output coordinate reaches the scalar.
struct Projector {
  Tensor operator()(Graph& g, const Tensor& out) const {
    Rng local(deriveSeed(out.size(), out.rank()));
    std::vector<double> w(out.size());
    for (auto& x : w) x = local.uniform(-1.0, 1.0);
    return sum(g, mul(g, out, Tensor::fromData(out.shape(), std::move(w))));
  }
};

class Suite {
 public:
  explicit Suite(std::uint64_t seed) : rng_(seed) {}

  void check(const std::string& op, const std::string& input, const Tensor& x, const ScalarFn& f,
             double tolerance = kSingleOpTolerance) {
    rows_.push_back({op, input, finiteDiffCheck(f, x), tolerance});
  }

  Rng& rng() { return rng_; }
  std::vector<GradCheckRow> take() { return std::move(rows_); }

 private:
  Rng rng_;
  std::vector<GradCheckRow> rows_;
};

void elementwiseOps(Suite& s) {
  Rng& rng = s.rng();
  const Projector proj;
  Tensor a = randomTensor(rng, {2, 3, 4}), b = randomTensor(rng, {2, 3, 4});
  Tensor away = awayFromZero(rng, {2, 3, 4});
  s.check("silu", "x", a, [&](Graph& g, const Tensor& x) { return proj(g, silu(g, x)); });
  s.check("relu", "x", away, [&](Graph& g, const Tensor& x) { return proj(g, relu(g, x)); });
  s.check("sigmoid", "x", a, [&](Graph& g, const Tensor& x) { return proj(g, sigmoid(g, x)); });
  s.check("add", "a", a, [&](Graph& g, const Tensor& x) { return proj(g, add(g, x, b)); });
  s.check("add", "b", b, [&](Graph& g, const Tensor& x) { return proj(g, add(g, a, x)); });
  s.check("sub", "a", a, [&](Graph& g, const Tensor& x) { return proj(g, sub(g, x, b)); });
  s.check("sub", "b", b, [&](Graph& g, const Tensor& x) { return proj(g, sub(g, a, x)); });
  s.check("mul", "a", a, [&](Graph& g, const Tensor& x) { return proj(g, mul(g, x, b)); });
  s.check("mul", "b", b, [&](Graph& g, const Tensor& x) { return proj(g, mul(g, a, x)); });
  s.check("mul", "self", a, [&](Graph& g, const Tensor& x) { return proj(g, mul(g, x, x)); });
  s.check("scale", "x", a, [&](Graph& g, const Tensor& x) { return proj(g, scale(g, x, -1.7)); });
  s.check("sum", "x", a, [&](Graph& g, const Tensor& x) { return sum(g, x); });
  s.check("sumScalars", "x", a, [&](Graph& g, const Tensor& x) {
    const Tensor parts[] = {proj(g, x), sum(g, mul(g, x, x)), sum(g, sigmoid(g, x))};
    return sumScalars(g, parts);
  });
}

void shapeOps(Suite& s) {
  Rng& rng = s.rng();
  const Projector proj;
  Tensor x = randomTensor(rng, {3, 4, 5});
  Tensor y = randomTensor(rng, {2, 4, 5});
  Tensor small = randomTensor(rng, {2, 3, 3});
  Tensor gate = randomTensor(rng, {1});
  s.check("globalAvgPool", "x", x, [&](Graph& g, const Tensor& t) { return proj(g, globalAvgPool(g, t)); });
  s.check("upsampleNearest", "x(2x)", small,
          [&](Graph& g, const Tensor& t) { return proj(g, upsampleNearest(g, t, 6, 6)); });
  s.check("upsampleNearest", "x(7x5)", small,
          [&](Graph& g, const Tensor& t) { return proj(g, upsampleNearest(g, t, 7, 5)); });
  s.check("concatChannels", "first", x, [&](Graph& g, const Tensor& t) {
    const Tensor parts[] = {t, y};
    return proj(g, concatChannels(g, parts));
  });
  s.check("concatChannels", "second", y, [&](Graph& g, const Tensor& t) {
    const Tensor parts[] = {x, t};
    return proj(g, concatChannels(g, parts));
  });
  s.check("sliceChannels", "x", x, [&](Graph& g, const Tensor& t) { return proj(g, sliceChannels(g, t, 1, 3)); });
  s.check("gatedConcat", "early", x, [&](Graph& g, const Tensor& t) { return proj(g, gatedConcat(g, t, y, gate)); });
  s.check("gatedConcat", "late", y, [&](Graph& g, const Tensor& t) { return proj(g, gatedConcat(g, x, t, gate)); });
  s.check("gatedConcat", "gate", gate, [&](Graph& g, const Tensor& t) { return proj(g, gatedConcat(g, x, y, t)); });
  Tensor m = randomTensor(rng, {4, 3});
  s.check("selectRow", "matrix", m, [&](Graph& g, const Tensor& t) { return proj(g, selectRow(g, t, 2)); });
}

void linearOps(Suite& s) {
  Rng& rng = s.rng();
  const Projector proj;
  Tensor in = randomTensor(rng, {2, 6, 7});
  Tensor k = randomTensor(rng, {3, 2, 3, 3});
  Tensor bias = randomTensor(rng, {3});
  for (int stride : {1, 2}) {
    const std::string tag = "conv2d/s" + std::to_string(stride);
    s.check(tag, "input", in, [&](Graph& g, const Tensor& t) { return proj(g, conv2d(g, t, k, bias, stride, 1)); });
    s.check(tag, "kernel", k, [&](Graph& g, const Tensor& t) { return proj(g, conv2d(g, in, t, bias, stride, 1)); });
    s.check(tag, "bias", bias, [&](Graph& g, const Tensor& t) { return proj(g, conv2d(g, in, k, t, stride, 1)); });
  }
  Tensor k4 = randomTensor(rng, {2, 2, 4, 4});
  Tensor in4 = randomTensor(rng, {2, 8, 8});
  s.check("conv2d/k4s4", "kernel", k4,
          [&](Graph& g, const Tensor& t) { return proj(g, conv2d(g, in4, t, Tensor(), 4, 0)); });

  Tensor v = randomTensor(rng, {5});
  Tensor w = randomTensor(rng, {3, 5});
  Tensor lb = randomTensor(rng, {3});
  s.check("linear", "x", v, [&](Graph& g, const Tensor& t) { return proj(g, linear(g, t, w, lb)); });
  s.check("linear", "weight", w, [&](Graph& g, const Tensor& t) { return proj(g, linear(g, v, t, lb)); });
  s.check("linear", "bias", lb, [&](Graph& g, const Tensor& t) { return proj(g, linear(g, v, w, t)); });

  Tensor p = randomTensor(rng, {4});
  Tensor q = randomTensor(rng, {4});
  Tensor pts = randomTensor(rng, {3, 4});
  s.check("squaredDistance", "a", p, [&](Graph& g, const Tensor& t) { return squaredDistance(g, t, q); });
  s.check("squaredDistance", "b", q, [&](Graph& g, const Tensor& t) { return squaredDistance(g, p, t); });
  s.check("squaredDistanceToPoints", "x", p,
          [&](Graph& g, const Tensor& t) { return squaredDistanceToPoints(g, t, pts); });

  Tensor logits = randomTensor(rng, {10}, -3.0, 3.0);
  std::vector<double> targets(10), weights(10);
  for (std::size_t i = 0; i < 10; ++i) {
    targets[i] = rng.bernoulli(0.3) ? 1.0 : 0.0;
    weights[i] = rng.uniform(0.1, 2.0);
  }
  s.check("bceWithLogits", "logits", logits,
          [&](Graph& g, const Tensor& t) { return bceWithLogits(g, t, targets, weights); });
  s.check("weightedSquaredError", "x", logits,
          [&](Graph& g, const Tensor& t) { return weightedSquaredError(g, t, targets, weights); });
}

void composedLosses(Suite& s) {
  Rng& rng = s.rng();
  const std::vector<std::size_t> dims{3, 4};
  std::vector<PrototypeBank> banks;
  for (auto n : dims) {
    banks.emplace_back(n);
    auto pd = banks.back().prototypes().data();
    for (auto& v : pd) v += rng.uniform(-0.3, 0.3);
  }
  std::vector<DacPrediction> preds(3);
  std::vector<DomainLabel> labels(3);
  for (std::size_t k = 0; k < preds.size(); ++k) {
    for (auto n : dims) preds[k].z.push_back(randomTensor(rng, {n}));
    labels[k] = DomainLabel{static_cast<int>(rng.index(3)), static_cast<int>(rng.index(4)), 0};
  }
  s.check("dacLoss", "z", preds[1].z[1],
          [&](Graph& g, const Tensor&) { return dacLoss(g, banks, preds, labels); }, kComposedTolerance);
  s.check("dacLoss", "prototypes", banks[0].prototypes(),
          [&](Graph& g, const Tensor&) { return dacLoss(g, banks, preds, labels); }, kComposedTolerance);
  s.check("agnosticLoss", "z", preds[2].z[0],
          [&](Graph& g, const Tensor&) { return agnosticLoss(g, banks, preds); }, kComposedTolerance);

  GridPrediction grid;
  grid.imageHeight = grid.imageWidth = 64;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t cells = 64 / kScaleStrides[i];
    grid.scales[i].stride = kScaleStrides[i];
    grid.scales[i].objectness = randomTensor(rng, {1, cells, cells}, -2.0, 2.0);
    grid.scales[i].offsets = randomTensor(rng, {2, cells, cells}, 0.0, 1.0);
  }
  const std::vector<Point> truths{{10.3, 20.7}, {40.1, 41.9}, {60.0, 5.5}};
  s.check("detectionLoss", "objectness", grid.scales[0].objectness,
          [&](Graph& g, const Tensor&) { return detectionLoss(g, grid, truths); }, kComposedTolerance);
  s.check("detectionLoss", "offsets", grid.scales[1].offsets,
          [&](Graph& g, const Tensor&) { return detectionLoss(g, grid, truths); }, kComposedTolerance);

  // End to end through the trunk and the DAC head.
  DetectorConfig dc;
  dc.inputSize = 64;
  dc.baseChannels = 2;
  const Detector det(dc, rng.next());
  DacHeadConfig hc;
  hc.reducedChannels = 4;
  hc.headDims = dims;
  const DacModel dac(det.totalTapChannels(), hc, rng.next());
  const Tensor image = randomTensor(rng, {3, 64, 64}, 0.0, 1.0);
  s.check("detector+detectionLoss", "stem.weight", det.parameters()[0].tensor,
          [&](Graph& g, const Tensor&) { return detectionLoss(g, det.forward(g, image).pred, truths); },
          kComposedTolerance);
  s.check("detector+agnosticLoss", "gate", det.gates()[1], [&](Graph& g, const Tensor&) {
    const DetectorOutput out = det.forward(g, image);
    const DacPrediction p = dac.forward(g, out.taps);
    return agnosticLoss(g, banks, std::span<const DacPrediction>(&p, 1));
  }, kComposedTolerance);
}

}  // namespace

std::vector<GradCheckRow> runGradcheckSuite(std::uint64_t seed) {
  Suite s(seed);
  elementwiseOps(s);
  shapeOps(s);
  linearOps(s);
  composedLosses(s);
  return s.take();
}

}  // namespace rpdac
