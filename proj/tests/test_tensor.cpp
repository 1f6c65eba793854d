#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "rpdac/gradcheck.hpp"
#include "rpdac/random.hpp"
#include "rpdac/tensor.hpp"

using namespace rpdac;

namespace {

Tensor randomTensor(Rng& rng, Shape shape) {
  std::vector<double> v(shapeNumel(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::fromData(std::move(shape), std::move(v));
}

// Direct summation, independent of the engine's loop structure.
std::vector<double> bruteConv(const Tensor& in, const Tensor& k, const Tensor& b, int stride, int pad) {
  const long cin = in.dim(0), h = in.dim(1), w = in.dim(2);
  const long cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const long oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out;
  for (long co = 0; co < cout; ++co)
    for (long oy = 0; oy < oh; ++oy)
      for (long ox = 0; ox < ow; ++ox) {
        double acc = b.defined() ? b[co] : 0.0;
        for (long ci = 0; ci < cin; ++ci)
          for (long ky = 0; ky < kh; ++ky)
            for (long kx = 0; kx < kw; ++kx) {
              const long y = oy * stride + ky - pad, x = ox * stride + kx - pad;
              if (y < 0 || y >= h || x < 0 || x >= w) continue;
              acc += in[(ci * h + y) * w + x] * k[((co * cin + ci) * kh + ky) * kw + kx];
            }
        out.push_back(acc);
      }
  return out;
}

}  // namespace

TEST(Tensor, ShapeInvariants) {
  EXPECT_THROW(Tensor::fromData({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor::zeros({2, 0}), ShapeError);
  Tensor t = Tensor::zeros({2, 3}, true);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.mutableGrad().size(), 6u);
}

TEST(Conv2d, UnitKernelScales) {
  Graph g(false);
  Tensor in = Tensor::full({1, 3, 3}, 1.0);
  Tensor k = Tensor::full({1, 1, 1, 1}, 2.0);
  Tensor out = conv2d(g, in, k, Tensor::zeros({1}), 1, 0);
  ASSERT_EQ(out.shape(), (Shape{1, 3, 3}));
  for (double v : out.data()) EXPECT_EQ(v, 2.0);
}

TEST(Conv2d, RampWindowSums) {
  Graph g(false);
  std::vector<double> ramp(16);
  for (int i = 0; i < 16; ++i) ramp[i] = i;
  Tensor in = Tensor::fromData({1, 4, 4}, ramp);
  Tensor out = conv2d(g, in, Tensor::full({1, 1, 2, 2}, 1.0), Tensor(), 2, 0);
  ASSERT_EQ(out.shape(), (Shape{1, 2, 2}));
  for (int oy = 0; oy < 2; ++oy)
    for (int ox = 0; ox < 2; ++ox) {
      double window = 0.0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) window += ramp[(2 * oy + dy) * 4 + 2 * ox + dx];
      EXPECT_EQ(out[oy * 2 + ox], window);
    }
}

TEST(Conv2d, MatchesBruteForce) {
  Rng rng(11);
  for (int stride : {1, 2, 3})
    for (int pad : {0, 1, 2}) {
      Tensor in = randomTensor(rng, {3, 7, 9});
      Tensor k = randomTensor(rng, {4, 3, 3, 2});
      Tensor b = randomTensor(rng, {4});
      Graph g(false);
      Tensor out = conv2d(g, in, k, b, stride, pad);
      const auto ref = bruteConv(in, k, b, stride, pad);
      ASSERT_EQ(out.size(), ref.size());
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
    }
}

TEST(Conv2d, RejectsChannelMismatch) {
  Graph g;
  EXPECT_THROW(conv2d(g, Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor(), 1, 0), ShapeError);
  EXPECT_THROW(conv2d(g, Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), Tensor(), 1, 0), ShapeError);
}

TEST(Conv2d, KernelGradientMatchesFiniteDifferences) {
  Rng rng(3);
  Tensor in = randomTensor(rng, {2, 5, 5});
  Tensor k = randomTensor(rng, {3, 2, 3, 3});
  const auto r = finiteDiffCheck(
      [&](Graph& g, const Tensor& x) { return sum(g, conv2d(g, in, x, Tensor(), 1, 0)); }, k, 1e-5);
  EXPECT_TRUE(r.passes(1e-6)) << r.maxRelError;
}

TEST(GatedConcat, SaturatedGateIsPlainConcat) {
  Rng rng(5);
  Tensor early = randomTensor(rng, {2, 3, 3}), late = randomTensor(rng, {1, 3, 3});
  Graph g(false);
  Tensor out = gatedConcat(g, early, late, Tensor::scalar(20.0));
  const Tensor parts[] = {early, late};
  Tensor plain = concatChannels(g, parts);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], plain[i], 1e-8);
}

TEST(GatedConcat, ZeroGateHalvesEarly) {
  Rng rng(6);
  Tensor early = randomTensor(rng, {2, 2, 2}), late = randomTensor(rng, {1, 2, 2});
  Graph g(false);
  Tensor out = gatedConcat(g, early, late, Tensor::scalar(0.0));
  for (std::size_t i = 0; i < early.size(); ++i) EXPECT_EQ(out[i], 0.5 * early[i]);
  for (std::size_t i = 0; i < late.size(); ++i) EXPECT_EQ(out[early.size() + i], late[i]);
}

TEST(GatedConcat, GateGradient) {
  Rng rng(7);
  Tensor early = randomTensor(rng, {2, 3, 3}), late = randomTensor(rng, {2, 3, 3});
  Tensor p = Tensor::scalar(0.3, true);
  Graph g;
  g.backward(sum(g, gatedConcat(g, early, late, p)));
  double sumEarly = 0.0;
  for (double v : early.data()) sumEarly += v;
  const double s = 1.0 / (1.0 + std::exp(-0.3));
  EXPECT_NEAR(p.grad()[0], s * (1.0 - s) * sumEarly, 1e-12);
  const auto r = finiteDiffCheck([&](Graph& gg, const Tensor& x) { return sum(gg, gatedConcat(gg, early, late, x)); },
                                 p);
  EXPECT_TRUE(r.passes(1e-6)) << r.maxRelError;
  EXPECT_THROW(gatedConcat(g, early, Tensor::zeros({1, 2, 3}), p), ShapeError);
}

TEST(GlobalAvgPool, Means) {
  Graph g(false);
  Tensor c = globalAvgPool(g, Tensor::full({4, 3, 5}, 3.0));
  for (double v : c.data()) EXPECT_EQ(v, 3.0);
  EXPECT_EQ(globalAvgPool(g, Tensor::fromData({1, 2, 2}, {1, 2, 3, 4}))[0], 2.5);
}

TEST(GlobalAvgPool, GradientIsUniform) {
  Tensor x = Tensor::fromData({1, 2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Graph g;
  g.backward(sum(g, globalAvgPool(g, x)));
  for (double v : x.grad()) EXPECT_NEAR(v, 1.0 / 6.0, 1e-15);
  const auto r = finiteDiffCheck([](Graph& gg, const Tensor& t) { return sum(gg, globalAvgPool(gg, t)); }, x);
  EXPECT_TRUE(r.passes(1e-6));
}

TEST(UpsampleNearest, Replication) {
  Graph g(false);
  Tensor one = upsampleNearest(g, Tensor::full({1, 1, 1}, 7.0), 5, 3);
  for (double v : one.data()) EXPECT_EQ(v, 7.0);
  Tensor up = upsampleNearest(g, Tensor::fromData({1, 2, 2}, {1, 2, 3, 4}), 4, 4);
  const double expect[16] = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  for (int i = 0; i < 16; ++i) EXPECT_EQ(up[i], expect[i]);
  EXPECT_THROW(upsampleNearest(g, Tensor::zeros({1, 4, 4}), 2, 4), ShapeError);
}

TEST(UpsampleNearest, GradientCountsReplicas) {
  Tensor x = Tensor::fromData({1, 2, 2}, {1, 2, 3, 4}, true);
  Graph g;
  g.backward(sum(g, upsampleNearest(g, x, 5, 4)));
  // Rows map 0,0,0,1,1 (counts 3/2); columns 0,0,1,1 (counts 2/2).
  EXPECT_EQ(x.grad()[0], 6.0);
  EXPECT_EQ(x.grad()[1], 6.0);
  EXPECT_EQ(x.grad()[2], 4.0);
  EXPECT_EQ(x.grad()[3], 4.0);
  const auto r = finiteDiffCheck([](Graph& gg, const Tensor& t) { return sum(gg, upsampleNearest(gg, t, 5, 4)); }, x);
  EXPECT_TRUE(r.passes(1e-6));
}

TEST(FiniteDiffCheck, QuadraticIsExact) {
  Rng rng(1);
  Tensor x = randomTensor(rng, {3, 4});
  const auto r = finiteDiffCheck([](Graph& g, const Tensor& t) { return sum(g, mul(g, t, t)); }, x, 1e-5);
  EXPECT_LE(r.maxRelError, 1e-8);
}

TEST(FiniteDiffCheck, DetectsWrongAdjoint) {
  // Doubles its input but reports gradient 1.
  auto broken = [](Graph& g, const Tensor& x) {
    Tensor out = g.makeOutput(x.shape(), {&x});
    for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = 2.0 * x[i];
    if (out.requiresGrad())
      g.record("broken", [x, out](Graph& gg) {
        auto gx = gg.gradOf(x);
        auto go = gg.outputGrad(out);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
      });
    return sum(g, out);
  };
  Rng rng(2);
  const auto r = finiteDiffCheck(broken, randomTensor(rng, {4}));
  EXPECT_FALSE(r.passes(1e-4));
  EXPECT_NEAR(r.maxRelError, 0.5, 1e-6);
}

TEST(FiniteDiffCheck, NonFiniteIsFailure) {
  Tensor x = Tensor::fromData({2}, {1.0, -1.0});
  const auto r = finiteDiffCheck([](Graph& g, const Tensor& t) { return scale(g, sum(g, t), INFINITY); }, x);
  EXPECT_FALSE(r.finite);
  EXPECT_FALSE(r.passes(1.0));
}

TEST(GradientSuite, TwentySeedsWithinTolerance) {
  const auto start = std::chrono::steady_clock::now();
  std::size_t rows = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed)
    for (const auto& row : runGradcheckSuite(seed)) {
      ++rows;
      EXPECT_TRUE(row.passed()) << row.op << "/" << row.input << " seed " << seed << " err "
                                << row.result.maxRelError;
      EXPECT_LE(row.tolerance, row.op.find("Loss") != std::string::npos ? 1e-4 : 1e-6);
    }
  EXPECT_GE(rows, 20u * 40u);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 120.0);
}

TEST(Graph, BackwardReplaysInReverseOnce) {
  Rng rng(4);
  Tensor x = randomTensor(rng, {2, 3, 3});
  x.setRequiresGrad(true);
  Graph g;
  Tensor y = silu(g, x);
  Tensor z = globalAvgPool(g, mul(g, y, x));
  Tensor loss = sum(g, sigmoid(g, z));
  const auto names = g.opNames();
  g.backward(loss);
  const auto& trace = g.lastBackwardTrace();
  ASSERT_EQ(trace.size(), names.size());
  for (std::size_t i = 0; i < names.size(); ++i) EXPECT_EQ(trace[i], names[names.size() - 1 - i]);
}

TEST(Graph, ClearReleasesReferences) {
  Tensor x = Tensor::full({4}, 1.0, true);
  Graph g;
  Tensor y = sum(g, silu(g, x));
  const long before = x.handle().use_count();
  g.backward(y);
  g.clear();
  EXPECT_GT(before, 1);
  EXPECT_EQ(g.opCount(), 0u);
  EXPECT_EQ(x.handle().use_count(), 1);
}

TEST(Graph, ForwardIsBitDeterministic) {
  Rng rng(9);
  Tensor in = randomTensor(rng, {3, 16, 16});
  Tensor k = randomTensor(rng, {5, 3, 3, 3});
  Graph a(false), b(false);
  Tensor o1 = silu(a, conv2d(a, in, k, Tensor(), 2, 1));
  Tensor o2 = silu(b, conv2d(b, in, k, Tensor(), 2, 1));
  ASSERT_EQ(o1.size(), o2.size());
  for (std::size_t i = 0; i < o1.size(); ++i) EXPECT_EQ(o1[i], o2[i]);
}

TEST(Graph, NoRecordingMeansNoGradient) {
  Tensor x = Tensor::full({3}, 2.0, true);
  Graph g(false);
  Tensor y = sum(g, mul(g, x, x));
  EXPECT_EQ(g.opCount(), 0u);
  EXPECT_EQ(y.item(), 12.0);
}
