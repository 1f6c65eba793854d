#include "rpdac/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace rpdac {

std::string shapeToString(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shapeNumel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requiresGrad) { return full(std::move(shape), 0.0, requiresGrad); }

Tensor Tensor::full(Shape shape, double value, bool requiresGrad) {
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shapeToString(shape));
  auto s = std::make_shared<TensorStorage>();
  s->value.assign(shapeNumel(shape), value);
  s->shape = std::move(shape);
  s->requiresGrad = requiresGrad;
  return Tensor(std::move(s));
}

Tensor Tensor::fromData(Shape shape, std::vector<double> data, bool requiresGrad) {
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shapeToString(shape));
  if (shapeNumel(shape) != data.size())
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shapeToString(shape));
  auto s = std::make_shared<TensorStorage>();
  s->shape = std::move(shape);
  s->value = std::move(data);
  s->requiresGrad = requiresGrad;
  return Tensor(std::move(s));
}

Tensor Tensor::scalar(double value, bool requiresGrad) { return fromData({1}, {value}, requiresGrad); }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shapeToString(shape()));
  return s_->value[0];
}

std::span<double> Tensor::mutableGrad() {
  if (s_->grad.empty()) s_->grad.assign(s_->value.size(), 0.0);
  return s_->grad;
}

void Tensor::zeroGrad() {
  if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  auto s = std::make_shared<TensorStorage>();
  s->shape = s_->shape;
  s->value = s_->value;
  return Tensor(std::move(s));
}

// ---- Graph ----------------------------------------------------------------

Tensor Graph::makeOutput(Shape shape, std::initializer_list<const Tensor*> inputs) {
  bool needs = false;
  if (record_)
    for (const Tensor* t : inputs)
      if (t && t->defined() && t->requiresGrad()) needs = true;
  Tensor out = Tensor::zeros(std::move(shape), needs);
  out.s_->producedByOp = true;
  return out;
}

Tensor Graph::makeOutput(Shape shape, std::span<const Tensor> inputs) {
  bool needs = false;
  if (record_)
    for (const Tensor& t : inputs)
      if (t.defined() && t.requiresGrad()) needs = true;
  Tensor out = Tensor::zeros(std::move(shape), needs);
  out.s_->producedByOp = true;
  return out;
}

void Graph::record(std::string_view name, std::function<void(Graph&)> backward) {
  if (!record_) return;
  ops_.push_back({name, std::move(backward)});
}

std::span<double> Graph::gradOf(const Tensor& t) {
  TensorStorage* s = t.storage();
  if (s->producedByOp) {
    if (s->grad.empty()) s->grad.assign(s->value.size(), 0.0);
    return s->grad;
  }
  auto it = leafIndex_.find(s);
  if (it == leafIndex_.end()) {
    it = leafIndex_.emplace(s, leafGrads_.size()).first;
    leafGrads_.push_back({t.handle(), std::vector<double>(s->value.size(), 0.0)});
  }
  return leafGrads_[it->second].grad;
}

std::span<const double> Graph::outputGrad(const Tensor& t) { return t.storage()->grad; }

void Graph::backward(const Tensor& loss) {
  backwardDeferred(loss);
  flushLeafGrads();
}

void Graph::backwardDeferred(const Tensor& loss) {
  if (loss.size() != 1) throw ShapeError("backward() needs a scalar loss, got " + shapeToString(loss.shape()));
  trace_.clear();
  if (!loss.requiresGrad()) return;
  gradOf(loss)[0] += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    trace_.push_back(it->name);
    it->backward(*this);
  }
}

void Graph::flushLeafGrads() {
  for (auto& lg : leafGrads_) {
    auto& dst = lg.leaf->grad;
    if (dst.empty()) dst.assign(lg.grad.size(), 0.0);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += lg.grad[i];
    std::fill(lg.grad.begin(), lg.grad.end(), 0.0);
  }
}

std::vector<std::string_view> Graph::opNames() const {
  std::vector<std::string_view> names;
  names.reserve(ops_.size());
  for (const auto& e : ops_) names.push_back(e.name);
  return names;
}

void Graph::clear() {
  ops_.clear();
  trace_.clear();
  leafIndex_.clear();
  leafGrads_.clear();
}

// ---- helpers --------------------------------------------------------------

namespace {

void requireRank(const Tensor& t, std::size_t rank, const char* what) {
  if (!t.defined()) throw ShapeError(std::string(what) + ": undefined tensor");
  if (t.rank() != rank)
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shapeToString(t.shape()));
}

void requireSameShape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + shapeToString(a.shape()) + " vs " +
                     shapeToString(b.shape()));
}

bool wantsGrad(const Tensor& t) { return t.defined() && t.requiresGrad(); }

double sigmoidScalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Output rows/cols [lo, hi) whose input coordinate o*stride - pad + k lies in [0, extent).
std::pair<std::size_t, std::size_t> validRange(std::size_t outExtent, std::size_t inExtent, int stride,
                                               int pad, std::size_t k) {
  const long off = static_cast<long>(k) - pad;
  long lo = 0;
  if (off < 0) lo = (-off + stride - 1) / stride;
  long hi = (static_cast<long>(inExtent) - 1 - off);
  hi = hi < 0 ? 0 : hi / stride + 1;
  hi = std::min<long>(hi, static_cast<long>(outExtent));
  if (lo > hi) lo = hi;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace

// ---- conv2d ---------------------------------------------------------------

Tensor conv2d(Graph& g, const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding) {
  requireRank(input, 3, "conv2d input");
  requireRank(kernel, 4, "conv2d kernel");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != cin)
    throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, kernel expects " +
                     std::to_string(kernel.dim(1)));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout))
    throw ShapeError("conv2d: bias shape " + shapeToString(bias.shape()) + " does not match C_out " +
                     std::to_string(cout));
  if (h + 2 * padding < kh || w + 2 * padding < kw) throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
  const std::size_t ow = (w + 2 * padding - kw) / stride + 1;

  Tensor out = g.makeOutput({cout, oh, ow}, {&input, &kernel, &bias});
  const double* in = input.data().data();
  const double* k = kernel.data().data();
  double* o = out.data().data();
  const std::size_t s = static_cast<std::size_t>(stride);

  for (std::size_t co = 0; co < cout; ++co) {
    double* oplane = o + co * oh * ow;
    if (bias.defined()) std::fill(oplane, oplane + oh * ow, bias[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* iplane = in + ci * h * w;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const auto [y0, y1] = validRange(oh, h, stride, padding, ky);
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const auto [x0, x1] = validRange(ow, w, stride, padding, kx);
          const double wv = k[((co * cin + ci) * kh + ky) * kw + kx];
          const std::ptrdiff_t colOff = static_cast<std::ptrdiff_t>(kx) - padding;
          for (std::size_t oy = y0; oy < y1; ++oy) {
            const double* irow = iplane + (oy * s + ky - padding) * w;
            double* orow = oplane + oy * ow;
            for (std::size_t ox = x0; ox < x1; ++ox)
              orow[ox] += wv * irow[static_cast<std::ptrdiff_t>(ox * s) + colOff];
          }
        }
      }
    }
  }

  if (out.requiresGrad()) {
    g.record("conv2d", [input, kernel, bias, out, stride, padding, cin, h, w, cout, kh, kw, oh, ow](Graph& gr) {
      auto gy = gr.outputGrad(out);
      if (gy.empty()) return;
      const std::size_t s = static_cast<std::size_t>(stride);
      const double* in = input.data().data();
      const double* k = kernel.data().data();
      double* gin = wantsGrad(input) ? gr.gradOf(input).data() : nullptr;
      double* gk = wantsGrad(kernel) ? gr.gradOf(kernel).data() : nullptr;
      if (wantsGrad(bias)) {
        auto gb = gr.gradOf(bias);
        for (std::size_t co = 0; co < cout; ++co) {
          double acc = 0.0;
          for (std::size_t i = 0; i < oh * ow; ++i) acc += gy[co * oh * ow + i];
          gb[co] += acc;
        }
      }
      for (std::size_t co = 0; co < cout; ++co) {
        const double* gplane = gy.data() + co * oh * ow;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const double* iplane = in + ci * h * w;
          double* giplane = gin ? gin + ci * h * w : nullptr;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const auto [y0, y1] = validRange(oh, h, stride, padding, ky);
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const auto [x0, x1] = validRange(ow, w, stride, padding, kx);
              const std::size_t kidx = ((co * cin + ci) * kh + ky) * kw + kx;
              const double wv = k[kidx];
              const std::ptrdiff_t colOff = static_cast<std::ptrdiff_t>(kx) - padding;
              double kacc = 0.0;
              for (std::size_t oy = y0; oy < y1; ++oy) {
                const std::size_t rowBase = (oy * s + ky - padding) * w;
                const double* grow = gplane + oy * ow;
                if (gk) {
                  const double* irow = iplane + rowBase;
                  for (std::size_t ox = x0; ox < x1; ++ox)
                    kacc += grow[ox] * irow[static_cast<std::ptrdiff_t>(ox * s) + colOff];
                }
                if (giplane) {
                  double* girow = giplane + rowBase;
                  for (std::size_t ox = x0; ox < x1; ++ox)
                    girow[static_cast<std::ptrdiff_t>(ox * s) + colOff] += wv * grow[ox];
                }
              }
              if (gk) gk[kidx] += kacc;
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- gatedConcat ----------------------------------------------------------

Tensor gatedConcat(Graph& g, const Tensor& early, const Tensor& late, const Tensor& gate) {
  requireRank(early, 3, "gatedConcat early");
  requireRank(late, 3, "gatedConcat late");
  if (!gate.defined() || gate.size() != 1) throw ShapeError("gatedConcat: gate must be a scalar");
  if (early.dim(1) != late.dim(1) || early.dim(2) != late.dim(2))
    throw ShapeError("gatedConcat: spatial mismatch " + shapeToString(early.shape()) + " vs " +
                     shapeToString(late.shape()));
  const std::size_t n1 = early.size(), n2 = late.size();
  Tensor out = g.makeOutput({early.dim(0) + late.dim(0), early.dim(1), early.dim(2)}, {&early, &late, &gate});
  const double sg = sigmoidScalar(gate[0]);
  auto o = out.data();
  for (std::size_t i = 0; i < n1; ++i) o[i] = sg * early[i];
  std::copy(late.data().begin(), late.data().end(), o.begin() + n1);

  if (out.requiresGrad()) {
    g.record("gatedConcat", [early, late, gate, out, sg, n1, n2](Graph& gr) {
      auto gy = gr.outputGrad(out);
      if (gy.empty()) return;
      if (wantsGrad(early)) {
        auto ge = gr.gradOf(early);
        for (std::size_t i = 0; i < n1; ++i) ge[i] += sg * gy[i];
      }
      if (wantsGrad(late)) {
        auto gl = gr.gradOf(late);
        for (std::size_t i = 0; i < n2; ++i) gl[i] += gy[n1 + i];
      }
      if (wantsGrad(gate)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n1; ++i) acc += gy[i] * early[i];
        gr.gradOf(gate)[0] += sg * (1.0 - sg) * acc;
      }
    });
  }
  return out;
}

// ---- pooling / resampling -------------------------------------------------

Tensor globalAvgPool(Graph& g, const Tensor& input) {
  requireRank(input, 3, "globalAvgPool");
  const std::size_t c = input.dim(0), hw = input.dim(1) * input.dim(2);
  Tensor out = g.makeOutput({c}, {&input});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += input[ch * hw + i];
    out.data()[ch] = acc / static_cast<double>(hw);
  }
  if (out.requiresGrad()) {
    g.record("globalAvgPool", [input, out, c, hw](Graph& gr) {
      auto gy = gr.outputGrad(out);
      if (gy.empty()) return;
      auto gi = gr.gradOf(input);
      const double inv = 1.0 / static_cast<double>(hw);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i) gi[ch * hw + i] += gy[ch] * inv;
    });
  }
  return out;
}

Tensor upsampleNearest(Graph& g, const Tensor& input, std::size_t targetH, std::size_t targetW) {
  requireRank(input, 3, "upsampleNearest");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (targetH < h || targetW < w)
    throw ShapeError("upsampleNearest: cannot downscale " + shapeToString(input.shape()) + " to " +
                     std::to_string(targetH) + "x" + std::to_string(targetW));
  std::vector<std::size_t> srcY(targetH), srcX(targetW);
  for (std::size_t y = 0; y < targetH; ++y) srcY[y] = y * h / targetH;
  for (std::size_t x = 0; x < targetW; ++x) srcX[x] = x * w / targetW;
  Tensor out = g.makeOutput({c, targetH, targetW}, {&input});
  auto o = out.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < targetH; ++y)
      for (std::size_t x = 0; x < targetW; ++x)
        o[(ch * targetH + y) * targetW + x] = input[(ch * h + srcY[y]) * w + srcX[x]];
  if (out.requiresGrad()) {
    g.record("upsampleNearest", [input, out, c, h, w, targetH, targetW, srcY, srcX](Graph& gr) {
      auto gy = gr.outputGrad(out);
      if (gy.empty()) return;
      auto gi = gr.gradOf(input);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < targetH; ++y)
          for (std::size_t x = 0; x < targetW; ++x)
            gi[(ch * h + srcY[y]) * w + srcX[x]] += gy[(ch * targetH + y) * targetW + x];
    });
  }
  return out;
}

// ---- linear ---------------------------------------------------------------

Tensor linear(Graph& g, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  requireRank(x, 1, "linear input");
  requireRank(weight, 2, "linear weight");
  const std::size_t nout = weight.dim(0), nin = weight.dim(1);
  if (x.dim(0) != nin)
    throw ShapeError("linear: input length " + std::to_string(x.dim(0)) + " vs weight " +
                     shapeToString(weight.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != nout))
    throw ShapeError("linear: bias shape " + shapeToString(bias.shape()));
  Tensor out = g.makeOutput({nout}, {&x, &weight, &bias});
  for (std::size_t r = 0; r < nout; ++r) {
    double acc = bias.defined() ? bias[r] : 0.0;
    for (std::size_t c = 0; c < nin; ++c) acc += weight[r * nin + c] * x[c];
    out.data()[r] = acc;
  }
  if (out.requiresGrad()) {
    g.record("linear", [x, weight, bias, out, nout, nin](Graph& gr) {
      auto gy = gr.outputGrad(out);
      if (gy.empty()) return;
      if (wantsGrad(bias)) {
        auto gb = gr.gradOf(bias);
        for (std::size_t r = 0; r < nout; ++r) gb[r] += gy[r];
      }
      if (wantsGrad(weight)) {
        auto gw = gr.gradOf(weight);
        for (std::size_t r = 0; r < nout; ++r)
          for (std::size_t c = 0; c < nin; ++c) gw[r * nin + c] += gy[r] * x[c];
      }
      if (wantsGrad(x)) {
        auto gx = gr.gradOf(x);
        for (std::size_t r = 0; r < nout; ++r)
          for (std::size_t c = 0; c < nin; ++c) gx[c] += gy[r] * weight[r * nin + c];
      }
    });
  }
  return out;
}

// ---- elementwise ----------------------------------------------------------

namespace {

template <class Fwd, class Deriv>
Tensor unaryOp(Graph& g, const Tensor& x, std::string_view name, Fwd fwd, Deriv deriv) {
  Tensor out = g.makeOutput(x.shape(), {&x});
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(x[i]);
  if (out.requiresGrad()) {
    g.record(name, [x, out, deriv](Graph& gr) {
      auto gy = gr.outputGrad(out);
      if (gy.empty()) return;
      auto gx = gr.gradOf(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv(x[i], out[i]);
    });
  }
  return out;
}

}  // namespace

Tensor silu(Graph& g, const Tensor& x) {
  return unaryOp(
      g, x, "silu", [](double v) { return v * sigmoidScalar(v); },
      [](double v, double) {
        const double s = sigmoidScalar(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor relu(Graph& g, const Tensor& x) {
  return unaryOp(
      g, x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(Graph& g, const Tensor& x) {
  return unaryOp(
      g, x, "sigmoid", [](double v) { return sigmoidScalar(v); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor scale(Graph& g, const Tensor& x, double factor) {
  return unaryOp(
      g, x, "scale", [factor](double v) { return factor * v; }, [factor](double, double) { return factor; });
}

Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
  requireSameShape(a, b, "add");
  Tensor out = g.makeOutput(a.shape(), {&a, &b});
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a[i] + b[i];
  if (out.requiresGrad()) {
    g.record("add", [a, b, out](Graph& gr) {
      auto gy = gr.outputGrad(out);
      if (gy.empty()) return;
      if (wantsGrad(a)) {
        auto ga = gr.gradOf(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
      }
      if (wantsGrad(b)) {
        auto gb = gr.gradOf(b);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i];
      }
    });
  }
  return out;
}

Tensor sub(Graph& g, const Tensor& a, const Tensor& b) {
  requireSameShape(a, b, "sub");
  Tensor out = g.makeOutput(a.shape(), {&a, &b});
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a[i] - b[i];
  if (out.requiresGrad()) {
    g.record("sub", [a, b, out](Graph& gr) {
      auto gy = gr.outputGrad(out);
      if (gy.empty()) return;
      if (wantsGrad(a)) {
        auto ga = gr.gradOf(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
      }
      if (wantsGrad(b)) {
        auto gb = gr.gradOf(b);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
      }
    });
  }
  return out;
}

Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
  requireSameShape(a, b, "mul");
  Tensor out = g.makeOutput(a.shape(), {&a, &b});
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a[i] * b[i];
  if (out.requiresGrad()) {
    g.record("mul", [a, b, out](Graph& gr) {
      auto gy = gr.outputGrad(out);
      if (gy.empty()) return;
      if (wantsGrad(a)) {
        auto ga = gr.gradOf(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * b[i];
      }
      if (wantsGrad(b)) {
        auto gb = gr.gradOf(b);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * a[i];
      }
    });
  }
  return out;
}

// ---- structural -----------------------------------------------------------

Tensor concatChannels(Graph& g, std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concatChannels: no inputs");
  const std::size_t rank = parts[0].rank();
  std::size_t channels = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw ShapeError("concatChannels: rank mismatch");
    for (std::size_t d = 1; d < rank; ++d)
      if (p.dim(d) != parts[0].dim(d))
        throw ShapeError("concatChannels: trailing shape mismatch " + shapeToString(p.shape()) + " vs " +
                         shapeToString(parts[0].shape()));
    channels += p.dim(0);
  }
  Shape shape = parts[0].shape();
  shape[0] = channels;
  Tensor out = g.makeOutput(shape, parts);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + offset);
    offset += p.size();
  }
  if (out.requiresGrad()) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    g.record("concatChannels", [inputs, out](Graph& gr) {
      auto gy = gr.outputGrad(out);
      if (gy.empty()) return;
      std::size_t offset = 0;
      for (const auto& p : inputs) {
        if (wantsGrad(p)) {
          auto gp = gr.gradOf(p);
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += gy[offset + i];
        }
        offset += p.size();
      }
    });
  }
  return out;
}

Tensor sliceChannels(Graph& g, const Tensor& x, std::size_t begin, std::size_t end) {
  if (!x.defined() || x.rank() < 1 || begin >= end || end > x.dim(0))
    throw ShapeError("sliceChannels: invalid range [" + std::to_string(begin) + "," + std::to_string(end) + ")");
  Shape shape = x.shape();
  shape[0] = end - begin;
  const std::size_t inner = x.size() / x.dim(0);
  Tensor out = g.makeOutput(shape, {&x});
  std::copy(x.data().begin() + begin * inner, x.data().begin() + end * inner, out.data().begin());
  if (out.requiresGrad()) {
    g.record("sliceChannels", [x, out, begin, inner](Graph& gr) {
      auto gy = gr.outputGrad(out);
      if (gy.empty()) return;
      auto gx = gr.gradOf(x);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[begin * inner + i] += gy[i];
    });
  }
  return out;
}

Tensor selectRow(Graph& g, const Tensor& matrix, std::size_t index) {
  requireRank(matrix, 2, "selectRow");
  if (index >= matrix.dim(0))
    throw ShapeError("selectRow: index " + std::to_string(index) + " out of range for " +
                     shapeToString(matrix.shape()));
  const std::size_t cols = matrix.dim(1);
  Tensor out = g.makeOutput({cols}, {&matrix});
  std::copy_n(matrix.data().begin() + index * cols, cols, out.data().begin());
  if (out.requiresGrad()) {
    g.record("selectRow", [matrix, out, index, cols](Graph& gr) {
      auto gy = gr.outputGrad(out);
      if (gy.empty()) return;
      auto gm = gr.gradOf(matrix);
      for (std::size_t c = 0; c < cols; ++c) gm[index * cols + c] += gy[c];
    });
  }
  return out;
}

// ---- reductions & losses --------------------------------------------------

Tensor sum(Graph& g, const Tensor& x) {
  Tensor out = g.makeOutput({1}, {&x});
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  out.data()[0] = acc;
  if (out.requiresGrad()) {
    g.record("sum", [x, out](Graph& gr) {
      auto gy = gr.outputGrad(out);
      if (gy.empty()) return;
      auto gx = gr.gradOf(x);
      for (auto& v : gx) v += gy[0];
    });
  }
  return out;
}

Tensor sumScalars(Graph& g, std::span<const Tensor> scalars) {
  if (scalars.empty()) return Tensor::scalar(0.0);
  for (const auto& s : scalars)
    if (s.size() != 1) throw ShapeError("sumScalars: non-scalar input " + shapeToString(s.shape()));
  Tensor out = g.makeOutput({1}, scalars);
  double acc = 0.0;
  for (const auto& s : scalars) acc += s[0];
  out.data()[0] = acc;
  if (out.requiresGrad()) {
    std::vector<Tensor> inputs(scalars.begin(), scalars.end());
    g.record("sumScalars", [inputs, out](Graph& gr) {
      auto gy = gr.outputGrad(out);
      if (gy.empty()) return;
      for (const auto& s : inputs)
        if (wantsGrad(s)) gr.gradOf(s)[0] += gy[0];
    });
  }
  return out;
}

Tensor squaredDistance(Graph& g, const Tensor& a, const Tensor& b) {
  requireSameShape(a, b, "squaredDistance");
  Tensor out = g.makeOutput({1}, {&a, &b});
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  out.data()[0] = acc;
  if (out.requiresGrad()) {
    g.record("squaredDistance", [a, b, out](Graph& gr) {
      auto gy = gr.outputGrad(out);
      if (gy.empty()) return;
      double* ga = wantsGrad(a) ? gr.gradOf(a).data() : nullptr;
      double* gb = wantsGrad(b) ? gr.gradOf(b).data() : nullptr;
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = 2.0 * gy[0] * (a[i] - b[i]);
        if (ga) ga[i] += d;
        if (gb) gb[i] -= d;
      }
    });
  }
  return out;
}

Tensor squaredDistanceToPoints(Graph& g, const Tensor& x, const Tensor& points) {
  requireRank(x, 1, "squaredDistanceToPoints x");
  requireRank(points, 2, "squaredDistanceToPoints points");
  const std::size_t n = points.dim(0), d = points.dim(1);
  if (x.dim(0) != d) throw ShapeError("squaredDistanceToPoints: dimension mismatch");
  std::vector<double> centroidSum(d, 0.0);
  double acc = 0.0;
  for (std::size_t l = 0; l < n; ++l)
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = x[j] - points[l * d + j];
      acc += diff * diff;
      centroidSum[j] += points[l * d + j];
    }
  Tensor out = g.makeOutput({1}, {&x});
  out.data()[0] = acc;
  if (out.requiresGrad()) {
    g.record("squaredDistanceToPoints", [x, out, n, d, centroidSum](Graph& gr) {
      auto gy = gr.outputGrad(out);
      if (gy.empty()) return;
      auto gx = gr.gradOf(x);
      for (std::size_t j = 0; j < d; ++j)
        gx[j] += 2.0 * gy[0] * (static_cast<double>(n) * x[j] - centroidSum[j]);
    });
  }
  return out;
}

Tensor bceWithLogits(Graph& g, const Tensor& logits, std::span<const double> targets,
                     std::span<const double> weights) {
  if (targets.size() != logits.size() || weights.size() != logits.size())
    throw ShapeError("bceWithLogits: targets/weights length mismatch");
  Tensor out = g.makeOutput({1}, {&logits});
  double acc = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double x = logits[i];
    acc += weights[i] * (std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x))));
  }
  out.data()[0] = acc;
  if (out.requiresGrad()) {
    std::vector<double> t(targets.begin(), targets.end()), w(weights.begin(), weights.end());
    g.record("bceWithLogits", [logits, out, t = std::move(t), w = std::move(w)](Graph& gr) {
      auto gy = gr.outputGrad(out);
      if (gy.empty()) return;
      auto gl = gr.gradOf(logits);
      for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += gy[0] * w[i] * (sigmoidScalar(logits[i]) - t[i]);
    });
  }
  return out;
}

Tensor weightedSquaredError(Graph& g, const Tensor& x, std::span<const double> targets,
                            std::span<const double> weights) {
  if (targets.size() != x.size() || weights.size() != x.size())
    throw ShapeError("weightedSquaredError: targets/weights length mismatch");
  Tensor out = g.makeOutput({1}, {&x});
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - targets[i];
    acc += weights[i] * d * d;
  }
  out.data()[0] = acc;
  if (out.requiresGrad()) {
    std::vector<double> t(targets.begin(), targets.end()), w(weights.begin(), weights.end());
    g.record("weightedSquaredError", [x, out, t = std::move(t), w = std::move(w)](Graph& gr) {
      auto gy = gr.outputGrad(out);
      if (gy.empty()) return;
      auto gx = gr.gradOf(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * gy[0] * w[i] * (x[i] - t[i]);
    });
  }
  return out;
}

// ---- finite differences ---------------------------------------------------

GradCheckResult finiteDiffCheck(const ScalarFn& f, Tensor x, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finiteDiffCheck: step must be positive");
  GradCheckResult result;
  const bool hadGrad = x.requiresGrad();
  x.setRequiresGrad(true);
  x.zeroGrad();

  std::vector<double> analytic;
  {
    Graph g;
    Tensor y = f(g, x);
    if (!std::isfinite(y.item())) {
      result.finite = false;
      x.setRequiresGrad(hadGrad);
      return result;
    }
    g.backward(y);
    analytic.assign(x.size(), 0.0);
    if (x.hasGrad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
  }

  auto eval = [&]() {
    Graph g(false);
    return f(g, x).item();
  };
  auto xs = x.data();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double orig = xs[i];
    xs[i] = orig + step;
    const double fp = eval();
    xs[i] = orig - step;
    const double fm = eval();
    xs[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(analytic[i])) {
      result.finite = false;
      result.worstIndex = i;
      break;
    }
    const double numeric = (fp - fm) / (2.0 * step);
    const double rel = std::abs(analytic[i] - numeric) / std::max({kGradCheckFloor, std::abs(numeric), std::abs(analytic[i])});
    if (i == 0 || rel > result.maxRelError) {
      result.maxRelError = rel;
      result.worstIndex = i;
      result.analytic = analytic[i];
      result.numeric = numeric;
    }
  }
  x.zeroGrad();
  x.setRequiresGrad(hadGrad);
  return result;
}

}  // namespace rpdac
