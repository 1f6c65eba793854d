#include "rpdac/rpdac.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace rpdac {

int DomainLabel::forHead(std::size_t head) const {
  switch (head) {
    case 0:
      return scanner;
    case 1:
      return tissue;
    case 2:
      return caseId;
    default:
      throw std::out_of_range("DomainLabel has no field for head " + std::to_string(head));
  }
}

PrototypeBank::PrototypeBank(std::size_t n) : n_(n) {
  if (n < 2) throw std::invalid_argument("prototype bank dimension must be >= 2");
  anchors_ = Tensor::zeros({n, n});
  prototypes_ = Tensor::zeros({n, n}, true);
  for (std::size_t i = 0; i < n; ++i) {
    anchors_.data()[i * n + i] = 1.0;
    prototypes_.data()[i * n + i] = 0.1;
  }
}

std::vector<double> PrototypeBank::prototype(std::size_t i) const {
  auto d = prototypes_.data();
  return {d.begin() + i * n_, d.begin() + (i + 1) * n_};
}

std::vector<double> PrototypeBank::centroid() const {
  std::vector<double> c(n_, 0.0);
  for (std::size_t l = 0; l < n_; ++l)
    for (std::size_t j = 0; j < n_; ++j) c[j] += prototypes_[l * n_ + j];
  for (double& v : c) v /= static_cast<double>(n_);
  return c;
}

DacModel::DacModel(std::size_t tapChannels, DacHeadConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)), tapChannels_(tapChannels) {
  if (cfg_.headDims.empty()) throw std::invalid_argument("DAC needs at least one head");
  if (cfg_.headDims.size() > 3) throw std::invalid_argument("DAC supports at most 3 heads (scanner, tissue, case)");
  for (auto n : cfg_.headDims)
    if (n < 2) throw std::invalid_argument("DAC head dimension must be >= 2");
  Rng rng(seed);
  const std::size_t r = cfg_.reducedChannels;
  params_.push_back({"dac.reduce.weight", uniformInit({r, tapChannels, 1, 1}, tapChannels, rng)});
  params_.push_back({"dac.reduce.bias", uniformInit({r}, tapChannels, rng)});
  params_.push_back({"dac.down0.weight", uniformInit({r, r, 3, 3}, r * 9, rng)});
  params_.push_back({"dac.down0.bias", uniformInit({r}, r * 9, rng)});
  params_.push_back({"dac.down1.weight", uniformInit({r, r, 3, 3}, r * 9, rng)});
  params_.push_back({"dac.down1.bias", uniformInit({r}, r * 9, rng)});
  for (std::size_t i = 0; i < cfg_.headDims.size(); ++i) {
    const std::string prefix = "dac.head" + std::to_string(i);
    params_.push_back({prefix + ".weight", uniformInit({cfg_.headDims[i], r}, r, rng)});
    params_.push_back({prefix + ".bias", uniformInit({cfg_.headDims[i]}, r, rng)});
  }
}

DacPrediction DacModel::forward(Graph& g, std::span<const Tensor> taps) const {
  if (taps.size() != 3) throw ShapeError("DAC expects exactly 3 feature maps, got " + std::to_string(taps.size()));
  std::size_t h = 0, w = 0, channels = 0;
  for (const auto& t : taps) {
    if (t.rank() != 3) throw ShapeError("DAC feature maps must be [C,H,W]");
    h = std::max(h, t.dim(1));
    w = std::max(w, t.dim(2));
    channels += t.dim(0);
  }
  if (channels != tapChannels_)
    throw ShapeError("DAC built for " + std::to_string(tapChannels_) + " tap channels, got " +
                     std::to_string(channels));
  std::vector<Tensor> up;
  up.reserve(3);
  for (const auto& t : taps) up.push_back(t.dim(1) == h && t.dim(2) == w ? t : upsampleNearest(g, t, h, w));
  Tensor x = concatChannels(g, up);
  const auto& p = params_;
  x = activate(g, conv2d(g, x, p[0].tensor, p[1].tensor, 1, 0), cfg_.activation);
  x = activate(g, conv2d(g, x, p[2].tensor, p[3].tensor, 2, 1), cfg_.activation);
  x = activate(g, conv2d(g, x, p[4].tensor, p[5].tensor, 2, 1), cfg_.activation);
  Tensor pooled = globalAvgPool(g, x);
  DacPrediction pred;
  for (std::size_t i = 0; i < cfg_.headDims.size(); ++i)
    pred.z.push_back(linear(g, pooled, p[6 + 2 * i].tensor, p[7 + 2 * i].tensor));
  return pred;
}

std::vector<PrototypeBank> makeBanks(const DacHeadConfig& cfg) {
  std::vector<PrototypeBank> banks;
  for (auto n : cfg.headDims) banks.emplace_back(n);
  return banks;
}

std::vector<NamedParameter> prototypeParameters(std::vector<PrototypeBank>& banks) {
  std::vector<NamedParameter> out;
  for (std::size_t i = 0; i < banks.size(); ++i)
    out.push_back({"dac.head" + std::to_string(i) + ".prototypes", banks[i].prototypes(), false});
  return out;
}

namespace {

void checkBatch(std::span<const PrototypeBank> banks, std::span<const DacPrediction> preds) {
  for (const auto& pred : preds) {
    if (pred.z.size() != banks.size())
      throw ShapeError("prediction has " + std::to_string(pred.z.size()) + " heads, expected " +
                       std::to_string(banks.size()));
    for (std::size_t i = 0; i < banks.size(); ++i)
      if (pred.z[i].size() != banks[i].dim()) throw ShapeError("prediction length does not match head dimension");
  }
}

}  // namespace

Tensor dacLoss(Graph& g, std::span<const PrototypeBank> banks, std::span<const DacPrediction> preds,
               std::span<const DomainLabel> labels, double normalizer) {
  if (preds.empty()) throw std::invalid_argument("dacLoss needs a non-empty batch");
  if (labels.size() != preds.size()) throw std::invalid_argument("dacLoss: one label per prediction required");
  checkBatch(banks, preds);
  const double n = normalizer > 0.0 ? normalizer : static_cast<double>(preds.size());
  std::vector<Tensor> terms;
  for (std::size_t i = 0; i < banks.size(); ++i) {
    const auto& bank = banks[i];
    const double weight = 1.0 / (n * static_cast<double>(bank.dim()));
    for (std::size_t s = 0; s < preds.size(); ++s) {
      const int l = labels[s].forHead(i);
      if (l < 0 || static_cast<std::size_t>(l) >= bank.dim())
        throw std::out_of_range("label " + std::to_string(l) + " out of range for head " + std::to_string(i) +
                                " of dimension " + std::to_string(bank.dim()));
      const auto li = static_cast<std::size_t>(l);
      Tensor p = selectRow(g, bank.prototypes(), li);
      Tensor a = selectRow(g, bank.anchors(), li);
      Tensor tether = squaredDistance(g, p, a);
      Tensor pull = squaredDistance(g, p, preds[s].z[i]);
      terms.push_back(add(g, scale(g, tether, 0.1 * weight), scale(g, pull, 0.9 * weight)));
    }
  }
  return sumScalars(g, terms);
}

Tensor agnosticLoss(Graph& g, std::span<const PrototypeBank> banks, std::span<const DacPrediction> preds,
                    double normalizer) {
  if (preds.empty()) throw std::invalid_argument("agnosticLoss needs a non-empty batch");
  checkBatch(banks, preds);
  const double n = normalizer > 0.0 ? normalizer : static_cast<double>(preds.size());
  std::vector<Tensor> terms;
  for (std::size_t i = 0; i < banks.size(); ++i) {
    const Tensor frozen = banks[i].prototypes().detach();
    const double weight = 1.0 / (n * static_cast<double>(banks[i].dim()));
    for (const auto& pred : preds) terms.push_back(scale(g, squaredDistanceToPoints(g, pred.z[i], frozen), weight));
  }
  return sumScalars(g, terms);
}

std::vector<double> prototypeFixedPoint(std::span<const double> anchor, std::span<const double> z) {
  if (anchor.size() != z.size()) throw std::invalid_argument("prototypeFixedPoint: dimension mismatch");
  std::vector<double> p(anchor.size());
  for (std::size_t j = 0; j < p.size(); ++j) p[j] = 0.1 * anchor[j] + 0.9 * z[j];
  return p;
}

void writePrototypeCsvHeader(std::ostream& os, std::span<const PrototypeBank> banks) {
  std::size_t maxDim = 0;
  for (const auto& b : banks) maxDim = std::max(maxDim, b.dim());
  os << "step,head,index";
  for (std::size_t j = 0; j < maxDim; ++j) os << ",c" << j;
  os << '\n';
}

void appendPrototypeCsv(std::ostream& os, std::size_t step, std::span<const PrototypeBank> banks) {
  const auto oldPrecision = os.precision(17);
  for (std::size_t i = 0; i < banks.size(); ++i) {
    const std::size_t n = banks[i].dim();
    for (std::size_t l = 0; l < n; ++l) {
      os << step << ',' << i << ',' << l;
      for (std::size_t j = 0; j < n; ++j) os << ',' << banks[i].prototypes()[l * n + j];
      os << '\n';
    }
  }
  os.precision(oldPrecision);
}

}  // namespace rpdac
