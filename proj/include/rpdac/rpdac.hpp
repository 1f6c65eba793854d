#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <vector>

#include "rpdac/nn.hpp"
#include "rpdac/tensor.hpp"

namespace rpdac {

/// Scanner, tissue and case index of a region. Head i of the DAC is
/// supervised by the i-th field (0: scanner, 1: tissue, 2: case).
struct DomainLabel {
  int scanner = 0;
  int tissue = 0;
  int caseId = 0;

  int forHead(std::size_t head) const;
  bool operator==(const DomainLabel&) const = default;
};

/// One RP-DAC head's geometry: fixed anchors A_i = e_i and moving
/// prototypes P_i (initialized at 0.1 e_i), both n x n, row i per class.
class PrototypeBank {
 public:
  explicit PrototypeBank(std::size_t n);

  std::size_t dim() const { return n_; }
  const Tensor& anchors() const { return anchors_; }
  const Tensor& prototypes() const { return prototypes_; }
  Tensor& prototypes() { return prototypes_; }
  std::vector<double> prototype(std::size_t i) const;
  std::vector<double> centroid() const;

 private:
  std::size_t n_;
  Tensor anchors_;
  Tensor prototypes_;
};

struct DacHeadConfig {
  std::size_t reducedChannels = 64;
  std::vector<std::size_t> headDims{4, 6, 403};
  Activation activation = Activation::SiLU;
  bool operator==(const DacHeadConfig&) const = default;
};

struct DacPrediction {
  std::vector<Tensor> z;  // one vector of length n_i per head
};

/// Domain classifier fed with the detector's three head inputs:
/// upsample to the largest map, concat, 1x1 conv to `reducedChannels`, two
/// 3x3 stride-2 convs, global average pool, one linear map per head.
class DacModel {
 public:
  DacModel(std::size_t tapChannels, DacHeadConfig cfg, std::uint64_t seed);

  DacPrediction forward(Graph& g, std::span<const Tensor> taps) const;

  const DacHeadConfig& config() const { return cfg_; }
  std::vector<NamedParameter>& parameters() { return params_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }
  const Tensor& reduceKernel() const { return params_[0].tensor; }

 private:
  DacHeadConfig cfg_;
  std::size_t tapChannels_;
  std::vector<NamedParameter> params_;
};

std::vector<PrototypeBank> makeBanks(const DacHeadConfig& cfg);
/// Prototype tensors wrapped as parameters (no weight decay).
std::vector<NamedParameter> prototypeParameters(std::vector<PrototypeBank>& banks);

/// sum_i 1/(N n_i) sum_samples [0.1 ||p_l - a_l||^2 + 0.9 ||p_l - z^(i)||^2].
/// `normalizer` is N; 0 means the number of predictions passed in (use the
/// full accumulated batch size when calling per mini-batch).
Tensor dacLoss(Graph& g, std::span<const PrototypeBank> banks, std::span<const DacPrediction> preds,
               std::span<const DomainLabel> labels, double normalizer = 0.0);

/// sum_i 1/(N n_i) sum_samples sum_l ||p_l - z^(i)||^2 with prototypes constant.
Tensor agnosticLoss(Graph& g, std::span<const PrototypeBank> banks, std::span<const DacPrediction> preds,
                    double normalizer = 0.0);

/// Minimizer of 0.1 ||p - a||^2 + 0.9 ||p - z||^2 over p.
std::vector<double> prototypeFixedPoint(std::span<const double> anchor, std::span<const double> z);

/// CSV rows `step,head,index,c0,c1,...` with every prototype of every bank.
void writePrototypeCsvHeader(std::ostream& os, std::span<const PrototypeBank> banks);
void appendPrototypeCsv(std::ostream& os, std::size_t step, std::span<const PrototypeBank> banks);

}  // namespace rpdac
