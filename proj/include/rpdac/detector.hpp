#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rpdac/image.hpp"
#include "rpdac/nn.hpp"
#include "rpdac/tensor.hpp"

namespace rpdac {

struct DetectorConfig {
  std::size_t inputSize = 256;
  std::size_t baseChannels = 16;
  double boxSize = 50.0;
  Activation activation = Activation::SiLU;
  /// Initial gate logit; sigmoid(4) ~ 0.98 starts close to plain concatenation.
  double gateInit = 4.0;
  /// Off: skip-joins are plain concatenations (reference architecture).
  bool gatedJoins = true;
  bool operator==(const DetectorConfig&) const = default;
};

inline constexpr std::array<std::size_t, 3> kScaleStrides{8, 16, 32};

/// Output of one detection scale.
struct ScaleOutput {
  std::size_t stride = 0;
  Tensor objectness;  // [1,H,W] logits
  Tensor offsets;     // [2,H,W] in [0,1], (x, y) position inside the cell
};

struct GridPrediction {
  std::size_t imageHeight = 0;
  std::size_t imageWidth = 0;
  std::array<ScaleOutput, 3> scales;
};

struct DetectorOutput {
  GridPrediction pred;
  std::array<Tensor, 3> taps;  // detection-head inputs at strides 8/16/32
};

struct Detection {
  double x = 0.0;
  double y = 0.0;
  double size = 0.0;
  double score = 0.0;
};

/// Small anchor-free trunk: a stride-4 stem, then three stages of
/// (stride-2 conv -> 3x3 conv -> gated concat of the two -> 1x1 fuse), each
/// stage feeding one detection head.
class Detector {
 public:
  Detector(DetectorConfig cfg, std::uint64_t seed);

  DetectorOutput forward(Graph& g, const Tensor& image) const;
  DetectorOutput forward(Graph& g, const RgbImage& image) const;

  const DetectorConfig& config() const { return cfg_; }
  std::vector<NamedParameter>& parameters() { return params_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }
  std::array<std::size_t, 3> tapChannels() const;
  std::size_t totalTapChannels() const;
  std::vector<Tensor> gates() const;
  std::vector<double> gateSigmoids() const;

 private:
  const Tensor& param(std::size_t i) const { return params_[i].tensor; }

  DetectorConfig cfg_;
  std::vector<NamedParameter> params_;
  std::array<std::size_t, 3> stageChannels_{};
};

/// Objectness BCE (positive = cell containing an annotation, at every scale;
/// positives weighted by #cells/#positives, averaged over cells) plus 5.0 x
/// mean squared offset error over positive cells, summed over scales.
Tensor detectionLoss(Graph& g, const GridPrediction& pred, std::span<const Point> annotations);

/// Cells with sigmoid(objectness) >= threshold become detections, followed by
/// greedy suppression of centers closer than boxSize / 2 (higher score kept).
std::vector<Detection> decode(const GridPrediction& pred, double threshold, double boxSize);

/// Global average pools of the three taps, concatenated.
std::vector<double> tapFeatures(const DetectorOutput& out);

// ---- checkpoints ------------------------------------------------------------
//
// Little-endian: magic "RPDACCKP", u32 version (1), u32 tensor count, then per
// tensor: u32 name length, name bytes, u32 rank, u64 dims[rank], f64 data.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

void saveCheckpoint(const std::filesystem::path& path, std::span<const NamedParameter> params);
std::vector<NamedTensor> loadCheckpoint(const std::filesystem::path& path);
/// Copies values into parameters by name; throws on missing names or shape mismatches.
void restoreParameters(std::vector<NamedParameter>& params, std::span<const NamedTensor> saved);

}  // namespace rpdac
