#include "rpdac/detector.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

namespace rpdac {

namespace {

// Parameter layout: stem w/b, then per stage: down w/b, block w/b, gate,
// fuse w/b, head w/b.
constexpr std::size_t kStem = 0;
constexpr std::size_t kStageBase = 2;
constexpr std::size_t kPerStage = 9;

double sigmoidValue(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

Detector::Detector(DetectorConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.inputSize == 0 || cfg_.inputSize % 32 != 0)
    throw std::invalid_argument("detector inputSize must be a positive multiple of 32");
  if (!(cfg_.boxSize > 0.0)) throw std::invalid_argument("detector boxSize must be positive");
  if (cfg_.baseChannels == 0) throw std::invalid_argument("detector baseChannels must be positive");
  Rng rng(seed);
  const std::size_t c = cfg_.baseChannels;
  stageChannels_ = {2 * c, 4 * c, 4 * c};
  params_.push_back({"det.stem.weight", uniformInit({c, 3, 4, 4}, 3 * 16, rng)});
  params_.push_back({"det.stem.bias", uniformInit({c}, 3 * 16, rng)});
  std::size_t in = c;
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t out = stageChannels_[s];
    const std::string pre = "det.stage" + std::to_string(s);
    params_.push_back({pre + ".down.weight", uniformInit({out, in, 3, 3}, in * 9, rng)});
    params_.push_back({pre + ".down.bias", uniformInit({out}, in * 9, rng)});
    params_.push_back({pre + ".block.weight", uniformInit({out, out, 3, 3}, out * 9, rng)});
    params_.push_back({pre + ".block.bias", uniformInit({out}, out * 9, rng)});
    params_.push_back({pre + ".gate", Tensor::scalar(cfg_.gateInit, true), false});
    params_.push_back({pre + ".fuse.weight", uniformInit({out, 2 * out, 1, 1}, 2 * out, rng)});
    params_.push_back({pre + ".fuse.bias", uniformInit({out}, 2 * out, rng)});
    params_.push_back({pre + ".head.weight", uniformInit({3, out, 1, 1}, out, rng)});
    Tensor headBias = uniformInit({3}, out, rng);
    headBias.data()[0] = -4.0;  // objectness prior ~ 0.018
    params_.push_back({pre + ".head.bias", headBias});
    in = out;
  }
}

std::array<std::size_t, 3> Detector::tapChannels() const { return stageChannels_; }

std::size_t Detector::totalTapChannels() const {
  return stageChannels_[0] + stageChannels_[1] + stageChannels_[2];
}

std::vector<Tensor> Detector::gates() const {
  std::vector<Tensor> out;
  for (std::size_t s = 0; s < 3; ++s) out.push_back(param(kStageBase + s * kPerStage + 4));
  return out;
}

std::vector<double> Detector::gateSigmoids() const {
  std::vector<double> out;
  for (const auto& g : gates()) out.push_back(sigmoidValue(g[0]));
  return out;
}

DetectorOutput Detector::forward(Graph& g, const RgbImage& image) const { return forward(g, toTensor(image)); }

DetectorOutput Detector::forward(Graph& g, const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.inputSize || image.dim(2) != cfg_.inputSize)
    throw ShapeError("detector expects a [3," + std::to_string(cfg_.inputSize) + "," +
                     std::to_string(cfg_.inputSize) + "] image, got " + shapeToString(image.shape()));
  const Activation act = cfg_.activation;
  DetectorOutput out;
  out.pred.imageHeight = image.dim(1);
  out.pred.imageWidth = image.dim(2);
  Tensor x = activate(g, conv2d(g, image, param(kStem), param(kStem + 1), 4, 0), act);
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t b = kStageBase + s * kPerStage;
    Tensor down = activate(g, conv2d(g, x, param(b), param(b + 1), 2, 1), act);
    Tensor block = activate(g, conv2d(g, down, param(b + 2), param(b + 3), 1, 1), act);
    Tensor joined;
    if (cfg_.gatedJoins) {
      joined = gatedConcat(g, down, block, param(b + 4));
    } else {
      const Tensor parts[] = {down, block};
      joined = concatChannels(g, parts);
    }
    Tensor tap = activate(g, conv2d(g, joined, param(b + 5), param(b + 6), 1, 0), act);
    Tensor head = conv2d(g, tap, param(b + 7), param(b + 8), 1, 0);
    out.taps[s] = tap;
    out.pred.scales[s].stride = kScaleStrides[s];
    out.pred.scales[s].objectness = sliceChannels(g, head, 0, 1);
    out.pred.scales[s].offsets = sigmoid(g, sliceChannels(g, head, 1, 3));
    x = tap;
  }
  return out;
}

Tensor detectionLoss(Graph& g, const GridPrediction& pred, std::span<const Point> annotations) {
  std::vector<Tensor> terms;
  for (const auto& sc : pred.scales) {
    const std::size_t h = sc.objectness.dim(1), w = sc.objectness.dim(2), cells = h * w;
    const double stride = static_cast<double>(sc.stride);
    // cell index -> first annotation landing in it
    std::map<std::size_t, Point> positives;
    for (const Point& p : annotations) {
      const auto cx = static_cast<std::size_t>(std::clamp(std::floor(p.x / stride), 0.0, double(w - 1)));
      const auto cy = static_cast<std::size_t>(std::clamp(std::floor(p.y / stride), 0.0, double(h - 1)));
      positives.emplace(cy * w + cx, p);
    }
    std::vector<double> targets(cells, 0.0), weights(cells, 1.0 / static_cast<double>(cells));
    const double posWeight = positives.empty() ? 0.0 : 1.0 / static_cast<double>(positives.size());
    for (const auto& [idx, p] : positives) {
      targets[idx] = 1.0;
      weights[idx] = posWeight;  // (#cells / #positives) / #cells
    }
    terms.push_back(bceWithLogits(g, sc.objectness, targets, weights));
    if (!positives.empty()) {
      std::vector<double> offTargets(2 * cells, 0.0), offWeights(2 * cells, 0.0);
      const double wOff = 5.0 / static_cast<double>(positives.size());
      for (const auto& [idx, p] : positives) {
        const double cx = static_cast<double>(idx % w), cy = static_cast<double>(idx / w);
        offTargets[idx] = std::clamp(p.x / stride - cx, 0.0, 1.0);
        offTargets[cells + idx] = std::clamp(p.y / stride - cy, 0.0, 1.0);
        offWeights[idx] = offWeights[cells + idx] = wOff;
      }
      terms.push_back(weightedSquaredError(g, sc.offsets, offTargets, offWeights));
    }
  }
  return sumScalars(g, terms);
}

std::vector<Detection> decode(const GridPrediction& pred, double threshold, double boxSize) {
  const double maxX = std::nextafter(static_cast<double>(pred.imageWidth), 0.0);
  const double maxY = std::nextafter(static_cast<double>(pred.imageHeight), 0.0);
  std::vector<Detection> candidates;
  for (const auto& sc : pred.scales) {
    const std::size_t h = sc.objectness.dim(1), w = sc.objectness.dim(2);
    const double stride = static_cast<double>(sc.stride);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double score = sigmoidValue(sc.objectness[y * w + x]);
        if (score < threshold) continue;
        Detection d;
        d.x = std::clamp((x + sc.offsets[y * w + x]) * stride, 0.0, maxX);
        d.y = std::clamp((y + sc.offsets[h * w + y * w + x]) * stride, 0.0, maxY);
        d.size = boxSize;
        d.score = score;
        candidates.push_back(d);
      }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  const double minDist2 = (boxSize / 2.0) * (boxSize / 2.0);
  std::vector<Detection> kept;
  for (const auto& c : candidates) {
    const bool clash = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      const double dx = k.x - c.x, dy = k.y - c.y;
      return dx * dx + dy * dy < minDist2;
    });
    if (!clash) kept.push_back(c);
  }
  return kept;
}

std::vector<double> tapFeatures(const DetectorOutput& out) {
  std::vector<double> features;
  for (const auto& tap : out.taps) {
    const std::size_t c = tap.dim(0), hw = tap.dim(1) * tap.dim(2);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::size_t i = 0; i < hw; ++i) acc += tap[ch * hw + i];
      features.push_back(acc / static_cast<double>(hw));
    }
  }
  return features;
}

// ---- checkpoints ------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'R', 'P', 'D', 'A', 'C', 'C', 'K', 'P'};

template <class T>
void writeLe(std::ostream& os, T value) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T readLe(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint truncated");
  return value;
}

}  // namespace

void saveCheckpoint(const std::filesystem::path& path, std::span<const NamedParameter> params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof(kMagic));
  writeLe<std::uint32_t>(os, kCheckpointVersion);
  writeLe<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    writeLe<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    writeLe<std::uint32_t>(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) writeLe<std::uint64_t>(os, d);
    for (double v : p.tensor.data()) writeLe<double>(os, v);
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

std::vector<NamedTensor> loadCheckpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(magic, magic + 8, kMagic)) throw std::runtime_error("not a checkpoint: " + path.string());
  const auto version = readLe<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const auto count = readLe<std::uint32_t>(is);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto nameLen = readLe<std::uint32_t>(is);
    std::string name(nameLen, '\0');
    is.read(name.data(), nameLen);
    const auto rank = readLe<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(readLe<std::uint64_t>(is));
    std::vector<double> data(shapeNumel(shape));
    for (double& v : data) v = readLe<double>(is);
    out.push_back({std::move(name), Tensor::fromData(std::move(shape), std::move(data))});
  }
  return out;
}

void restoreParameters(std::vector<NamedParameter>& params, std::span<const NamedTensor> saved) {
  for (auto& p : params) {
    auto it = std::find_if(saved.begin(), saved.end(), [&](const NamedTensor& s) { return s.name == p.name; });
    if (it == saved.end()) throw std::runtime_error("checkpoint is missing tensor " + p.name);
    if (it->tensor.shape() != p.tensor.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + p.name + ": " + shapeToString(it->tensor.shape()) +
                               " vs " + shapeToString(p.tensor.shape()));
    std::copy(it->tensor.data().begin(), it->tensor.data().end(), p.tensor.data().begin());
  }
}

}  // namespace rpdac
