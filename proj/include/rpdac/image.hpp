#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "rpdac/tensor.hpp"

namespace rpdac {

/// Planar three-channel float64 image, channel-major ([3,H,W]).
template <class Tag>
struct Image3 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;

  Image3() = default;
  Image3(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), data(3 * h * w, fill) {
    if (h == 0 || w == 0) throw std::invalid_argument("image dimensions must be >= 1");
  }

  std::size_t pixels() const { return height * width; }
  double& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }

  bool operator==(const Image3&) const = default;
};

struct RgbTag {};
struct HedTag {};

/// Values in [0,1].
using RgbImage = Image3<RgbTag>;
/// Optical-density coordinates (hematoxylin, eosin, dab); unbounded.
using HedImage = Image3<HedTag>;

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

Tensor toTensor(const RgbImage& img);

RgbImage readPng(const std::filesystem::path& path);
void writePng(const std::filesystem::path& path, const RgbImage& img);

/// Bilinear resize by a uniform scale factor.
RgbImage resizeBilinear(const RgbImage& img, std::size_t newHeight, std::size_t newWidth);

RgbImage flipHorizontal(const RgbImage& img);
RgbImage flipVertical(const RgbImage& img);

}  // namespace rpdac
