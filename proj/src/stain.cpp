#include "rpdac/stain.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace rpdac {

namespace {

Mat3 invert3(const Mat3& m) {
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  if (!std::isfinite(det) || std::abs(det) < 1e-300) throw std::invalid_argument("stain matrix is singular");
  Mat3 inv;
  inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
  inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
  inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
  inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
  inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
  inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
  inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
  inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
  inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
  return inv;
}

double frobenius(const Mat3& m) {
  double acc = 0.0;
  for (const auto& r : m)
    for (double v : r) acc += v * v;
  return std::sqrt(acc);
}

// Row vector times matrix.
Vec3 rowTimes(const Vec3& v, const Mat3& m) {
  Vec3 out{};
  for (std::size_t j = 0; j < 3; ++j) out[j] = v[0] * m[0][j] + v[1] * m[1][j] + v[2] * m[2][j];
  return out;
}

}  // namespace

StainMatrix::StainMatrix(const Mat3& rows, bool normalizeRows) : rows_(rows) {
  for (auto& r : rows_) {
    const double n = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
    if (normalizeRows) {
      if (n == 0.0) throw std::invalid_argument("stain matrix row has zero norm");
      for (double& v : r) v /= n;
    } else if (std::abs(n - 1.0) > 1e-6) {
      throw std::invalid_argument("stain matrix rows must have unit norm");
    }
  }
  inverse_ = invert3(rows_);
  // Frobenius condition number bounds the 2-norm one from above.
  condition_ = frobenius(rows_) * frobenius(inverse_);
  if (!(condition_ < 1e6)) throw std::invalid_argument("stain matrix is ill-conditioned");
}

StainMatrix StainMatrix::standard() {
  return StainMatrix(Mat3{Vec3{0.650, 0.704, 0.286}, Vec3{0.072, 0.990, 0.105}, Vec3{0.268, 0.570, 0.776}});
}

Vec3 rgbToHed(const Vec3& rgb, const StainMatrix& m) {
  Vec3 od;
  for (std::size_t c = 0; c < 3; ++c) od[c] = -std::log10(std::max(rgb[c], kOdFloor));
  return rowTimes(od, m.inverse());
}

Vec3 hedToRgb(const Vec3& hed, const StainMatrix& m) {
  const Vec3 od = rowTimes(hed, m.rows());
  Vec3 rgb;
  for (std::size_t c = 0; c < 3; ++c) rgb[c] = std::clamp(std::pow(10.0, -od[c]), 0.0, 1.0);
  return rgb;
}

HedImage rgbToHed(const RgbImage& img, const StainMatrix& m) {
  HedImage out(img.height, img.width);
  const std::size_t n = img.pixels();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 hed = rgbToHed(Vec3{img.data[i], img.data[n + i], img.data[2 * n + i]}, m);
    for (std::size_t c = 0; c < 3; ++c) out.data[c * n + i] = hed[c];
  }
  return out;
}

RgbImage hedToRgb(const HedImage& img, const StainMatrix& m) {
  RgbImage out(img.height, img.width);
  const std::size_t n = img.pixels();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 rgb = hedToRgb(Vec3{img.data[i], img.data[n + i], img.data[2 * n + i]}, m);
    for (std::size_t c = 0; c < 3; ++c) out.data[c * n + i] = rgb[c];
  }
  return out;
}

RgbImage augmentStain(const RgbImage& img, const StainAlphas& alphas, const StainMatrix& m) {
  HedImage hed = rgbToHed(img, m);
  const std::size_t n = hed.pixels();
  const double a[3] = {alphas.alphaH, alphas.alphaE, alphas.alphaD};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n; ++i) hed.data[c * n + i] *= a[c];
  return hedToRgb(hed, m);
}

// ---- beta sampling & profiles ---------------------------------------------

double sampleBeta(double a, double b, Rng& rng) {
  const double x = rng.gamma(a);
  const double y = rng.gamma(b);
  if (x + y == 0.0) return 0.5;
  return x / (x + y);
}

double sampleBetaSpec(const BetaSpec& spec, Rng& rng) {
  if (spec.scale == 0.0) return spec.shift;
  return spec.shift + spec.scale * sampleBeta(spec.a, spec.b, rng);
}

StainAlphas sampleAlphas(const StainProfile& profile, Rng& rng) {
  StainAlphas alphas;
  alphas.alphaH = sampleBetaSpec(profile.specH, rng);
  alphas.alphaE = sampleBetaSpec(profile.specE, rng);
  alphas.alphaD = sampleBetaSpec(profile.specD, rng);
  return alphas;
}

Vec3 hedMean(const RgbImage& img, const StainMatrix& m) {
  const HedImage hed = rgbToHed(img, m);
  const std::size_t n = hed.pixels();
  Vec3 mean{};
  for (std::size_t c = 0; c < 3; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += hed.data[c * n + i];
    mean[c] = acc / static_cast<double>(n);
  }
  return mean;
}

std::pair<double, double> fitBetaMoments(std::span<const double> unitSamples) {
  if (unitSamples.size() < 2) throw std::invalid_argument("fitBetaMoments needs at least 2 samples");
  double mean = 0.0;
  for (double v : unitSamples) mean += v;
  mean /= static_cast<double>(unitSamples.size());
  double var = 0.0;
  for (double v : unitSamples) var += (v - mean) * (v - mean);
  var /= static_cast<double>(unitSamples.size() - 1);
  const double common = var > 0.0 ? mean * (1.0 - mean) / var - 1.0 : 0.0;
  if (!(common > 0.0) || mean <= 0.0 || mean >= 1.0) return {1.0, 1.0};
  return {mean * common, (1.0 - mean) * common};
}

namespace {

// Smallest alpha a fitted spec may produce; keeps StainAlphas positive when
// a channel's interval reaches zero or crosses it.
constexpr double kMinAlpha = 1e-3;

BetaSpec fitChannel(double domainMean, std::span<const double> globalValues) {
  if (std::abs(domainMean) < 1e-6) return BetaSpec{2.0, 2.0, 0.0, 1.0};
  const auto [loIt, hiIt] = std::minmax_element(globalValues.begin(), globalValues.end());
  const double lo = *loIt, hi = *hiIt;
  if (!(hi - lo > 0.0)) throw std::invalid_argument("fitProfile: degenerate global HED means in a channel");
  std::vector<double> unit(globalValues.size());
  for (std::size_t i = 0; i < unit.size(); ++i) unit[i] = (globalValues[i] - lo) / (hi - lo);
  auto [a, b] = fitBetaMoments(unit);
  double first = lo / domainMean;
  double second = hi / domainMean;
  if (domainMean < 0.0) {
    // alpha * mean maps the interval with reversed orientation.
    std::swap(first, second);
    std::swap(a, b);
  }
  BetaSpec spec{a, b, second - first, first};
  if (spec.shift < kMinAlpha) {
    const double top = std::max(spec.shift + spec.scale, kMinAlpha);
    spec.shift = kMinAlpha;
    spec.scale = top - kMinAlpha;
  }
  return spec;
}

}  // namespace

StainProfile fitProfileFromMeans(std::span<const Vec3> domainHedMeans, std::span<const Vec3> allImagesHedMeans,
                                 int scanner, int tissue) {
  if (domainHedMeans.size() < 2) throw std::invalid_argument("fitProfile needs at least 2 images per domain");
  if (allImagesHedMeans.size() < 2) throw std::invalid_argument("fitProfile needs at least 2 global means");
  StainProfile profile;
  profile.scanner = scanner;
  profile.tissue = tissue;
  BetaSpec* specs[3] = {&profile.specH, &profile.specE, &profile.specD};
  for (std::size_t c = 0; c < 3; ++c) {
    double dm = 0.0;
    for (const auto& v : domainHedMeans) dm += v[c];
    dm /= static_cast<double>(domainHedMeans.size());
    std::vector<double> global(allImagesHedMeans.size());
    for (std::size_t i = 0; i < global.size(); ++i) global[i] = allImagesHedMeans[i][c];
    *specs[c] = fitChannel(dm, global);
  }
  return profile;
}

StainProfile fitProfile(std::span<const RgbImage> domainImages, std::span<const Vec3> allImagesHedMeans,
                        const StainMatrix& m, int scanner, int tissue) {
  std::vector<Vec3> means;
  means.reserve(domainImages.size());
  for (const auto& img : domainImages) means.push_back(hedMean(img, m));
  return fitProfileFromMeans(means, allImagesHedMeans, scanner, tissue);
}

// ---- geometric ------------------------------------------------------------

GeometricDraw sampleGeometric(const GeometricOptions& opts, Rng& rng) {
  GeometricDraw d;
  d.flipH = rng.bernoulli(opts.flipProbability);
  d.flipV = rng.bernoulli(opts.flipProbability);
  d.angle = opts.rotate ? rng.uniform(0.0, 2.0 * std::numbers::pi) : 0.0;
  d.tx = rng.uniform(-opts.maxTranslation, opts.maxTranslation);
  d.ty = rng.uniform(-opts.maxTranslation, opts.maxTranslation);
  return d;
}

Point mapPoint(const GeometricDraw& draw, Point p, std::size_t width, std::size_t height) {
  const double w = static_cast<double>(width), h = static_cast<double>(height);
  if (draw.flipH) p.x = w - p.x;
  if (draw.flipV) p.y = h - p.y;
  const double cx = w / 2.0, cy = h / 2.0;
  const double c = std::cos(draw.angle), s = std::sin(draw.angle);
  const double dx = p.x - cx, dy = p.y - cy;
  return Point{c * dx - s * dy + cx + draw.tx, s * dx + c * dy + cy + draw.ty};
}

namespace {

Point inverseMapPoint(const GeometricDraw& draw, Point q, double w, double h) {
  const double cx = w / 2.0, cy = h / 2.0;
  const double c = std::cos(draw.angle), s = std::sin(draw.angle);
  const double dx = q.x - draw.tx - cx, dy = q.y - draw.ty - cy;
  Point p{c * dx + s * dy + cx, -s * dx + c * dy + cy};
  if (draw.flipH) p.x = w - p.x;
  if (draw.flipV) p.y = h - p.y;
  return p;
}

}  // namespace

std::pair<RgbImage, std::vector<Point>> applyGeometric(const RgbImage& img, std::span<const Point> points,
                                                       const GeometricDraw& draw) {
  const double w = static_cast<double>(img.width), h = static_cast<double>(img.height);
  RgbImage out(img.height, img.width, 1.0);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const Point src = inverseMapPoint(draw, Point{x + 0.5, y + 0.5}, w, h);
      const double sx = src.x - 0.5, sy = src.y - 0.5;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
      for (std::size_t c = 0; c < 3; ++c) {
        auto sample = [&](long yy, long xx) {
          if (xx < 0 || yy < 0 || xx >= static_cast<long>(img.width) || yy >= static_cast<long>(img.height))
            return 1.0;
          return img.at(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
        };
        double v = (1 - ay) * ((1 - ax) * sample(y0, x0) + (ax > 0 ? ax * sample(y0, x0 + 1) : 0.0));
        if (ay > 0) v += ay * ((1 - ax) * sample(y0 + 1, x0) + (ax > 0 ? ax * sample(y0 + 1, x0 + 1) : 0.0));
        out.at(c, y, x) = v;
      }
    }
  }
  std::vector<Point> mapped;
  mapped.reserve(points.size());
  for (const Point& p : points) {
    const Point q = mapPoint(draw, p, img.width, img.height);
    if (q.x >= 0.0 && q.y >= 0.0 && q.x < w && q.y < h) mapped.push_back(q);
  }
  return {std::move(out), std::move(mapped)};
}

std::pair<RgbImage, std::vector<Point>> geometricAugment(const RgbImage& img, std::span<const Point> points,
                                                         Rng& rng, const GeometricOptions& opts) {
  return applyGeometric(img, points, sampleGeometric(opts, rng));
}

// ---- filtering ------------------------------------------------------------

RgbImage gaussianBlur(const RgbImage& img, double sigma) {
  if (!(sigma > 0.0)) return img;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= total;

  const long h = static_cast<long>(img.height), w = static_cast<long>(img.width);
  RgbImage tmp(img.height, img.width), out(img.height, img.width);
  for (std::size_t c = 0; c < 3; ++c) {
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[i + radius] * img.at(c, y, static_cast<std::size_t>(std::clamp(x + i, 0L, w - 1)));
        tmp.at(c, y, x) = acc;
      }
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[i + radius] * tmp.at(c, static_cast<std::size_t>(std::clamp(y + i, 0L, h - 1)), x);
        out.at(c, y, x) = std::clamp(acc, 0.0, 1.0);
      }
  }
  return out;
}

RgbImage unsharpMask(const RgbImage& img, double amount, double sigma) {
  const RgbImage blurred = gaussianBlur(img, sigma);
  RgbImage out(img.height, img.width);
  for (std::size_t i = 0; i < img.data.size(); ++i)
    out.data[i] = std::clamp(img.data[i] + amount * (img.data[i] - blurred.data[i]), 0.0, 1.0);
  return out;
}

RgbImage blurOrSharpen(const RgbImage& img, Rng& rng, const FilterOptions& opts) {
  const double u = rng.uniform();
  if (u < opts.blurProbability) return gaussianBlur(img, rng.uniform(opts.blurSigmaMin, opts.blurSigmaMax));
  if (u < opts.blurProbability + opts.sharpenProbability)
    return unsharpMask(img, rng.uniform(opts.sharpenAmountMin, opts.sharpenAmountMax), opts.sharpenSigma);
  return img;
}

}  // namespace rpdac
