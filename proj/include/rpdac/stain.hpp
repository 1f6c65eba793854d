#pragma once

#include <array>
#include <span>
#include <utility>
#include <vector>

#include "rpdac/image.hpp"
#include "rpdac/random.hpp"

namespace rpdac {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<Vec3, 3>;

/// Stain optical-density vectors as rows (H, E, DAB). Rows are unit length
/// and the matrix is well conditioned; both are checked on construction.
class StainMatrix {
 public:
  /// Throws std::invalid_argument when a row is not unit length (after
  /// optional normalization) or the Frobenius condition number is >= 1e6.
  explicit StainMatrix(const Mat3& rows, bool normalizeRows = true);

  /// Reference H&E-DAB deconvolution vectors, row-normalized.
  static StainMatrix standard();

  const Mat3& rows() const { return rows_; }
  const Mat3& inverse() const { return inverse_; }
  double conditionNumber() const { return condition_; }

 private:
  Mat3 rows_;
  Mat3 inverse_;
  double condition_ = 0.0;
};

inline constexpr double kOdFloor = 1e-6;

HedImage rgbToHed(const RgbImage& img, const StainMatrix& m);
RgbImage hedToRgb(const HedImage& img, const StainMatrix& m);
Vec3 rgbToHed(const Vec3& rgb, const StainMatrix& m);
Vec3 hedToRgb(const Vec3& hed, const StainMatrix& m);

struct StainAlphas {
  double alphaH = 1.0;
  double alphaE = 1.0;
  double alphaD = 1.0;
};

RgbImage augmentStain(const RgbImage& img, const StainAlphas& alphas, const StainMatrix& m);

/// Beta(a, b) scaled to [shift, shift + scale].
struct BetaSpec {
  double a = 2.0;
  double b = 2.0;
  double scale = 0.0;
  double shift = 1.0;

  double mean() const { return shift + scale * a / (a + b); }
  bool operator==(const BetaSpec&) const = default;
};

double sampleBeta(double a, double b, Rng& rng);
double sampleBetaSpec(const BetaSpec& spec, Rng& rng);

struct StainProfile {
  int scanner = 0;
  int tissue = 0;
  BetaSpec specH;
  BetaSpec specE;
  BetaSpec specD;

  bool operator==(const StainProfile&) const = default;
};

StainAlphas sampleAlphas(const StainProfile& profile, Rng& rng);

/// Mean HED coordinates of an image.
Vec3 hedMean(const RgbImage& img, const StainMatrix& m);

/// Method-of-moments Beta(a, b) fit to samples already normalized to [0, 1].
std::pair<double, double> fitBetaMoments(std::span<const double> unitSamples);

/// Builds a domain's stain profile: the base beta shape follows the
/// distribution of all images' HED means over their spanned interval
/// [lo, hi]; shift/scale are set so alpha * domainMean covers [lo, hi].
StainProfile fitProfile(std::span<const RgbImage> domainImages, std::span<const Vec3> allImagesHedMeans,
                        const StainMatrix& m, int scanner = 0, int tissue = 0);
/// Same, from precomputed domain HED means.
StainProfile fitProfileFromMeans(std::span<const Vec3> domainHedMeans, std::span<const Vec3> allImagesHedMeans,
                                 int scanner = 0, int tissue = 0);

// ---- geometric & filtering augmentation ----------------------------------

struct GeometricOptions {
  double flipProbability = 0.5;
  bool rotate = true;
  double maxTranslation = 200.0;
  bool operator==(const GeometricOptions&) const = default;
};

struct GeometricDraw {
  bool flipH = false;
  bool flipV = false;
  double angle = 0.0;  // radians, about the image center
  double tx = 0.0;
  double ty = 0.0;
};

GeometricDraw sampleGeometric(const GeometricOptions& opts, Rng& rng);
/// Forward map of a point under a draw: flips, then rotation, then translation.
Point mapPoint(const GeometricDraw& draw, Point p, std::size_t width, std::size_t height);
/// Resamples the image (bilinear, white outside the canvas) and maps the
/// points, dropping those that leave [0, W) x [0, H).
std::pair<RgbImage, std::vector<Point>> applyGeometric(const RgbImage& img, std::span<const Point> points,
                                                       const GeometricDraw& draw);
std::pair<RgbImage, std::vector<Point>> geometricAugment(const RgbImage& img, std::span<const Point> points,
                                                         Rng& rng, const GeometricOptions& opts = {});

struct FilterOptions {
  double blurProbability = 1.0 / 3.0;
  double sharpenProbability = 1.0 / 3.0;
  double blurSigmaMin = 0.3;
  double blurSigmaMax = 1.0;
  double sharpenAmountMin = 0.2;
  double sharpenAmountMax = 0.8;
  double sharpenSigma = 1.0;
  bool operator==(const FilterOptions&) const = default;
};

RgbImage gaussianBlur(const RgbImage& img, double sigma);
RgbImage unsharpMask(const RgbImage& img, double amount, double sigma);
RgbImage blurOrSharpen(const RgbImage& img, Rng& rng, const FilterOptions& opts = {});

}  // namespace rpdac
