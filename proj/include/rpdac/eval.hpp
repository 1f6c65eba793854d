#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rpdac/dataset.hpp"
#include "rpdac/detector.hpp"
#include "rpdac/trainer.hpp"

namespace rpdac {

// ---- dataset preparation ------------------------------------------------------

enum class Split { Train, Val, Test };
std::string toString(Split s);

struct SplitAssignment {
  std::map<int, Split> byRegion;  // region id -> split

  std::vector<int> regionsIn(Split s) const;
};

/// Within each (scanner, tissue) group: shuffle by seed, cut at
/// round(r0 * k) and round((r0 + r1) * k). Groups smaller than 3 go to
/// train entirely (with a warning).
SplitAssignment stratifiedSplit(std::span<const AnnotatedRegion> regions, std::array<double, 3> ratios,
                                std::uint64_t seed, std::vector<std::string>* warnings = nullptr);

struct Patch {
  int regionId = 0;
  std::size_t index = 0;  // position in the cols x rows grid, row-major
  std::size_t originX = 0;
  std::size_t originY = 0;
  RgbImage image;
  std::vector<Point> points;
};

/// A cols x rows grid of overlapping square patches with uniform integer
/// strides; the `keep` patches with the most annotations (ties: lower grid
/// index) are returned, with duplicate origins removed.
std::vector<Patch> extractPatches(const AnnotatedRegion& region, std::size_t patchSize = 1280, std::size_t cols = 6,
                                  std::size_t rows = 5, std::size_t keep = 10,
                                  std::vector<std::string>* warnings = nullptr);

// ---- prediction -------------------------------------------------------------

struct EvalConfig {
  double threshold = 0.403;
  double decodeThreshold = 0.05;
  double mergeRadius = 25.0;
  double matchRadius = 30.0;
  bool tta = true;
  bool operator==(const EvalConfig&) const = default;
};

/// Identity, horizontal, vertical and double mirror; detections mapped back
/// to the original frame.
std::array<std::vector<Detection>, 4> ttaPredict(const Detector& detector, const RgbImage& image,
                                                 double decodeThreshold);

/// Single-linkage clusters of centers (link <= mergeRadius) collapsed to the
/// mean center and mean score; repeated on the cluster centers until no two
/// outputs lie within mergeRadius.
std::vector<Detection> mergeDetections(std::span<const std::vector<Detection>> variants, double mergeRadius);

/// Full-region prediction: tiles images larger than the detector input
/// (white padding), applies TTA + merge when enabled.
std::vector<Detection> predictRegion(const Detector& detector, const RgbImage& image, const EvalConfig& cfg);

// ---- scoring ----------------------------------------------------------------

struct MatchResult {
  std::size_t truePositives = 0;
  std::size_t falsePositives = 0;
  std::size_t falseNegatives = 0;
  double matchRadius = 0.0;
};

struct F1Result {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  MatchResult match;
};

F1Result scoreCounts(std::size_t tp, std::size_t fp, std::size_t fn, double matchRadius);

/// Predictions with score >= threshold matched one-to-one against truths
/// within matchRadius: greedy in ascending distance, then completed with
/// augmenting paths so the match count is maximal.
F1Result f1Score(std::span<const Detection> preds, std::span<const Point> truths, double threshold = 0.403,
                 double matchRadius = 30.0);

struct EvalItem {
  std::vector<Detection> preds;
  std::vector<Point> truths;
};

F1Result f1Score(std::span<const EvalItem> items, double threshold, double matchRadius);

struct SweepResult {
  double bestThreshold = 0.0;
  double bestF1 = 0.0;
};

/// Grid 0.05, 0.051, ..., 0.95; ties go to the lower threshold.
SweepResult thresholdSweep(std::span<const EvalItem> items, double matchRadius);
SweepResult thresholdSweep(std::span<const Detection> preds, std::span<const Point> truths, double matchRadius);

struct EvalReport {
  F1Result overall;
  double threshold = 0.0;
  std::map<int, F1Result> perDomain;  // keyed by scanner
  nlohmann::json toJson() const;
};

EvalReport evaluateRegions(const Detector& detector, std::span<const AnnotatedRegion> regions, const EvalConfig& cfg,
                           std::size_t workers = 1);
std::vector<EvalItem> predictItems(const Detector& detector, std::span<const AnnotatedRegion> regions,
                                   const EvalConfig& cfg, std::size_t workers = 1);

// ---- domain probe ---------------------------------------------------------------

/// Multinomial logistic regression (L2-regularized, standardized features)
/// fit on the training set; returns accuracy on the test set.
double linearProbeAccuracy(const std::vector<std::vector<double>>& trainX, const std::vector<int>& trainY,
                           const std::vector<std::vector<double>>& testX, const std::vector<int>& testY,
                           double l2 = 1e-3, std::size_t epochs = 500);

/// Tap features (global average pools) of unaugmented images.
std::vector<std::vector<double>> collectTapFeatures(const Detector& detector, std::span<const AnnotatedRegion> regions);

// ---- leave one domain out -------------------------------------------------------------

struct LooConfig {
  TrainerOptions trainer;
  DetectorConfig detector;
  DacHeadConfig dac;
  EvalConfig eval;
  std::array<double, 3> splitRatios{0.8, 0.1, 0.1};
  std::uint64_t seed = 0;
  /// Fit per-domain stain profiles on the retained training regions.
  bool fitStainProfiles = true;
  /// Pick the decision threshold by a sweep on the validation split.
  bool tuneThresholdOnVal = true;
  /// Replace fitted profiles with matching (scanner, tissue).
  std::vector<StainProfile> profileOverrides;
};

struct LooReport {
  int heldOutScanner = 0;
  double threshold = 0.0;
  F1Result heldOut;
  F1Result train;
  F1Result val;
  F1Result test;
  std::vector<int> trainedRegionIds;  // distinct, sorted
  nlohmann::json toJson() const;
};

struct LooOutcome {
  LooReport report;
  Model model;
  SplitAssignment split;
  TrainResult training;
};

/// Regions already at the detector input size become one sample each;
/// larger regions contribute their selected patches.
std::vector<TrainSample> trainingSamples(std::span<const AnnotatedRegion> regions, std::size_t inputSize);

/// Regions whose id appears in `ids`, in dataset order.
std::vector<AnnotatedRegion> selectRegions(std::span<const AnnotatedRegion> regions, const std::vector<int>& ids);

/// Per-(scanner, tissue) stain profiles fit against the HED means of all
/// given regions.
ProfileMap fitProfiles(std::span<const AnnotatedRegion> regions, const StainMatrix& m);
ProfileMap applyProfileOverrides(ProfileMap fitted, const std::vector<StainProfile>& overrides);

/// Retrains from scratch without regions whose scanner equals
/// `heldOutScanner`, then scores the held-out domain and the retained splits.
LooOutcome leaveOneDomainOut(std::span<const AnnotatedRegion> regions, int heldOutScanner, const LooConfig& cfg);

}  // namespace rpdac
