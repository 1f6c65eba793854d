#include "rpdac/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

namespace rpdac {

std::string toString(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

std::vector<int> SplitAssignment::regionsIn(Split s) const {
  std::vector<int> ids;
  for (const auto& [id, split] : byRegion)
    if (split == s) ids.push_back(id);
  return ids;
}

SplitAssignment stratifiedSplit(std::span<const AnnotatedRegion> regions, std::array<double, 3> ratios,
                                std::uint64_t seed, std::vector<std::string>* warnings) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0)
    throw std::invalid_argument("split ratios must be non-negative and sum to 1");
  std::map<DomainKey, std::vector<int>> groups;
  for (const auto& r : regions) groups[{r.label.scanner, r.label.tissue}].push_back(r.id);

  SplitAssignment out;
  for (auto& [key, ids] : groups) {
    std::sort(ids.begin(), ids.end());
    if (ids.size() < 3) {
      if (warnings)
        warnings->push_back("group (scanner " + std::to_string(key.first) + ", tissue " + std::to_string(key.second) +
                            ") has " + std::to_string(ids.size()) + " regions; all assigned to train");
      for (int id : ids) out.byRegion[id] = Split::Train;
      continue;
    }
    Rng rng(deriveSeed(seed, static_cast<std::uint64_t>(key.first), static_cast<std::uint64_t>(key.second)));
    std::shuffle(ids.begin(), ids.end(), rng.engine());
    const double k = static_cast<double>(ids.size());
    const auto cut1 = static_cast<std::size_t>(std::llround(ratios[0] * k));
    const auto cut2 = static_cast<std::size_t>(std::llround((ratios[0] + ratios[1]) * k));
    for (std::size_t i = 0; i < ids.size(); ++i)
      out.byRegion[ids[i]] = i < cut1 ? Split::Train : i < cut2 ? Split::Val : Split::Test;
  }
  return out;
}

namespace {

RgbImage cropPadded(const RgbImage& img, long x0, long y0, std::size_t size) {
  RgbImage out(size, size, 1.0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < size; ++y) {
      const long sy = y0 + static_cast<long>(y);
      if (sy < 0 || sy >= static_cast<long>(img.height)) continue;
      for (std::size_t x = 0; x < size; ++x) {
        const long sx = x0 + static_cast<long>(x);
        if (sx < 0 || sx >= static_cast<long>(img.width)) continue;
        out.at(c, y, x) = img.at(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      }
    }
  return out;
}

std::vector<Point> pointsInWindow(std::span<const Point> pts, double x0, double y0, double size) {
  std::vector<Point> out;
  for (const auto& p : pts) {
    const double x = p.x - x0, y = p.y - y0;
    if (x >= 0.0 && x < size && y >= 0.0 && y < size) out.push_back({x, y});
  }
  return out;
}

}  // namespace

std::vector<Patch> extractPatches(const AnnotatedRegion& region, std::size_t patchSize, std::size_t cols,
                                  std::size_t rows, std::size_t keep, std::vector<std::string>* warnings) {
  if (patchSize == 0 || cols == 0 || rows == 0) throw std::invalid_argument("patch grid must be non-empty");
  const std::size_t w = region.image.width, h = region.image.height;
  if (w < patchSize || h < patchSize) {
    if (warnings)
      warnings->push_back("region " + std::to_string(region.id) + " smaller than patch size; using one padded patch");
    const long x0 = (static_cast<long>(w) - static_cast<long>(patchSize)) / 2;
    const long y0 = (static_cast<long>(h) - static_cast<long>(patchSize)) / 2;
    Patch p;
    p.regionId = region.id;
    p.image = cropPadded(region.image, x0, y0, patchSize);
    p.points = pointsInWindow(region.points, static_cast<double>(x0), static_cast<double>(y0),
                              static_cast<double>(patchSize));
    return {std::move(p)};
  }

  auto stride = [](std::size_t extent, std::size_t patch, std::size_t n) -> std::size_t {
    if (n < 2) return 0;
    return static_cast<std::size_t>(std::llround(static_cast<double>(extent - patch) / static_cast<double>(n - 1)));
  };
  const std::size_t sx = stride(w, patchSize, cols), sy = stride(h, patchSize, rows);

  struct Candidate {
    std::size_t index, x, y, count;
  };
  std::vector<Candidate> cands;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t x = std::min(c * sx, w - patchSize), y = std::min(r * sy, h - patchSize);
      const auto pts = pointsInWindow(region.points, static_cast<double>(x), static_cast<double>(y),
                                      static_cast<double>(patchSize));
      cands.push_back({r * cols + c, x, y, pts.size()});
    }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Candidate& a, const Candidate& b) { return a.count > b.count; });
  cands.resize(std::min(keep, cands.size()));

  std::vector<Patch> out;
  std::set<std::pair<std::size_t, std::size_t>> seen;
  std::size_t duplicates = 0;
  for (const auto& c : cands) {
    if (!seen.insert({c.x, c.y}).second) {
      ++duplicates;
      continue;
    }
    Patch p;
    p.regionId = region.id;
    p.index = c.index;
    p.originX = c.x;
    p.originY = c.y;
    p.image = cropPadded(region.image, static_cast<long>(c.x), static_cast<long>(c.y), patchSize);
    p.points = pointsInWindow(region.points, static_cast<double>(c.x), static_cast<double>(c.y),
                              static_cast<double>(patchSize));
    out.push_back(std::move(p));
  }
  if (duplicates && warnings)
    warnings->push_back("region " + std::to_string(region.id) + ": " + std::to_string(duplicates) +
                        " duplicate patch origins removed");
  return out;
}

// ---- prediction -------------------------------------------------------------

namespace {

std::vector<Detection> detectOnce(const Detector& detector, const RgbImage& image, double decodeThreshold) {
  Graph g(false);
  const DetectorOutput out = detector.forward(g, image);
  return decode(out.pred, decodeThreshold, detector.config().boxSize);
}

}  // namespace

std::array<std::vector<Detection>, 4> ttaPredict(const Detector& detector, const RgbImage& image,
                                                 double decodeThreshold) {
  const double w = static_cast<double>(image.width), h = static_cast<double>(image.height);
  std::array<std::vector<Detection>, 4> out;
  for (int v = 0; v < 4; ++v) {
    const bool fx = v & 1, fy = v & 2;
    RgbImage img = image;
    if (fx) img = flipHorizontal(img);
    if (fy) img = flipVertical(img);
    out[v] = detectOnce(detector, img, decodeThreshold);
    for (auto& d : out[v]) {
      if (fx) d.x = w - d.x;
      if (fy) d.y = h - d.y;
    }
  }
  return out;
}

std::vector<Detection> mergeDetections(std::span<const std::vector<Detection>> variants, double mergeRadius) {
  if (!(mergeRadius > 0.0)) throw std::invalid_argument("mergeRadius must be positive");
  std::vector<Detection> all;
  for (const auto& v : variants) all.insert(all.end(), v.begin(), v.end());

  // Each cluster is a list of indices into `all`; members are never split.
  std::vector<std::vector<std::size_t>> clusters(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) clusters[i] = {i};
  auto summarize = [&](const std::vector<std::size_t>& members) {
    Detection d;
    for (std::size_t m : members) {
      d.x += all[m].x;
      d.y += all[m].y;
      d.size += all[m].size;
      d.score += all[m].score;
    }
    const double n = static_cast<double>(members.size());
    d.x /= n;
    d.y /= n;
    d.size /= n;
    d.score /= n;
    return d;
  };

  std::vector<Detection> centers = all;
  while (true) {
    const std::size_t n = clusters.size();
    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t i) {
      while (parent[i] != i) i = parent[i] = parent[parent[i]];
      return i;
    };
    bool merged = false;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (std::hypot(centers[i].x - centers[j].x, centers[i].y - centers[j].y) <= mergeRadius) {
          const std::size_t a = find(i), b = find(j);
          if (a != b) {
            parent[std::max(a, b)] = std::min(a, b);
            merged = true;
          }
        }
    if (!merged) break;
    std::vector<std::vector<std::size_t>> next;
    std::vector<std::size_t> slot(n, std::numeric_limits<std::size_t>::max());
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t root = find(i);
      if (slot[root] == std::numeric_limits<std::size_t>::max()) {
        slot[root] = next.size();
        next.emplace_back();
      }
      auto& dst = next[slot[root]];
      dst.insert(dst.end(), clusters[i].begin(), clusters[i].end());
    }
    clusters = std::move(next);
    centers.clear();
    for (auto& c : clusters) {
      std::sort(c.begin(), c.end());
      centers.push_back(summarize(c));
    }
  }
  return centers;
}

std::vector<Detection> predictRegion(const Detector& detector, const RgbImage& image, const EvalConfig& cfg) {
  const std::size_t tile = detector.config().inputSize;
  auto predictTile = [&](const RgbImage& img) {
    if (!cfg.tta) return detectOnce(detector, img, cfg.decodeThreshold);
    const auto variants = ttaPredict(detector, img, cfg.decodeThreshold);
    return mergeDetections(variants, cfg.mergeRadius);
  };
  if (image.width == tile && image.height == tile) return predictTile(image);

  std::vector<Detection> all;
  for (std::size_t y0 = 0; y0 < image.height; y0 += tile)
    for (std::size_t x0 = 0; x0 < image.width; x0 += tile) {
      const RgbImage crop = cropPadded(image, static_cast<long>(x0), static_cast<long>(y0), tile);
      for (auto d : predictTile(crop)) {
        d.x += static_cast<double>(x0);
        d.y += static_cast<double>(y0);
        if (d.x < static_cast<double>(image.width) && d.y < static_cast<double>(image.height)) all.push_back(d);
      }
    }
  return all;
}

// ---- scoring ----------------------------------------------------------------

F1Result scoreCounts(std::size_t tp, std::size_t fp, std::size_t fn, double matchRadius) {
  F1Result r;
  r.match = MatchResult{tp, fp, fn, matchRadius};
  r.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  r.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  r.f1 = r.precision + r.recall > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

namespace {

std::size_t maximumMatching(std::span<const Detection> preds, std::span<const Point> truths, double radius) {
  const std::size_t np = preds.size(), nt = truths.size();
  struct Pair {
    double dist;
    std::size_t p, t;
  };
  std::vector<Pair> pairs;
  std::vector<std::vector<std::size_t>> adj(np);
  for (std::size_t p = 0; p < np; ++p)
    for (std::size_t t = 0; t < nt; ++t) {
      const double d = std::hypot(preds[p].x - truths[t].x, preds[p].y - truths[t].y);
      if (d <= radius) {
        pairs.push_back({d, p, t});
        adj[p].push_back(t);
      }
    }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.dist < b.dist; });

  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> predOf(nt, kNone), truthOf(np, kNone);
  std::size_t matched = 0;
  for (const auto& pr : pairs)
    if (truthOf[pr.p] == kNone && predOf[pr.t] == kNone) {
      truthOf[pr.p] = pr.t;
      predOf[pr.t] = pr.p;
      ++matched;
    }

  // Augmenting paths lift the greedy matching to maximum cardinality.
  std::vector<char> visited;
  auto augment = [&](auto&& self, std::size_t p) -> bool {
    for (std::size_t t : adj[p]) {
      if (visited[t]) continue;
      visited[t] = 1;
      if (predOf[t] == kNone || self(self, predOf[t])) {
        predOf[t] = p;
        truthOf[p] = t;
        return true;
      }
    }
    return false;
  };
  for (std::size_t p = 0; p < np; ++p) {
    if (truthOf[p] != kNone) continue;
    visited.assign(nt, 0);
    if (augment(augment, p)) ++matched;
  }
  return matched;
}

MatchResult matchCounts(std::span<const Detection> preds, std::span<const Point> truths, double threshold,
                        double matchRadius) {
  std::vector<Detection> kept;
  for (const auto& d : preds)
    if (d.score >= threshold) kept.push_back(d);
  const std::size_t tp = maximumMatching(kept, truths, matchRadius);
  return MatchResult{tp, kept.size() - tp, truths.size() - tp, matchRadius};
}

}  // namespace

F1Result f1Score(std::span<const Detection> preds, std::span<const Point> truths, double threshold,
                 double matchRadius) {
  if (!(matchRadius > 0.0)) throw std::invalid_argument("matchRadius must be positive");
  const MatchResult m = matchCounts(preds, truths, threshold, matchRadius);
  return scoreCounts(m.truePositives, m.falsePositives, m.falseNegatives, matchRadius);
}

F1Result f1Score(std::span<const EvalItem> items, double threshold, double matchRadius) {
  if (!(matchRadius > 0.0)) throw std::invalid_argument("matchRadius must be positive");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (const auto& item : items) {
    const MatchResult m = matchCounts(item.preds, item.truths, threshold, matchRadius);
    tp += m.truePositives;
    fp += m.falsePositives;
    fn += m.falseNegatives;
  }
  return scoreCounts(tp, fp, fn, matchRadius);
}

SweepResult thresholdSweep(std::span<const EvalItem> items, double matchRadius) {
  std::size_t truths = 0;
  for (const auto& item : items) truths += item.truths.size();
  if (truths == 0) throw std::invalid_argument("threshold sweep needs at least one ground-truth point");
  SweepResult best{0.05, -1.0};
  for (int i = 50; i <= 950; ++i) {
    const double t = i / 1000.0;
    const double f = f1Score(items, t, matchRadius).f1;
    if (f > best.bestF1) best = {t, f};
  }
  return best;
}

SweepResult thresholdSweep(std::span<const Detection> preds, std::span<const Point> truths, double matchRadius) {
  const EvalItem item{{preds.begin(), preds.end()}, {truths.begin(), truths.end()}};
  return thresholdSweep(std::span<const EvalItem>(&item, 1), matchRadius);
}

namespace {

nlohmann::json f1Json(const F1Result& r) {
  return {{"precision", r.precision},       {"recall", r.recall},
          {"f1", r.f1},                     {"tp", r.match.truePositives},
          {"fp", r.match.falsePositives},   {"fn", r.match.falseNegatives}};
}

}  // namespace

nlohmann::json EvalReport::toJson() const {
  nlohmann::json j = f1Json(overall);
  j["threshold"] = threshold;
  j["match_radius"] = overall.match.matchRadius;
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [scanner, r] : perDomain) per[std::to_string(scanner)] = f1Json(r);
  j["per_domain"] = per;
  return j;
}

std::vector<EvalItem> predictItems(const Detector& detector, std::span<const AnnotatedRegion> regions,
                                   const EvalConfig& cfg, std::size_t workers) {
  std::vector<EvalItem> items(regions.size());
  parallelFor(regions.size(), workers, [&](std::size_t i) {
    items[i].preds = predictRegion(detector, regions[i].image, cfg);
    items[i].truths = regions[i].points;
  });
  return items;
}

EvalReport evaluateRegions(const Detector& detector, std::span<const AnnotatedRegion> regions, const EvalConfig& cfg,
                           std::size_t workers) {
  std::vector<AnnotatedRegion> labeled;
  for (const auto& r : regions)
    if (r.labeled) labeled.push_back(r);
  const auto items = predictItems(detector, labeled, cfg, workers);
  EvalReport report;
  report.threshold = cfg.threshold;
  report.overall = f1Score(items, cfg.threshold, cfg.matchRadius);
  std::map<int, std::vector<EvalItem>> byDomain;
  for (std::size_t i = 0; i < labeled.size(); ++i) byDomain[labeled[i].label.scanner].push_back(items[i]);
  for (const auto& [scanner, its] : byDomain) report.perDomain[scanner] = f1Score(its, cfg.threshold, cfg.matchRadius);
  return report;
}

// ---- domain probe ---------------------------------------------------------------

double linearProbeAccuracy(const std::vector<std::vector<double>>& trainX, const std::vector<int>& trainY,
                           const std::vector<std::vector<double>>& testX, const std::vector<int>& testY,
                           double l2, std::size_t epochs) {
  if (trainX.empty() || trainX.size() != trainY.size() || testX.size() != testY.size() || testX.empty())
    throw std::invalid_argument("probe needs non-empty, consistent train and test sets");
  const std::size_t dim = trainX.front().size();
  std::vector<int> classes(trainY.begin(), trainY.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  const std::size_t k = classes.size();
  auto classIndex = [&](int y) {
    return static_cast<std::size_t>(std::lower_bound(classes.begin(), classes.end(), y) - classes.begin());
  };

  std::vector<double> mean(dim, 0.0), sd(dim, 0.0);
  for (const auto& x : trainX)
    for (std::size_t d = 0; d < dim; ++d) mean[d] += x[d];
  for (auto& m : mean) m /= static_cast<double>(trainX.size());
  for (const auto& x : trainX)
    for (std::size_t d = 0; d < dim; ++d) sd[d] += (x[d] - mean[d]) * (x[d] - mean[d]);
  for (auto& s : sd) s = std::sqrt(s / static_cast<double>(trainX.size())) + 1e-8;
  auto standardize = [&](const std::vector<double>& x) {
    std::vector<double> z(dim);
    for (std::size_t d = 0; d < dim; ++d) z[d] = (x[d] - mean[d]) / sd[d];
    return z;
  };
  std::vector<std::vector<double>> zs;
  for (const auto& x : trainX) zs.push_back(standardize(x));

  // weights [k][dim + 1], last column is the bias.
  std::vector<std::vector<double>> w(k, std::vector<double>(dim + 1, 0.0));
  auto logits = [&](const std::vector<double>& z) {
    std::vector<double> out(k);
    for (std::size_t c = 0; c < k; ++c) {
      double s = w[c][dim];
      for (std::size_t d = 0; d < dim; ++d) s += w[c][d] * z[d];
      out[c] = s;
    }
    return out;
  };
  const double lr = 0.5;
  const double n = static_cast<double>(zs.size());
  for (std::size_t e = 0; e < epochs; ++e) {
    std::vector<std::vector<double>> grad(k, std::vector<double>(dim + 1, 0.0));
    for (std::size_t i = 0; i < zs.size(); ++i) {
      auto l = logits(zs[i]);
      const double mx = *std::max_element(l.begin(), l.end());
      double total = 0.0;
      for (auto& v : l) total += (v = std::exp(v - mx));
      const std::size_t y = classIndex(trainY[i]);
      for (std::size_t c = 0; c < k; ++c) {
        const double err = l[c] / total - (c == y ? 1.0 : 0.0);
        for (std::size_t d = 0; d < dim; ++d) grad[c][d] += err * zs[i][d];
        grad[c][dim] += err;
      }
    }
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t d = 0; d <= dim; ++d) {
        const double reg = d < dim ? l2 * w[c][d] : 0.0;
        w[c][d] -= lr * (grad[c][d] / n + reg);
      }
  }

  std::size_t correct = 0;
  for (std::size_t i = 0; i < testX.size(); ++i) {
    const auto l = logits(standardize(testX[i]));
    const std::size_t pred = static_cast<std::size_t>(std::max_element(l.begin(), l.end()) - l.begin());
    if (classes[pred] == testY[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(testX.size());
}

std::vector<std::vector<double>> collectTapFeatures(const Detector& detector,
                                                    std::span<const AnnotatedRegion> regions) {
  std::vector<std::vector<double>> out;
  for (const auto& r : regions) {
    Graph g(false);
    out.push_back(tapFeatures(detector.forward(g, r.image)));
  }
  return out;
}

// ---- leave one domain out -------------------------------------------------------------

nlohmann::json LooReport::toJson() const {
  return {{"held_out_scanner", heldOutScanner},
          {"threshold", threshold},
          {"held_out", f1Json(heldOut)},
          {"train", f1Json(train)},
          {"val", f1Json(val)},
          {"test", f1Json(test)},
          {"trained_region_ids", trainedRegionIds}};
}

ProfileMap fitProfiles(std::span<const AnnotatedRegion> regions, const StainMatrix& m) {
  std::vector<Vec3> allMeans;
  std::map<DomainKey, std::vector<Vec3>> byDomain;
  for (const auto& r : regions) {
    const Vec3 mean = hedMean(r.image, m);
    allMeans.push_back(mean);
    byDomain[{r.label.scanner, r.label.tissue}].push_back(mean);
  }
  ProfileMap profiles;
  for (const auto& [key, means] : byDomain)
    profiles[key] = fitProfileFromMeans(means, allMeans, key.first, key.second);
  return profiles;
}

ProfileMap applyProfileOverrides(ProfileMap fitted, const std::vector<StainProfile>& overrides) {
  for (const auto& p : overrides) fitted[{p.scanner, p.tissue}] = p;
  return fitted;
}

std::vector<AnnotatedRegion> selectRegions(std::span<const AnnotatedRegion> regions, const std::vector<int>& ids) {
  const std::set<int> wanted(ids.begin(), ids.end());
  std::vector<AnnotatedRegion> out;
  for (const auto& r : regions)
    if (wanted.count(r.id)) out.push_back(r);
  return out;
}

std::vector<TrainSample> trainingSamples(std::span<const AnnotatedRegion> regions, std::size_t inputSize) {
  std::vector<TrainSample> out;
  for (const auto& r : regions) {
    if (r.image.width == inputSize && r.image.height == inputSize) {
      out.push_back(toSample(r));
      continue;
    }
    for (auto& p : extractPatches(r, inputSize)) {
      TrainSample s{std::move(p.image), std::move(p.points), r.label, r.labeled, r.id};
      out.push_back(std::move(s));
    }
  }
  return out;
}

LooOutcome leaveOneDomainOut(std::span<const AnnotatedRegion> regions, int heldOutScanner, const LooConfig& cfg) {
  std::set<int> scanners;
  for (const auto& r : regions) scanners.insert(r.label.scanner);
  if (!scanners.count(heldOutScanner))
    throw std::invalid_argument("held-out scanner " + std::to_string(heldOutScanner) + " not in dataset");
  if (scanners.size() < 2) throw std::invalid_argument("leave-one-domain-out needs at least 2 domains");

  std::vector<AnnotatedRegion> retained, heldOut;
  for (const auto& r : regions) (r.label.scanner == heldOutScanner ? heldOut : retained).push_back(r);

  LooOutcome outcome{LooReport{}, Model(cfg.detector, cfg.dac, cfg.seed), {}, {}};
  outcome.split = stratifiedSplit(retained, cfg.splitRatios, cfg.seed);
  const auto trainRegions = selectRegions(retained, outcome.split.regionsIn(Split::Train));
  const auto valRegions = selectRegions(retained, outcome.split.regionsIn(Split::Val));
  const auto testRegions = selectRegions(retained, outcome.split.regionsIn(Split::Test));

  const StainMatrix stains = StainMatrix::standard();
  const ProfileMap profiles = applyProfileOverrides(
      cfg.fitStainProfiles ? fitProfiles(trainRegions, stains) : ProfileMap{}, cfg.profileOverrides);
  const auto samples = trainingSamples(trainRegions, cfg.detector.inputSize);
  TrainerOptions opts = cfg.trainer;
  opts.train.seed = cfg.seed;
  outcome.training = trainLoop(outcome.model, samples, profiles, opts);

  LooReport& rep = outcome.report;
  rep.heldOutScanner = heldOutScanner;
  std::set<int> seen(outcome.training.regionsSeen.begin(), outcome.training.regionsSeen.end());
  rep.trainedRegionIds.assign(seen.begin(), seen.end());

  const Detector& det = outcome.model.detector;
  const std::size_t workers = opts.workers;
  auto labeledItems = [&](const std::vector<AnnotatedRegion>& rs) {
    std::vector<AnnotatedRegion> labeled;
    for (const auto& r : rs)
      if (r.labeled) labeled.push_back(r);
    return predictItems(det, labeled, cfg.eval, workers);
  };
  const auto valItems = labeledItems(valRegions);
  rep.threshold = cfg.eval.threshold;
  if (cfg.tuneThresholdOnVal) {
    std::size_t truths = 0;
    for (const auto& it : valItems) truths += it.truths.size();
    if (truths > 0) rep.threshold = thresholdSweep(valItems, cfg.eval.matchRadius).bestThreshold;
  }
  const double radius = cfg.eval.matchRadius;
  rep.val = f1Score(valItems, rep.threshold, radius);
  rep.train = f1Score(labeledItems(trainRegions), rep.threshold, radius);
  rep.test = f1Score(labeledItems(testRegions), rep.threshold, radius);
  rep.heldOut = f1Score(labeledItems(heldOut), rep.threshold, radius);
  return outcome;
}

}  // namespace rpdac
