#include "rpdac/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace rpdac {

namespace {

// Untinted background stain densities (H, E, DAB).
constexpr std::array<double, 3> kBaseHed{0.04, 0.12, 0.0};

std::array<double, 3> tintSignature(const DomainTint& t) {
  std::array<double, 3> s{};
  for (std::size_t c = 0; c < 3; ++c) s[c] = t.hedScale[c] * kBaseHed[c] + t.hedShift[c];
  return s;
}

struct Blob {
  double x, y;
  double a, b;  // semi-axes
  double angle;
  double density;
};

void renderBlob(HedImage& hed, const Blob& blob) {
  const double reach = std::max(blob.a, blob.b) * 1.3;
  const long x0 = std::max(0L, static_cast<long>(std::floor(blob.x - reach)));
  const long x1 = std::min(static_cast<long>(hed.width) - 1, static_cast<long>(std::ceil(blob.x + reach)));
  const long y0 = std::max(0L, static_cast<long>(std::floor(blob.y - reach)));
  const long y1 = std::min(static_cast<long>(hed.height) - 1, static_cast<long>(std::ceil(blob.y + reach)));
  const double c = std::cos(blob.angle), s = std::sin(blob.angle);
  for (long y = y0; y <= y1; ++y)
    for (long x = x0; x <= x1; ++x) {
      const double dx = x + 0.5 - blob.x, dy = y + 0.5 - blob.y;
      const double u = (c * dx + s * dy) / blob.a, v = (-s * dx + c * dy) / blob.b;
      const double d = std::sqrt(u * u + v * v);
      const double wgt = std::clamp((1.25 - d) / 0.5, 0.0, 1.0);
      if (wgt <= 0.0) continue;
      hed.at(0, y, x) += wgt * blob.density;
      hed.at(1, y, x) += wgt * 0.05;
    }
}

}  // namespace

SynthConfig SynthConfig::threeDomains() {
  SynthConfig cfg;
  cfg.domains = {
      DomainTint{0, 0, {0.00, 0.00, 0.00}, {1.0, 1.0, 1.0}},
      DomainTint{1, 0, {0.10, -0.04, 0.05}, {1.2, 0.8, 1.0}},
      DomainTint{2, 0, {0.05, 0.08, 0.02}, {0.9, 1.3, 1.0}},
  };
  return cfg;
}

void SynthConfig::validate() const {
  if (domains.size() < 2) throw std::invalid_argument("synthetic data needs at least 2 domains");
  if (regionSize < 32) throw std::invalid_argument("regionSize must be >= 32");
  if (!(blobRadiusMin > 0.0 && blobRadiusMax >= blobRadiusMin)) throw std::invalid_argument("invalid blob radius range");
  for (std::size_t i = 0; i < domains.size(); ++i)
    for (std::size_t j = i + 1; j < domains.size(); ++j) {
      const auto a = tintSignature(domains[i]), b = tintSignature(domains[j]);
      double d2 = 0.0;
      for (std::size_t c = 0; c < 3; ++c) d2 += (a[c] - b[c]) * (a[c] - b[c]);
      if (std::sqrt(d2) < 0.05)
        throw std::invalid_argument("domain tints " + std::to_string(i) + " and " + std::to_string(j) +
                                    " are closer than 0.05 in HED space");
    }
}

AnnotatedRegion generateRegion(std::size_t domainId, const SynthConfig& cfg, Rng& rng, int regionId) {
  if (domainId >= cfg.domains.size()) throw std::out_of_range("domain id " + std::to_string(domainId));
  const DomainTint& tint = cfg.domains[domainId];
  const std::size_t size = cfg.regionSize;
  HedImage hed(size, size);

  // Background: hematoxylin/eosin wash with a smooth eosin texture.
  const double fx = rng.uniform(1.0, 3.0), fy = rng.uniform(1.0, 3.0);
  const double px = rng.uniform(0.0, 2.0 * std::numbers::pi), py = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double tx = 2.0 * std::numbers::pi * fx * x / size + px;
      const double ty = 2.0 * std::numbers::pi * fy * y / size + py;
      hed.at(0, y, x) = kBaseHed[0];
      hed.at(1, y, x) = kBaseHed[1] * (1.0 + 0.4 * std::sin(tx) * std::cos(ty));
      hed.at(2, y, x) = kBaseHed[2];
    }

  const int targets = rng.poisson(cfg.targetBlobsPerRegion);
  const int distractors = rng.poisson(cfg.distractorBlobsPerRegion);
  const double margin = 2.0 * cfg.blobRadiusMax;
  const double minSpacing = 4.0 * cfg.blobRadiusMax;
  std::vector<Blob> blobs;
  std::vector<bool> isTarget;
  auto place = [&](bool target) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double x = rng.uniform(margin, size - margin), y = rng.uniform(margin, size - margin);
      const bool clear = std::none_of(blobs.begin(), blobs.end(), [&](const Blob& b) {
        return std::hypot(b.x - x, b.y - y) < minSpacing;
      });
      if (!clear) continue;
      const double r = rng.uniform(cfg.blobRadiusMin, cfg.blobRadiusMax);
      Blob b{x, y, r, r, 0.0, rng.uniform(0.7, 1.0)};
      if (target) {
        b.a = r * rng.uniform(1.6, 2.0);
        b.b = r * rng.uniform(0.5, 0.65);
        b.angle = rng.uniform(0.0, std::numbers::pi);
      }
      blobs.push_back(b);
      isTarget.push_back(target);
      return;
    }
  };
  for (int i = 0; i < targets; ++i) place(true);
  for (int i = 0; i < distractors; ++i) place(false);
  for (const auto& b : blobs) renderBlob(hed, b);

  std::array<double, 3> shift = tint.hedShift;
  for (auto& s : shift) s += rng.normal(0.0, cfg.regionTintJitter);
  const std::size_t n = hed.pixels();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n; ++i) hed.data[c * n + i] = tint.hedScale[c] * hed.data[c * n + i] + shift[c];

  AnnotatedRegion region;
  region.id = regionId;
  region.image = hedToRgb(hed, StainMatrix::standard());
  if (cfg.pixelNoise > 0.0)
    for (double& v : region.image.data) v = std::clamp(v + rng.normal(0.0, cfg.pixelNoise), 0.0, 1.0);
  for (std::size_t i = 0; i < blobs.size(); ++i)
    if (isTarget[i]) region.points.push_back({blobs[i].x, blobs[i].y});
  region.label = DomainLabel{tint.scanner, tint.tissue, regionId};
  region.labeled = true;
  return region;
}

std::vector<AnnotatedRegion> generateDataset(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<AnnotatedRegion> regions;
  int id = 0;
  for (std::size_t d = 0; d < cfg.domains.size(); ++d)
    for (std::size_t r = 0; r < cfg.regionsPerDomain; ++r) {
      Rng rng(deriveSeed(cfg.seed, d, r));
      regions.push_back(generateRegion(d, cfg, rng, id));
      char buf[48];
      std::snprintf(buf, sizeof(buf), "region_d%zu_%04zu", d, r);
      regions.back().name = buf;
      ++id;
    }
  return regions;
}

}  // namespace rpdac
