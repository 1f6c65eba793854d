#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "rpdac/dataset.hpp"
#include "rpdac/random.hpp"
#include "rpdac/stain.hpp"

namespace rpdac {

/// Stain appearance of one synthetic domain, applied in HED space as
/// hed' = hedScale * hed + hedShift.
struct DomainTint {
  int scanner = 0;
  int tissue = 0;
  std::array<double, 3> hedShift{0.0, 0.0, 0.0};
  std::array<double, 3> hedScale{1.0, 1.0, 1.0};
  bool operator==(const DomainTint&) const = default;
};

struct SynthConfig {
  std::vector<DomainTint> domains;
  std::size_t regionsPerDomain = 40;
  std::size_t regionSize = 256;
  double targetBlobsPerRegion = 3.0;      // Poisson mean, elongated and annotated
  double distractorBlobsPerRegion = 6.0;  // Poisson mean, round and unannotated
  double blobRadiusMin = 4.0;
  double blobRadiusMax = 6.0;
  double regionTintJitter = 0.01;  // per-region std-dev of the HED shift
  double pixelNoise = 0.01;
  std::uint64_t seed = 0;

  /// Three well-separated domains used by the default experiments.
  static SynthConfig threeDomains();
  /// Throws std::invalid_argument on < 2 domains or tints closer than 0.05.
  void validate() const;
  bool operator==(const SynthConfig&) const = default;
};

/// Region `regionId` of domain `domainId`; deterministic in (cfg, rng state).
AnnotatedRegion generateRegion(std::size_t domainId, const SynthConfig& cfg, Rng& rng, int regionId = 0);
/// regionsPerDomain regions per domain, each seeded from (seed, domain, index).
std::vector<AnnotatedRegion> generateDataset(const SynthConfig& cfg);

}  // namespace rpdac
