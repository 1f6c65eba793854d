#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "rpdac/image.hpp"
#include "rpdac/rpdac.hpp"

namespace rpdac {

/// One tissue region with its point annotations. Unlabeled regions carry
/// no points but still have a valid domain label.
struct AnnotatedRegion {
  int id = 0;
  std::string name;
  RgbImage image;
  std::vector<Point> points;
  DomainLabel label;
  bool labeled = true;
};

/// Checks the region invariants; returns human-readable problems.
std::vector<std::string> validateRegion(const AnnotatedRegion& region);

// On disk: one directory per region holding image.png (8-bit RGB) and
// region.json {scanner, tissue, case_id, labeled, points: [{x, y}], scale?}.
// An optional `scale` resizes the image (and points) on load.

struct LoadResult {
  std::vector<AnnotatedRegion> regions;
  std::vector<std::string> warnings;
};

LoadResult loadDataset(const std::filesystem::path& root);
AnnotatedRegion loadRegion(const std::filesystem::path& dir, int id, std::vector<std::string>& warnings);
void saveRegion(const std::filesystem::path& dir, const AnnotatedRegion& region);
void saveDataset(const std::filesystem::path& root, const std::vector<AnnotatedRegion>& regions);

}  // namespace rpdac
