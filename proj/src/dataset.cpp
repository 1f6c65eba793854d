#include "rpdac/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"

namespace rpdac {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<std::string> validateRegion(const AnnotatedRegion& region) {
  std::vector<std::string> problems;
  const double w = static_cast<double>(region.image.width), h = static_cast<double>(region.image.height);
  for (const auto& p : region.points)
    if (!(p.x >= 0.0 && p.y >= 0.0 && p.x < w && p.y < h))
      problems.push_back("point (" + std::to_string(p.x) + ", " + std::to_string(p.y) + ") outside image");
  if (!region.labeled && !region.points.empty()) problems.push_back("unlabeled region carries annotations");
  if (region.label.scanner < 0 || region.label.tissue < 0 || region.label.caseId < 0)
    problems.push_back("negative domain label");
  return problems;
}

AnnotatedRegion loadRegion(const fs::path& dir, int id, std::vector<std::string>& warnings) {
  std::ifstream is(dir / "region.json");
  if (!is) throw std::runtime_error("missing region.json in " + dir.string());
  const json j = json::parse(is);
  AnnotatedRegion r;
  r.id = id;
  r.name = dir.filename().string();
  r.image = readPng(dir / "image.png");
  r.label.scanner = j.at("scanner").get<int>();
  r.label.tissue = j.at("tissue").get<int>();
  r.label.caseId = j.at("case_id").get<int>();
  r.labeled = j.at("labeled").get<bool>();
  for (const auto& p : j.value("points", json::array())) r.points.push_back({p.at("x").get<double>(), p.at("y").get<double>()});
  if (j.contains("scale")) {
    const double s = j.at("scale").get<double>();
    if (!(s > 0.0)) throw std::runtime_error("invalid scale in " + dir.string());
    if (s != 1.0) {
      const auto nh = static_cast<std::size_t>(std::lround(r.image.height * s));
      const auto nw = static_cast<std::size_t>(std::lround(r.image.width * s));
      r.image = resizeBilinear(r.image, nh, nw);
      for (auto& p : r.points) p = {p.x * s, p.y * s};
    }
  }
  for (auto& problem : validateRegion(r)) warnings.push_back(r.name + ": " + problem);
  return r;
}

LoadResult loadDataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw std::runtime_error("dataset directory not found: " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory() && fs::exists(entry.path() / "region.json")) dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  LoadResult result;
  int id = 0;
  for (const auto& d : dirs) result.regions.push_back(loadRegion(d, id++, result.warnings));
  if (result.regions.empty()) result.warnings.push_back("no regions found under " + root.string());
  return result;
}

void saveRegion(const fs::path& dir, const AnnotatedRegion& region) {
  fs::create_directories(dir);
  writePng(dir / "image.png", region.image);
  json j;
  j["scanner"] = region.label.scanner;
  j["tissue"] = region.label.tissue;
  j["case_id"] = region.label.caseId;
  j["labeled"] = region.labeled;
  j["points"] = json::array();
  for (const auto& p : region.points) j["points"].push_back({{"x", p.x}, {"y", p.y}});
  std::ofstream os(dir / "region.json");
  os << j.dump(2) << '\n';
}

void saveDataset(const fs::path& root, const std::vector<AnnotatedRegion>& regions) {
  fs::create_directories(root);
  for (const auto& r : regions) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "region_%05d", r.id);
    saveRegion(root / (r.name.empty() ? std::string(buf) : r.name), r);
  }
}

}  // namespace rpdac
