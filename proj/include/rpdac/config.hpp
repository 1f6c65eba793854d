#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rpdac/detector.hpp"
#include "rpdac/eval.hpp"
#include "rpdac/optim.hpp"
#include "rpdac/rpdac.hpp"
#include "rpdac/synth.hpp"
#include "rpdac/trainer.hpp"

namespace rpdac {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunPaths {
  std::filesystem::path dataset;     // region directories
  std::filesystem::path out;         // run outputs
  std::filesystem::path checkpoint;  // model to evaluate
  bool operator==(const RunPaths&) const = default;
};

struct TrainerSettings {
  bool useDac = true;
  double agnosticWeight = 1.0;
  bool dacStepFirst = true;
  std::size_t checkpointEvery = 0;
  std::size_t logEvery = 0;
  bool fitStainProfiles = true;
  bool operator==(const TrainerSettings&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  RunPaths paths;
  TrainConfig train;
  TrainerSettings trainer;
  AugmentConfig augment;
  DetectorConfig detector;
  DacHeadConfig dac;
  EvalConfig eval;
  std::array<double, 3> splitRatios{0.8, 0.1, 0.1};
  int heldOutScanner = 0;
  /// Replace the fitted profile of the matching (scanner, tissue).
  std::vector<StainProfile> stainProfiles;
  SynthConfig synth = SynthConfig::threeDomains();

  /// Trainer options with the seed, workers and output directory applied.
  TrainerOptions trainerOptions() const;
  LooConfig looConfig() const;
  bool operator==(const RunConfig&) const = default;
};

/// Unknown keys anywhere are rejected with ConfigError naming the key path.
RunConfig configFromJson(const nlohmann::json& j);
nlohmann::json toJson(const RunConfig& cfg);

RunConfig loadConfig(const std::filesystem::path& path);
void saveConfig(const std::filesystem::path& path, const RunConfig& cfg);

/// Throws ConfigError when a non-empty path in `which` does not exist.
void requirePaths(const RunConfig& cfg, std::initializer_list<const std::filesystem::path RunPaths::*> which);

}  // namespace rpdac
