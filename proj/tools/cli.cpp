#include "cli.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <optional>

#include "CLI11.hpp"
#include "rpdac/config.hpp"
#include "rpdac/dataset.hpp"
#include "rpdac/eval.hpp"
#include "rpdac/gradcheck.hpp"
#include "rpdac/synth.hpp"
#include "rpdac/trainer.hpp"

namespace rpdac {

namespace {

namespace fs = std::filesystem;

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> workers;
  bool printDefaults = false;
};

RunConfig resolveConfig(const GlobalFlags& flags) {
  RunConfig cfg = flags.config.empty() ? RunConfig{} : loadConfig(flags.config);
  if (flags.seed) {
    cfg.seed = *flags.seed;
    cfg.synth.seed = *flags.seed;
  }
  if (flags.workers) cfg.workers = *flags.workers;
  if (!flags.out.empty()) cfg.paths.out = flags.out;
  return cfg;
}

std::vector<AnnotatedRegion> loadRegions(const RunConfig& cfg, std::ostream& err) {
  if (cfg.paths.dataset.empty()) throw ConfigError("no dataset path (set paths.dataset or --dataset)");
  requirePaths(cfg, {&RunPaths::dataset});
  LoadResult loaded = loadDataset(cfg.paths.dataset);
  for (const auto& w : loaded.warnings) err << "warning: " << w << '\n';
  if (loaded.regions.empty()) throw std::runtime_error("dataset " + cfg.paths.dataset.string() + " has no regions");
  return std::move(loaded.regions);
}

fs::path outDir(const RunConfig& cfg) {
  if (cfg.paths.out.empty()) throw ConfigError("no output directory (set paths.out or --out)");
  fs::create_directories(cfg.paths.out);
  return cfg.paths.out;
}

void writeJson(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

Model loadModel(const RunConfig& cfg) {
  if (cfg.paths.checkpoint.empty()) throw ConfigError("no checkpoint (set paths.checkpoint or --checkpoint)");
  requirePaths(cfg, {&RunPaths::checkpoint});
  Model model(cfg.detector, cfg.dac, cfg.seed);
  auto params = model.allParameters();
  restoreParameters(params, loadCheckpoint(cfg.paths.checkpoint));
  return model;
}

std::vector<AnnotatedRegion> splitSubset(const std::vector<AnnotatedRegion>& regions, const RunConfig& cfg,
                                         const std::string& which) {
  if (which == "all") return regions;
  const SplitAssignment split = stratifiedSplit(regions, cfg.splitRatios, cfg.seed);
  const Split s = which == "train" ? Split::Train : which == "val" ? Split::Val : Split::Test;
  return selectRegions(regions, split.regionsIn(s));
}

ProfileMap profilesFor(const RunConfig& cfg, std::span<const AnnotatedRegion> regions) {
  const ProfileMap fitted =
      cfg.trainer.fitStainProfiles ? fitProfiles(regions, StainMatrix::standard()) : ProfileMap{};
  return applyProfileOverrides(fitted, cfg.stainProfiles);
}

// ---- subcommands ------------------------------------------------------------

int runSynthGen(const RunConfig& cfg, std::ostream& out) {
  fs::path dir = cfg.paths.out.empty() ? cfg.paths.dataset : cfg.paths.out;
  if (dir.empty()) throw ConfigError("no output directory for synth-gen");
  const auto regions = generateDataset(cfg.synth);
  saveDataset(dir, regions);
  out << "wrote " << regions.size() << " regions to " << dir.string() << '\n';
  return 0;
}

int runTrain(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const auto regions = loadRegions(cfg, err);
  std::vector<std::string> warnings;
  const SplitAssignment split = stratifiedSplit(regions, cfg.splitRatios, cfg.seed, &warnings);
  for (const auto& w : warnings) err << "warning: " << w << '\n';
  const auto trainRegions = selectRegions(regions, split.regionsIn(Split::Train));
  const fs::path dir = outDir(cfg);
  saveConfig(dir / "run_config.json", cfg);

  Model model(cfg.detector, cfg.dac, cfg.seed);
  const auto samples = trainingSamples(trainRegions, cfg.detector.inputSize);
  std::ofstream log(dir / "metrics.jsonl");
  const TrainResult result = trainLoop(model, samples, profilesFor(cfg, trainRegions), cfg.trainerOptions(), &log);
  out << "trained " << result.log.size() << " iterations on " << trainRegions.size() << " regions; checkpoint "
      << (dir / "final.ckpt").string() << '\n';
  return 0;
}

int runEvaluate(const RunConfig& cfg, const std::string& which, std::ostream& out, std::ostream& err) {
  const auto regions = splitSubset(loadRegions(cfg, err), cfg, which);
  const Model model = loadModel(cfg);
  const EvalReport report = evaluateRegions(model.detector, regions, cfg.eval, cfg.workers);
  const nlohmann::json j = report.toJson();
  if (!cfg.paths.out.empty()) writeJson(outDir(cfg) / "report.json", j);
  out << j.dump(2) << '\n';
  return 0;
}

int runSweep(const RunConfig& cfg, const std::string& which, std::ostream& out, std::ostream& err) {
  auto regions = splitSubset(loadRegions(cfg, err), cfg, which);
  std::erase_if(regions, [](const AnnotatedRegion& r) { return !r.labeled; });
  const Model model = loadModel(cfg);
  const auto items = predictItems(model.detector, regions, cfg.eval, cfg.workers);
  const SweepResult best = thresholdSweep(items, cfg.eval.matchRadius);
  const nlohmann::json j{{"best_threshold", best.bestThreshold}, {"best_f1", best.bestF1}};
  if (!cfg.paths.out.empty()) writeJson(outDir(cfg) / "sweep.json", j);
  out << j.dump(2) << '\n';
  return 0;
}

int runLoo(const RunConfig& cfg, std::optional<int> heldOut, std::ostream& out, std::ostream& err) {
  const auto regions = loadRegions(cfg, err);
  LooConfig loo = cfg.looConfig();
  const fs::path dir = cfg.paths.out.empty() ? fs::path() : outDir(cfg);
  loo.trainer.outDir = dir;
  LooOutcome outcome = leaveOneDomainOut(regions, heldOut.value_or(cfg.heldOutScanner), loo);
  const nlohmann::json j = outcome.report.toJson();
  if (!dir.empty()) {
    writeJson(dir / "loo_report.json", j);
    nlohmann::json audit;
    audit["regions_seen"] = outcome.training.regionsSeen;
    writeJson(dir / "region_audit.json", audit);
    std::ofstream log(dir / "metrics.jsonl");
    for (const auto& m : outcome.training.log) log << toJsonLine(m) << '\n';
  }
  out << j.dump(2) << '\n';
  return 0;
}

int runGradcheck(std::uint64_t seed, std::ostream& out) {
  const auto rows = runGradcheckSuite(seed);
  bool ok = true;
  out << std::left << std::setw(26) << "op" << std::setw(14) << "input" << std::setw(14) << "max_rel_err"
      << std::setw(10) << "tol" << "status\n";
  for (const auto& r : rows) {
    ok = ok && r.passed();
    char err[32], tol[32];
    std::snprintf(err, sizeof(err), "%.3e", r.result.maxRelError);
    std::snprintf(tol, sizeof(tol), "%.0e", r.tolerance);
    out << std::left << std::setw(26) << r.op << std::setw(14) << r.input << std::setw(14) << err << std::setw(10)
        << tol << (r.passed() ? "ok" : "FAIL") << '\n';
  }
  return ok ? 0 : 2;
}

int runAugmentPreview(const RunConfig& cfg, std::size_t count, std::ostream& out, std::ostream& err) {
  std::vector<AnnotatedRegion> regions;
  if (!cfg.paths.dataset.empty()) {
    regions = loadRegions(cfg, err);
  } else {
    SynthConfig sc = cfg.synth;
    sc.regionsPerDomain = std::max<std::size_t>(1, (count + sc.domains.size() - 1) / sc.domains.size());
    regions = generateDataset(sc);
  }
  const fs::path dir = outDir(cfg);
  const ProfileMap profiles = profilesFor(cfg, regions);
  const StainMatrix stains = StainMatrix::standard();
  const std::size_t n = std::min(count, regions.size());
  for (std::size_t i = 0; i < n; ++i) {
    const TrainSample before = toSample(regions[i]);
    const TrainSample after = augmentSample(before, profiles, cfg.augment, stains, deriveSeed(cfg.seed, i));
    char name[64];
    std::snprintf(name, sizeof(name), "preview_%03zu", i);
    writePng(dir / (std::string(name) + "_before.png"), before.image);
    writePng(dir / (std::string(name) + "_after.png"), after.image);
  }
  out << "wrote " << n << " before/after pairs to " << dir.string() << '\n';
  return 0;
}

int runFitProfiles(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const auto regions = loadRegions(cfg, err);
  RunConfig shown;
  for (const auto& [key, p] : fitProfiles(regions, StainMatrix::standard())) shown.stainProfiles.push_back(p);
  const nlohmann::json j = toJson(shown)["stain_profiles"];
  if (!cfg.paths.out.empty()) writeJson(outDir(cfg) / "stain_profiles.json", j);
  out << j.dump(2) << '\n';
  return 0;
}

}  // namespace

int cliMain(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Domain-adversarial mitosis detection toolkit", "rpdac"};
  app.fallthrough();
  app.require_subcommand(0, 1);
  GlobalFlags flags;
  app.add_option("--config", flags.config, "JSON run configuration");
  app.add_option("--seed", flags.seed, "Override the run seed");
  app.add_option("--out", flags.out, "Output directory");
  app.add_option("--workers", flags.workers, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--print-defaults", flags.printDefaults, "Print the default configuration and exit");

  std::string dataset, checkpoint, which = "all";
  std::optional<double> threshold;
  std::optional<int> heldOut;
  std::size_t previewCount = 4;
  auto addDataset = [&](CLI::App* sub) { sub->add_option("--dataset", dataset, "Dataset directory"); };
  auto addModel = [&](CLI::App* sub) {
    addDataset(sub);
    sub->add_option("--checkpoint", checkpoint, "Model checkpoint");
    sub->add_option("--split", which, "Regions to score")->check(CLI::IsMember({"all", "train", "val", "test"}));
  };

  auto* synth = app.add_subcommand("synth-gen", "Write a synthetic multi-domain dataset");
  auto* train = app.add_subcommand("train", "Train detector and domain classifier");
  addDataset(train);
  auto* evaluate = app.add_subcommand("evaluate", "TTA + merge + F1 report");
  addModel(evaluate);
  evaluate->add_option("--threshold", threshold, "Decision threshold");
  auto* sweep = app.add_subcommand("sweep-threshold", "Best-F1 threshold over 0.05..0.95");
  addModel(sweep);
  auto* loo = app.add_subcommand("loo", "Leave one domain out: retrain and score");
  addDataset(loo);
  loo->add_option("--held-out", heldOut, "Scanner id to hold out");
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  auto* preview = app.add_subcommand("augment-preview", "Write before/after augmentation PNGs");
  addDataset(preview);
  preview->add_option("--count", previewCount, "Number of pairs")->check(CLI::PositiveNumber);
  auto* fit = app.add_subcommand("fit-profiles", "Fit per-domain stain profiles");
  addDataset(fit);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    if (flags.printDefaults) {
      out << toJson(RunConfig{}).dump(2) << '\n';
      return 0;
    }
    if (app.get_subcommands().empty()) {
      err << "error: a subcommand is required\n" << app.help();
      return 1;
    }
    RunConfig cfg = resolveConfig(flags);
    if (!dataset.empty()) cfg.paths.dataset = dataset;
    if (!checkpoint.empty()) cfg.paths.checkpoint = checkpoint;
    if (threshold) cfg.eval.threshold = *threshold;

    if (synth->parsed()) return runSynthGen(cfg, out);
    if (train->parsed()) return runTrain(cfg, out, err);
    if (evaluate->parsed()) return runEvaluate(cfg, which, out, err);
    if (sweep->parsed()) return runSweep(cfg, which, out, err);
    if (loo->parsed()) return runLoo(cfg, heldOut, out, err);
    if (grad->parsed()) return runGradcheck(cfg.seed, out);
    if (preview->parsed()) return runAugmentPreview(cfg, previewCount, out, err);
    if (fit->parsed()) return runFitProfiles(cfg, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace rpdac
