#include "rpdac/config.hpp"

#include <fstream>
#include <set>

namespace rpdac {

namespace {

using nlohmann::json;

// Reads fields from one JSON object and rejects keys nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  void getPath(const std::string& key, std::filesystem::path& out) {
    std::string s = out.string();
    get(key, s);
    out = s;
  }

  void getActivation(const std::string& key, Activation& out) {
    std::string s = toString(out);
    get(key, s);
    try {
      out = activationFromString(s);
    } catch (const std::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  std::optional<ObjectReader> child(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return std::nullopt;
    return ObjectReader(*it, path_ + "." + key);
  }

  const json* raw(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string where() const { return path_; }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!used_.count(key)) throw ConfigError("unknown config key " + path_ + "." + key);
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

json betaJson(const BetaSpec& b) { return {{"a", b.a}, {"b", b.b}, {"scale", b.scale}, {"shift", b.shift}}; }

BetaSpec readBeta(ObjectReader r) {
  BetaSpec b;
  r.get("a", b.a);
  r.get("b", b.b);
  r.get("scale", b.scale);
  r.get("shift", b.shift);
  r.finish();
  return b;
}

json profileJson(const StainProfile& p) {
  return {{"scanner", p.scanner},
          {"tissue", p.tissue},
          {"h", betaJson(p.specH)},
          {"e", betaJson(p.specE)},
          {"d", betaJson(p.specD)}};
}

StainProfile readProfile(ObjectReader r) {
  StainProfile p;
  r.get("scanner", p.scanner);
  r.get("tissue", p.tissue);
  if (auto c = r.child("h")) p.specH = readBeta(*c);
  if (auto c = r.child("e")) p.specE = readBeta(*c);
  if (auto c = r.child("d")) p.specD = readBeta(*c);
  r.finish();
  return p;
}

json tintJson(const DomainTint& t) {
  return {{"scanner", t.scanner}, {"tissue", t.tissue}, {"hed_shift", t.hedShift}, {"hed_scale", t.hedScale}};
}

DomainTint readTint(ObjectReader r) {
  DomainTint t;
  r.get("scanner", t.scanner);
  r.get("tissue", t.tissue);
  r.get("hed_shift", t.hedShift);
  r.get("hed_scale", t.hedScale);
  r.finish();
  return t;
}

template <class Fn>
auto readArray(ObjectReader& parent, const std::string& key, Fn&& readOne) {
  std::vector<decltype(readOne(std::declval<ObjectReader>()))> out;
  const json* arr = parent.raw(key);
  if (!arr) return std::optional<decltype(out)>{};
  if (!arr->is_array()) throw ConfigError(parent.where() + "." + key + " must be an array");
  for (std::size_t i = 0; i < arr->size(); ++i)
    out.push_back(readOne(ObjectReader((*arr)[i], parent.where() + "." + key + "[" + std::to_string(i) + "]")));
  return std::optional<decltype(out)>{std::move(out)};
}

}  // namespace

json toJson(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["paths"] = {{"dataset", c.paths.dataset.string()},
                {"out", c.paths.out.string()},
                {"checkpoint", c.paths.checkpoint.string()}};
  const auto& t = c.train;
  j["train"] = {{"epochs", t.epochs},
                {"iterations", t.iterations},
                {"mini_batch", t.miniBatch},
                {"accum_steps", t.accumSteps},
                {"peak_lr", t.peakLr},
                {"warmup_fraction", t.warmupFraction},
                {"final_lr_factor", t.finalLrFactor},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"adam_eps", t.adamEps},
                {"weight_decay", t.weightDecay}};
  const auto& tr = c.trainer;
  j["trainer"] = {{"use_dac", tr.useDac},
                  {"agnostic_weight", tr.agnosticWeight},
                  {"dac_step_first", tr.dacStepFirst},
                  {"checkpoint_every", tr.checkpointEvery},
                  {"log_every", tr.logEvery},
                  {"fit_stain_profiles", tr.fitStainProfiles}};
  const auto& a = c.augment;
  const auto& g = a.geometricOptions;
  const auto& f = a.filterOptions;
  j["augment"] = {{"stain", a.stain},
                  {"geometric", a.geometric},
                  {"filter", a.filter},
                  {"flip_probability", g.flipProbability},
                  {"rotate", g.rotate},
                  {"max_translation", g.maxTranslation},
                  {"blur_probability", f.blurProbability},
                  {"sharpen_probability", f.sharpenProbability},
                  {"blur_sigma_min", f.blurSigmaMin},
                  {"blur_sigma_max", f.blurSigmaMax},
                  {"sharpen_amount_min", f.sharpenAmountMin},
                  {"sharpen_amount_max", f.sharpenAmountMax},
                  {"sharpen_sigma", f.sharpenSigma}};
  const auto& d = c.detector;
  j["detector"] = {{"input_size", d.inputSize},       {"base_channels", d.baseChannels},
                   {"box_size", d.boxSize},           {"activation", toString(d.activation)},
                   {"gate_init", d.gateInit},         {"gated_joins", d.gatedJoins}};
  j["dac"] = {{"reduced_channels", c.dac.reducedChannels},
              {"head_dims", c.dac.headDims},
              {"activation", toString(c.dac.activation)}};
  const auto& e = c.eval;
  j["eval"] = {{"threshold", e.threshold},       {"decode_threshold", e.decodeThreshold},
               {"merge_radius", e.mergeRadius},  {"match_radius", e.matchRadius},
               {"tta", e.tta}};
  j["split"] = {{"ratios", c.splitRatios}, {"held_out_scanner", c.heldOutScanner}};
  j["stain_profiles"] = json::array();
  for (const auto& p : c.stainProfiles) j["stain_profiles"].push_back(profileJson(p));
  const auto& s = c.synth;
  json domains = json::array();
  for (const auto& t : s.domains) domains.push_back(tintJson(t));
  j["synth"] = {{"domains", domains},
                {"regions_per_domain", s.regionsPerDomain},
                {"region_size", s.regionSize},
                {"target_blobs_per_region", s.targetBlobsPerRegion},
                {"distractor_blobs_per_region", s.distractorBlobsPerRegion},
                {"blob_radius_min", s.blobRadiusMin},
                {"blob_radius_max", s.blobRadiusMax},
                {"region_tint_jitter", s.regionTintJitter},
                {"pixel_noise", s.pixelNoise}};
  return j;
}

RunConfig configFromJson(const json& j) {
  RunConfig c;
  ObjectReader root(j, "config");
  root.get("seed", c.seed);
  root.get("workers", c.workers);
  if (auto r = root.child("paths")) {
    r->getPath("dataset", c.paths.dataset);
    r->getPath("out", c.paths.out);
    r->getPath("checkpoint", c.paths.checkpoint);
    r->finish();
  }
  if (auto r = root.child("train")) {
    auto& t = c.train;
    r->get("epochs", t.epochs);
    r->get("iterations", t.iterations);
    r->get("mini_batch", t.miniBatch);
    r->get("accum_steps", t.accumSteps);
    r->get("peak_lr", t.peakLr);
    r->get("warmup_fraction", t.warmupFraction);
    r->get("final_lr_factor", t.finalLrFactor);
    r->get("beta1", t.beta1);
    r->get("beta2", t.beta2);
    r->get("adam_eps", t.adamEps);
    r->get("weight_decay", t.weightDecay);
    r->finish();
  }
  if (auto r = root.child("trainer")) {
    auto& t = c.trainer;
    r->get("use_dac", t.useDac);
    r->get("agnostic_weight", t.agnosticWeight);
    r->get("dac_step_first", t.dacStepFirst);
    r->get("checkpoint_every", t.checkpointEvery);
    r->get("log_every", t.logEvery);
    r->get("fit_stain_profiles", t.fitStainProfiles);
    r->finish();
  }
  if (auto r = root.child("augment")) {
    auto& a = c.augment;
    auto& g = a.geometricOptions;
    auto& f = a.filterOptions;
    r->get("stain", a.stain);
    r->get("geometric", a.geometric);
    r->get("filter", a.filter);
    r->get("flip_probability", g.flipProbability);
    r->get("rotate", g.rotate);
    r->get("max_translation", g.maxTranslation);
    r->get("blur_probability", f.blurProbability);
    r->get("sharpen_probability", f.sharpenProbability);
    r->get("blur_sigma_min", f.blurSigmaMin);
    r->get("blur_sigma_max", f.blurSigmaMax);
    r->get("sharpen_amount_min", f.sharpenAmountMin);
    r->get("sharpen_amount_max", f.sharpenAmountMax);
    r->get("sharpen_sigma", f.sharpenSigma);
    r->finish();
  }
  if (auto r = root.child("detector")) {
    auto& d = c.detector;
    r->get("input_size", d.inputSize);
    r->get("base_channels", d.baseChannels);
    r->get("box_size", d.boxSize);
    r->getActivation("activation", d.activation);
    r->get("gate_init", d.gateInit);
    r->get("gated_joins", d.gatedJoins);
    r->finish();
  }
  if (auto r = root.child("dac")) {
    r->get("reduced_channels", c.dac.reducedChannels);
    r->get("head_dims", c.dac.headDims);
    r->getActivation("activation", c.dac.activation);
    r->finish();
  }
  if (auto r = root.child("eval")) {
    auto& e = c.eval;
    r->get("threshold", e.threshold);
    r->get("decode_threshold", e.decodeThreshold);
    r->get("merge_radius", e.mergeRadius);
    r->get("match_radius", e.matchRadius);
    r->get("tta", e.tta);
    r->finish();
  }
  if (auto r = root.child("split")) {
    r->get("ratios", c.splitRatios);
    r->get("held_out_scanner", c.heldOutScanner);
    r->finish();
  }
  if (auto profiles = readArray(root, "stain_profiles", readProfile)) c.stainProfiles = std::move(*profiles);
  if (auto r = root.child("synth")) {
    auto& s = c.synth;
    if (auto domains = readArray(*r, "domains", readTint)) s.domains = std::move(*domains);
    r->get("regions_per_domain", s.regionsPerDomain);
    r->get("region_size", s.regionSize);
    r->get("target_blobs_per_region", s.targetBlobsPerRegion);
    r->get("distractor_blobs_per_region", s.distractorBlobsPerRegion);
    r->get("blob_radius_min", s.blobRadiusMin);
    r->get("blob_radius_max", s.blobRadiusMax);
    r->get("region_tint_jitter", s.regionTintJitter);
    r->get("pixel_noise", s.pixelNoise);
    r->finish();
  }
  root.finish();
  c.synth.seed = c.seed;
  try {
    c.train.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid train section: ") + e.what());
  }
  return c;
}

RunConfig loadConfig(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return configFromJson(j);
}

void saveConfig(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config " + path.string());
  out << toJson(cfg).dump(2) << '\n';
}

void requirePaths(const RunConfig& cfg, std::initializer_list<const std::filesystem::path RunPaths::*> which) {
  for (auto member : which) {
    const auto& p = cfg.paths.*member;
    if (!p.empty() && !std::filesystem::exists(p)) throw ConfigError("path does not exist: " + p.string());
  }
}

TrainerOptions RunConfig::trainerOptions() const {
  TrainerOptions o;
  o.train = train;
  o.train.seed = seed;
  o.augment = augment;
  o.useDac = trainer.useDac;
  o.agnosticWeight = trainer.agnosticWeight;
  o.dacStepFirst = trainer.dacStepFirst;
  o.workers = workers;
  o.checkpointEvery = trainer.checkpointEvery;
  o.outDir = paths.out;
  o.logEvery = trainer.logEvery;
  return o;
}

LooConfig RunConfig::looConfig() const {
  LooConfig l;
  l.trainer = trainerOptions();
  l.detector = detector;
  l.dac = dac;
  l.eval = eval;
  l.splitRatios = splitRatios;
  l.seed = seed;
  l.fitStainProfiles = trainer.fitStainProfiles;
  l.profileOverrides = stainProfiles;
  return l;
}

}  // namespace rpdac
