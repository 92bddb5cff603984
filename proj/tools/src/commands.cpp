#include "sonic_cli/commands.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <sonic/error.hpp>
#include <sonic/evaluation.hpp>
#include <sonic/matching.hpp>
#include <sonic/parallel.hpp>

namespace sonic::cli {

using Json = nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr int kManifestVersion = 1;

// ---------------------------------------------------------------------------
// JSON config helpers

void check_keys(const Json& obj, std::initializer_list<const char*> known, const std::string& where) {
  if (!obj.is_object()) throw Error(Errc::config, where + ": expected a JSON object");
  for (const auto& [key, value] : obj.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
      throw Error(Errc::config, where + ": unknown key '" + key + "'");
  }
}

template <class T>
void read_opt(const Json& obj, const char* key, T& dst, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    dst = obj.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw Error(Errc::config, where + ": bad value for '" + key + "': " + e.what());
  }
}

void read_deg(const Json& obj, const char* key, double& dst_rad, const std::string& where) {
  double deg = rad2deg(dst_rad);
  read_opt(obj, key, deg, where);
  dst_rad = deg2rad(deg);
}

void read_path(const Json& obj, const char* key, fs::path& dst, const std::string& where) {
  std::string s = dst.string();
  read_opt(obj, key, s, where);
  dst = s;
}

Json load_config(const std::optional<fs::path>& path) {
  if (!path) return Json::object();
  std::ifstream in(*path);
  if (!in) throw Error(Errc::io, "cannot read config " + path->string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw Error(Errc::config, path->string() + ": " + e.what());
  }
}

std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string threshold_key(double px) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%g", px);
  return buf;
}

void write_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error(Errc::io, "cannot write " + tmp.string());
    out << content;
    if (!out) throw Error(Errc::io, "failed writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(Errc::io, "cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error(Errc::io, "cannot create directory " + dir.string());
}

void require_dir(const fs::path& dir, const char* what) {
  if (dir.empty()) throw Error(Errc::config, std::string(what) + " path is required");
  if (!fs::is_directory(dir)) throw Error(Errc::io, std::string(what) + " not found: " + dir.string());
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::none: return "none";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "none";
}

Activation parse_activation(const std::string& s) {
  if (s == "none") return Activation::none;
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw Error(Errc::config, "unknown activation '" + s + "'");
}

Json layers_to_json(const std::vector<ConvSpec>& layers) {
  Json arr = Json::array();
  for (const auto& l : layers)
    arr.push_back({{"kernel", l.kernel},
                   {"stride", l.stride},
                   {"out_channels", l.out_channels},
                   {"activation", activation_name(l.activation)}});
  return arr;
}

std::vector<ConvSpec> layers_from_json(const Json& arr, const std::string& where) {
  std::vector<ConvSpec> out;
  for (const auto& j : arr) {
    check_keys(j, {"kernel", "stride", "out_channels", "activation"}, where);
    ConvSpec s;
    read_opt(j, "kernel", s.kernel, where);
    read_opt(j, "stride", s.stride, where);
    read_opt(j, "out_channels", s.out_channels, where);
    std::string act = activation_name(s.activation);
    read_opt(j, "activation", act, where);
    s.activation = parse_activation(act);
    out.push_back(s);
  }
  return out;
}

void parse_train_config(const Json& j, TrainConfig& t, const std::string& where) {
  read_opt(j, "learning_rate", t.learning_rate, where);
  read_opt(j, "batch_pairs", t.batch_pairs, where);
  read_opt(j, "epochs", t.epochs, where);
  read_opt(j, "w_epipolar", t.loss_weights.w_epipolar, where);
  read_opt(j, "w_cyclic", t.loss_weights.w_cyclic, where);
  read_opt(j, "keypoints_per_frame", t.keypoints_per_frame, where);
  if (j.contains("optimizer")) {
    std::string o;
    read_opt(j, "optimizer", o, where);
    if (o == "adam")
      t.optimizer = OptimizerKind::adam;
    else if (o == "sgd")
      t.optimizer = OptimizerKind::sgd;
    else
      throw Error(Errc::config, where + ": optimizer must be 'adam' or 'sgd'");
  }
  read_opt(j, "arc_samples", t.arc_samples, where);
  read_opt(j, "inverse_temperature", t.inverse_temperature, where);
  read_opt(j, "window", t.window, where);
  read_opt(j, "sigma0_px", t.sigma0_px, where);
  read_opt(j, "nms_radius", t.nms_radius, where);
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

Json stats(const std::vector<double>& v) { return {{"mean", mean_of(v)}, {"std", std_of(v)}, {"n", v.size()}}; }

}  // namespace

// ---------------------------------------------------------------------------
// Option loading

GenerateOptions load_generate_options(const std::optional<fs::path>& config, const Overrides& o) {
  const Json j = load_config(config);
  const std::string w = "generate config";
  check_keys(j, {"output", "pairs", "held_out", "pairs_per_scene", "seed", "jobs", "intrinsics", "noise", "scene",
                 "offsets"},
             w);
  GenerateOptions opt;
  read_path(j, "output", opt.output, w);
  read_opt(j, "pairs", opt.spec.pairs, w);
  read_opt(j, "held_out", opt.spec.held_out, w);
  read_opt(j, "pairs_per_scene", opt.spec.pairs_per_scene, w);
  read_opt(j, "seed", opt.spec.seed, w);
  read_opt(j, "jobs", opt.jobs, w);
  read_opt(j, "intrinsics", opt.intrinsics, w);
  if (j.contains("noise")) {
    const auto& n = j.at("noise");
    check_keys(n, {"speckle_strength", "additive_sigma"}, w + ".noise");
    read_opt(n, "speckle_strength", opt.spec.noise.speckle_strength, w);
    read_opt(n, "additive_sigma", opt.spec.noise.additive_sigma, w);
  }
  if (j.contains("scene")) {
    const auto& s = j.at("scene");
    const std::string ws = w + ".scene";
    check_keys(s, {"objects", "points_per_object", "object_radius", "isolated_points", "reflectivity_min",
                   "spot_radius_min", "spot_radius_max", "range_margin", "floor"},
               ws);
    auto& sc = opt.spec.scene;
    read_opt(s, "objects", sc.objects, ws);
    read_opt(s, "points_per_object", sc.points_per_object, ws);
    read_opt(s, "object_radius", sc.object_radius, ws);
    read_opt(s, "isolated_points", sc.isolated_points, ws);
    read_opt(s, "reflectivity_min", sc.reflectivity_min, ws);
    read_opt(s, "spot_radius_min", sc.spot_radius_min, ws);
    read_opt(s, "spot_radius_max", sc.spot_radius_max, ws);
    read_opt(s, "range_margin", sc.range_margin, ws);
    if (s.contains("floor") && !s.at("floor").is_null()) {
      const auto& f = s.at("floor");
      check_keys(f, {"height", "reflectivity"}, ws + ".floor");
      FloorPlane fp;
      read_opt(f, "height", fp.height, ws);
      read_opt(f, "reflectivity", fp.reflectivity, ws);
      sc.floor = fp;
    }
  }
  if (j.contains("offsets")) {
    const auto& s = j.at("offsets");
    const std::string ws = w + ".offsets";
    check_keys(s, {"jitter_xy", "jitter_yaw_deg", "jitter_altitude", "jitter_pitch_deg", "dx", "dy", "dz",
                   "dyaw_deg", "dpitch_deg", "droll_deg", "altitude_min", "altitude_max", "pitch_min_deg",
                   "pitch_max_deg"},
               ws);
    auto& of = opt.spec.offsets;
    read_opt(s, "jitter_xy", of.jitter_xy, ws);
    read_deg(s, "jitter_yaw_deg", of.jitter_yaw, ws);
    read_opt(s, "jitter_altitude", of.jitter_altitude, ws);
    read_deg(s, "jitter_pitch_deg", of.jitter_pitch, ws);
    read_opt(s, "dx", of.dx, ws);
    read_opt(s, "dy", of.dy, ws);
    read_opt(s, "dz", of.dz, ws);
    read_deg(s, "dyaw_deg", of.dyaw, ws);
    read_deg(s, "dpitch_deg", of.dpitch, ws);
    read_deg(s, "droll_deg", of.droll, ws);
    read_opt(s, "altitude_min", of.altitude_min, ws);
    read_opt(s, "altitude_max", of.altitude_max, ws);
    read_deg(s, "pitch_min_deg", of.pitch_min, ws);
    read_deg(s, "pitch_max_deg", of.pitch_max, ws);
  }
  if (o.seed) opt.spec.seed = *o.seed;
  if (o.jobs) opt.jobs = *o.jobs;
  if (o.intrinsics) opt.intrinsics = *o.intrinsics;
  opt.spec.intrinsics = resolve_intrinsics(opt.intrinsics);
  if (opt.jobs < 1) throw Error(Errc::config, "jobs must be >= 1");
  opt.spec.validate();
  return opt;
}

TrainOptions load_train_options(const std::optional<fs::path>& config, const Overrides& o) {
  const Json j = load_config(config);
  const std::string w = "train config";
  check_keys(j, {"dataset", "output", "split", "resume", "coam", "seed", "jobs", "learning_rate", "batch_pairs",
                 "epochs", "w_epipolar", "w_cyclic", "keypoints_per_frame", "optimizer", "arc_samples",
                 "inverse_temperature", "window", "sigma0_px", "nms_radius"},
             w);
  TrainOptions opt;
  read_path(j, "dataset", opt.dataset, w);
  read_path(j, "output", opt.output, w);
  read_opt(j, "split", opt.split, w);
  if (j.contains("resume")) {
    fs::path r;
    read_path(j, "resume", r, w);
    opt.resume = r;
  }
  read_opt(j, "coam", opt.coam, w);
  read_opt(j, "seed", opt.train.seed, w);
  read_opt(j, "jobs", opt.train.jobs, w);
  parse_train_config(j, opt.train, w);
  if (o.seed) opt.train.seed = *o.seed;
  if (o.jobs) opt.train.jobs = *o.jobs;
  if (o.coam) opt.coam = *o.coam;
  opt.train.validate();
  return opt;
}

MatchOptions load_match_options(const std::optional<fs::path>& config, const Overrides& o) {
  const Json j = load_config(config);
  const std::string w = "match config";
  check_keys(j, {"dataset", "model", "output", "method", "split", "confidence", "coam", "seed", "jobs",
                 "keypoints_per_frame", "nms_radius", "inverse_temperature", "window", "sigma0_px"},
             w);
  MatchOptions opt;
  read_path(j, "dataset", opt.dataset, w);
  read_path(j, "model", opt.model, w);
  read_path(j, "output", opt.output, w);
  std::string method = "learned";
  read_opt(j, "method", method, w);
  if (method == "learned")
    opt.method = MatchMethod::learned;
  else if (method == "ncc")
    opt.method = MatchMethod::ncc;
  else if (method == "ground_truth")
    opt.method = MatchMethod::ground_truth;
  else
    throw Error(Errc::config, w + ": method must be learned, ncc or ground_truth");
  read_opt(j, "split", opt.split, w);
  read_opt(j, "confidence", opt.confidence, w);
  if (j.contains("coam")) {
    bool c = false;
    read_opt(j, "coam", c, w);
    opt.coam = c;
  }
  read_opt(j, "seed", opt.seed, w);
  read_opt(j, "jobs", opt.jobs, w);
  read_opt(j, "keypoints_per_frame", opt.detector.keypoints_per_frame, w);
  read_opt(j, "nms_radius", opt.detector.nms_radius, w);
  read_opt(j, "inverse_temperature", opt.detector.inverse_temperature, w);
  read_opt(j, "window", opt.detector.window, w);
  read_opt(j, "sigma0_px", opt.detector.sigma0_px, w);
  if (o.seed) opt.seed = *o.seed;
  if (o.jobs) opt.jobs = *o.jobs;
  if (o.confidence) opt.confidence = *o.confidence;
  if (o.coam) opt.coam = *o.coam;
  if (opt.jobs < 1) throw Error(Errc::config, "jobs must be >= 1");
  opt.detector.validate();
  return opt;
}

EvalOptions load_eval_options(const std::optional<fs::path>& config, const Overrides& o) {
  const Json j = load_config(config);
  const std::string w = "eval config";
  check_keys(j, {"dataset", "matches", "output", "threshold_px", "z_threshold", "prior_sigma_xy",
                 "prior_sigma_yaw_deg", "prune", "confident_only", "seed", "jobs"},
             w);
  EvalOptions opt;
  read_path(j, "dataset", opt.dataset, w);
  read_path(j, "matches", opt.matches, w);
  read_path(j, "output", opt.output, w);
  if (j.contains("threshold_px")) {
    double t = 0.0;
    read_opt(j, "threshold_px", t, w);
    opt.threshold_px = t;
  }
  read_opt(j, "z_threshold", opt.z_threshold, w);
  read_opt(j, "prior_sigma_xy", opt.prior_sigma_xy, w);
  read_deg(j, "prior_sigma_yaw_deg", opt.prior_sigma_yaw, w);
  read_opt(j, "prune", opt.prune, w);
  read_opt(j, "confident_only", opt.confident_only, w);
  read_opt(j, "seed", opt.seed, w);
  read_opt(j, "jobs", opt.jobs, w);
  if (o.seed) opt.seed = *o.seed;
  if (o.jobs) opt.jobs = *o.jobs;
  if (o.threshold_px) opt.threshold_px = *o.threshold_px;
  if (opt.threshold_px && !(*opt.threshold_px > 0.0)) throw Error(Errc::config, "threshold_px must be positive");
  if (!(opt.z_threshold > 0.0)) throw Error(Errc::config, "z_threshold must be positive");
  if (!(opt.prior_sigma_xy >= 0.0 && opt.prior_sigma_yaw >= 0.0))
    throw Error(Errc::config, "prior noise sigmas must be >= 0");
  if (opt.jobs < 1) throw Error(Errc::config, "jobs must be >= 1");
  return opt;
}

ReportOptions load_report_options(const std::optional<fs::path>& config, const Overrides& o) {
  const Json j = load_config(config);
  const std::string w = "report config";
  check_keys(j, {"inputs", "output", "threshold_px"}, w);
  ReportOptions opt;
  if (j.contains("inputs")) {
    const auto& in = j.at("inputs");
    if (!in.is_object()) throw Error(Errc::config, w + ": inputs must map labels to metrics files");
    for (const auto& [label, path] : in.items()) opt.inputs.emplace_back(label, path.get<std::string>());
  }
  if (j.contains("output")) {
    fs::path p;
    read_path(j, "output", p, w);
    opt.output = p;
  }
  if (j.contains("threshold_px")) {
    double t = 0.0;
    read_opt(j, "threshold_px", t, w);
    opt.threshold_px = t;
  }
  if (o.threshold_px) opt.threshold_px = *o.threshold_px;
  return opt;
}

// ---------------------------------------------------------------------------
// Dataset and model directories

std::vector<std::string> DatasetIndex::select(const std::string& split) const {
  if (split == "train") return train;
  if (split == "test") return test;
  if (split == "all") {
    auto all = train;
    all.insert(all.end(), test.begin(), test.end());
    return all;
  }
  throw Error(Errc::config, "split must be train, test or all (got '" + split + "')");
}

DatasetIndex read_dataset_index(const fs::path& dataset) {
  require_dir(dataset, "dataset");
  const fs::path mp = dataset / "manifest.json";
  std::ifstream in(mp);
  if (!in) throw Error(Errc::io, "cannot read " + mp.string());
  DatasetIndex idx;
  try {
    const Json j = Json::parse(in);
    idx.train = j.at("train").get<std::vector<std::string>>();
    idx.test = j.at("test").get<std::vector<std::string>>();
    idx.seed = j.at("seed").get<std::uint64_t>();
    idx.intrinsics = parse_intrinsics(j.at("intrinsics").dump());
  } catch (const Json::exception& e) {
    throw Error(Errc::load, mp.string() + ": " + e.what());
  }
  return idx;
}

void write_model(const fs::path& dir, const ModelWeights& weights, const TrainConfig& s) {
  ensure_dir(dir);
  const auto& c = weights.config;
  ordered_json j;
  j["encoder"] = {{"coarse_layers", layers_to_json(c.coarse_layers)},
                  {"fine_layers", layers_to_json(c.fine_layers)},
                  {"fine_skip_layer", c.fine_skip_layer},
                  {"co_attention", c.co_attention},
                  {"seed", c.seed}};
  j["inverse_temperature"] = s.inverse_temperature;
  j["window"] = s.window;
  j["sigma0_px"] = s.sigma0_px;
  j["keypoints_per_frame"] = s.keypoints_per_frame;
  j["nms_radius"] = s.nms_radius;
  save_weights(weights, dir / "weights.sncw.tmp");
  fs::rename(dir / "weights.sncw.tmp", dir / "weights.sncw");
  write_atomic(dir / "model.json", j.dump(2) + "\n");
}

Model read_model(const fs::path& dir) {
  require_dir(dir, "model");
  std::ifstream in(dir / "model.json");
  if (!in) throw Error(Errc::io, "cannot read " + (dir / "model.json").string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw Error(Errc::load, (dir / "model.json").string() + ": " + e.what());
  }
  const std::string w = (dir / "model.json").string();
  check_keys(j, {"encoder", "inverse_temperature", "window", "sigma0_px", "keypoints_per_frame", "nms_radius"}, w);
  const Json& e = j.at("encoder");
  check_keys(e, {"coarse_layers", "fine_layers", "fine_skip_layer", "co_attention", "seed"}, w + " encoder");
  EncoderConfig cfg;
  cfg.coarse_layers = layers_from_json(e.at("coarse_layers"), w);
  cfg.fine_layers = layers_from_json(e.at("fine_layers"), w);
  read_opt(e, "fine_skip_layer", cfg.fine_skip_layer, w);
  read_opt(e, "co_attention", cfg.co_attention, w);
  read_opt(e, "seed", cfg.seed, w);
  cfg.validate();
  Model m;
  parse_train_config(j, m.settings, w);
  m.weights = load_weights(dir / "weights.sncw", cfg);
  return m;
}

// ---------------------------------------------------------------------------
// generate

GenerateSummary cmd_generate(const GenerateOptions& opt) {
  if (opt.output.empty()) throw Error(Errc::config, "generate: output path is required");
  ensure_dir(opt.output / "pairs");
  spdlog::info("generating {} training + {} held-out pairs (seed {})", opt.spec.pairs, opt.spec.held_out,
               opt.spec.seed);
  const GeneratedDataset ds = generate_dataset(opt.spec, opt.jobs);

  std::vector<std::string> names(ds.pairs.size());
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "pair_%05zu", i);
    names[i] = buf;
  }
  parallel_for(ds.pairs.size(), opt.jobs, [&](std::size_t i) {
    const fs::path final_dir = opt.output / "pairs" / names[i];
    const fs::path tmp_dir = opt.output / "pairs" / ("." + names[i] + ".tmp");
    fs::remove_all(tmp_dir);
    write_pair(tmp_dir, ds.pairs[i]);
    fs::remove_all(final_dir);
    fs::rename(tmp_dir, final_dir);
  });

  GenerateSummary sum;
  ordered_json split_small = Json::array(), split_large = Json::array();
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    if (is_small_variation(ds.pairs[i])) {
      split_small.push_back(names[i]);
      ++sum.small;
    } else {
      split_large.push_back(names[i]);
      ++sum.large;
    }
  }
  sum.train_pairs = ds.train_count;
  sum.test_pairs = ds.pairs.size() - ds.train_count;

  ordered_json m;
  m["format_version"] = kManifestVersion;
  m["count"] = ds.pairs.size();
  m["seed"] = opt.spec.seed;
  m["intrinsics"] = Json::parse(intrinsics_to_json(opt.spec.intrinsics));
  m["pairs_per_scene"] = opt.spec.pairs_per_scene;
  m["noise"] = {{"speckle_strength", opt.spec.noise.speckle_strength},
                {"additive_sigma", opt.spec.noise.additive_sigma}};
  m["train"] = std::vector<std::string>(names.begin(), names.begin() + static_cast<std::ptrdiff_t>(ds.train_count));
  m["test"] = std::vector<std::string>(names.begin() + static_cast<std::ptrdiff_t>(ds.train_count), names.end());
  m["split"] = {{"rule", "small: |yaw| < 5 deg and |x|, |y| < 1.5 m"}, {"small", split_small}, {"large", split_large}};
  write_atomic(opt.output / "manifest.json", m.dump(2) + "\n");
  spdlog::info("wrote {} pairs ({} small, {} large variation)", ds.pairs.size(), sum.small, sum.large);
  return sum;
}

// ---------------------------------------------------------------------------
// train

TrainSummary cmd_train(const TrainOptions& opt) {
  const DatasetIndex idx = read_dataset_index(opt.dataset);
  if (opt.output.empty()) throw Error(Errc::config, "train: output path is required");
  if (opt.resume) require_dir(*opt.resume, "resume model");
  const auto names = idx.select(opt.split);
  if (names.empty()) throw Error(Errc::config, "train: dataset split '" + opt.split + "' is empty");
  ensure_dir(opt.output);

  std::vector<ScenePair> pairs(names.size());
  parallel_for(names.size(), opt.train.jobs, [&](std::size_t i) { pairs[i] = read_pair(idx.pair_dir(opt.dataset, names[i])); });

  ModelWeights weights;
  if (opt.resume) {
    Model m = read_model(*opt.resume);
    if (m.weights.config.co_attention != opt.coam)
      throw Error(Errc::config, "train: --coam does not match the resumed model");
    weights = std::move(m.weights);
    spdlog::info("resuming from {}", opt.resume->string());
  } else {
    EncoderConfig cfg = EncoderConfig::desk();
    cfg.co_attention = opt.coam;
    cfg.seed = opt.train.seed;
    weights = ModelWeights::initialize(cfg);
  }
  spdlog::info("training on {} pairs for {} epochs ({} parameters)", pairs.size(), opt.train.epochs,
               weights.parameter_count());

  std::string csv = "epoch,loss\n";
  TrainResult res = train(pairs, std::move(weights), opt.train, [&](int epoch, double loss) {
    spdlog::info("epoch {} mean loss {:.6f}", epoch, loss);
    csv += std::to_string(epoch) + "," + fmt_g(loss) + "\n";
  });
  write_model(opt.output, res.weights, opt.train);
  write_atomic(opt.output / "loss.csv", csv);

  ordered_json m;
  m["format_version"] = kManifestVersion;
  m["seed"] = opt.train.seed;
  m["dataset_seed"] = idx.seed;
  m["split"] = opt.split;
  m["pairs"] = pairs.size();
  m["epochs"] = opt.train.epochs;
  m["co_attention"] = opt.coam;
  m["resumed"] = opt.resume.has_value();
  m["epoch_loss"] = res.epoch_loss;
  write_atomic(opt.output / "train_manifest.json", m.dump(2) + "\n");
  return {res.epoch_loss, pairs.size()};
}

// ---------------------------------------------------------------------------
// match

MatchSummary cmd_match(const MatchOptions& opt) {
  const DatasetIndex idx = read_dataset_index(opt.dataset);
  if (opt.output.empty()) throw Error(Errc::config, "match: output path is required");
  const auto names = idx.select(opt.split);

  std::optional<Model> model;
  TrainConfig settings = opt.detector;
  if (opt.method == MatchMethod::learned) {
    model = read_model(opt.model);
    if (opt.coam && *opt.coam != model->weights.config.co_attention)
      throw Error(Errc::config, "match: --coam does not match the model");
    settings = model->settings;
  }
  ensure_dir(opt.output);
  MatchConfig mc = settings.match_config();
  mc.confidence_threshold = opt.confidence;

  std::vector<std::size_t> counts(names.size()), confident(names.size());
  parallel_for(names.size(), opt.jobs, [&](std::size_t i) {
    const ScenePair p = read_pair(idx.pair_dir(opt.dataset, names[i]));
    std::vector<MatchResult> matches;
    if (opt.method == MatchMethod::ground_truth) {
      for (const auto& l : p.landmarks) {
        if (!l.covisible()) continue;
        MatchResult r;
        r.query = polar_to_pixel(l.a, p.intrinsics);
        r.predicted = polar_to_pixel(l.b, p.intrinsics);
        r.low_confidence = r.weight < opt.confidence;
        matches.push_back(r);
      }
    } else {
      const auto kps = training_keypoints(p.image_a, settings);
      if (opt.method == MatchMethod::learned) {
        auto [ea, eb] = encode_pair(p.image_a, p.image_b, model->weights);
        matches = match_keypoints(kps, to_level_maps(std::move(ea)), to_level_maps(std::move(eb)), mc);
      } else {
        matches = match_keypoints(kps, patch_baseline_maps(p.image_a), patch_baseline_maps(p.image_b), mc);
      }
    }
    counts[i] = matches.size();
    confident[i] = static_cast<std::size_t>(
        std::count_if(matches.begin(), matches.end(), [](const MatchResult& m) { return !m.low_confidence; }));
    const fs::path out = opt.output / (names[i] + ".csv");
    write_matches_csv(out.string() + ".tmp", matches);
    fs::rename(out.string() + ".tmp", out);
  });

  MatchSummary sum;
  sum.pairs = names.size();
  ordered_json per = Json::array();
  for (std::size_t i = 0; i < names.size(); ++i) {
    sum.matches += counts[i];
    sum.high_confidence += confident[i];
    per.push_back({{"pair", names[i]}, {"matches", counts[i]}, {"high_confidence", confident[i]}});
  }
  const char* method = opt.method == MatchMethod::learned ? "learned" : opt.method == MatchMethod::ncc ? "ncc" : "ground_truth";
  ordered_json m;
  m["format_version"] = kManifestVersion;
  m["method"] = method;
  m["split"] = opt.split;
  m["seed"] = opt.seed;
  m["dataset_seed"] = idx.seed;
  m["confidence"] = opt.confidence;
  m["inverse_temperature"] = mc.inverse_temperature;
  m["window"] = mc.window;
  m["pairs"] = per;
  write_atomic(opt.output / "match_manifest.json", m.dump(2) + "\n");
  spdlog::info("{}: {} matches over {} pairs ({} high confidence)", method, sum.matches, sum.pairs,
               sum.high_confidence);
  return sum;
}

// ---------------------------------------------------------------------------
// eval

namespace {

struct PairMetrics {
  std::string name;
  bool small = false;
  std::string status = "ok";
  std::string message;
  std::size_t matches = 0;
  std::size_t evaluated = 0;
  std::map<std::string, double> inlier_ratio;
  std::size_t pruned = 0;
  bool prune_skipped = false;
  bool has_pose = false;
  PoseError error;
  PoseError prior_error;
  int iterations = 0;
};

}  // namespace

EvalSummary cmd_eval(const EvalOptions& opt) {
  const DatasetIndex idx = read_dataset_index(opt.dataset);
  require_dir(opt.matches, "matches");
  if (opt.output.empty()) throw Error(Errc::config, "eval: output path is required");
  const fs::path mp = opt.matches / "match_manifest.json";
  std::ifstream min(mp);
  if (!min) throw Error(Errc::io, "cannot read " + mp.string());
  std::vector<std::string> names;
  std::string method;
  try {
    const Json mj = Json::parse(min);
    method = mj.at("method").get<std::string>();
    for (const auto& p : mj.at("pairs")) names.push_back(p.at("pair").get<std::string>());
  } catch (const Json::exception& e) {
    throw Error(Errc::load, mp.string() + ": " + e.what());
  }
  if (opt.output.has_parent_path()) ensure_dir(opt.output.parent_path());

  std::vector<double> thresholds = {12.0};
  if (opt.threshold_px && *opt.threshold_px != 12.0) thresholds.push_back(*opt.threshold_px);

  std::vector<PairMetrics> results(names.size());
  parallel_for(names.size(), opt.jobs, [&](std::size_t i) {
    PairMetrics& r = results[i];
    r.name = names[i];
    try {
      const ScenePair p = read_pair(idx.pair_dir(opt.dataset, names[i]));
      r.small = is_small_variation(p);
      auto matches = read_matches_csv(opt.matches / (names[i] + ".csv"));
      r.matches = matches.size();
      if (opt.confident_only)
        matches.erase(std::remove_if(matches.begin(), matches.end(), [](const MatchResult& m) { return m.low_confidence; }),
                      matches.end());
      r.evaluated = matches.size();
      if (matches.empty()) {
        r.status = "empty";
        r.message = "no matches";
        return;
      }
      for (double t : thresholds)
        r.inlier_ratio[threshold_key(t)] = classify_inliers(matches, p.pose_ab, p.intrinsics, t).ratio;

      const BundlePrior truth = bundle_prior(p.pose_a, p.pose_b);
      BundlePrior prior = truth;
      // Gaussian prior corruption, one stream per pair.
      std::mt19937_64 eng(mix_seed(opt.seed, i));
      auto normal = [&]() {
        const double u1 = (static_cast<double>(eng() >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = static_cast<double>(eng() >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
      };
      prior.b.x += opt.prior_sigma_xy * normal();
      prior.b.y += opt.prior_sigma_xy * normal();
      prior.b.yaw = wrap_angle(prior.b.yaw + opt.prior_sigma_yaw * normal());
      r.prior_error = pose_error(prior.b, truth.b);

      std::vector<MatchResult> kept = matches;
      if (opt.prune) {
        const PruneResult pr = z_test_prune(matches, relative_pose(prior), p.intrinsics, opt.z_threshold);
        kept = pr.kept;
        r.pruned = pr.pruned;
        r.prune_skipped = pr.skipped;
      }
      const auto polar = to_polar_matches(kept, p.intrinsics);
      const BundleResult ba = two_view_bundle_adjust(polar, prior, p.intrinsics);
      r.error = pose_error(ba.pose, truth.b);
      r.iterations = ba.solve.iterations;
      r.has_pose = true;
    } catch (const Error& e) {
      r.status = e.code() == Errc::degenerate_geometry || e.code() == Errc::singular_system ? "solver_failed" : "failed";
      r.message = e.what();
    }
  });

  ordered_json per = Json::array();
  struct Group {
    std::map<std::string, std::vector<double>> inliers;
    std::vector<double> trans, rot, prior_trans, prior_rot, matches;
    std::size_t pairs = 0, failed = 0;
  };
  std::map<std::string, Group> groups;
  EvalSummary sum;
  sum.pairs = results.size();
  for (const auto& r : results) {
    ordered_json j;
    j["pair"] = r.name;
    j["group"] = r.small ? "small" : "large";
    j["status"] = r.status;
    if (!r.message.empty()) j["message"] = r.message;
    j["matches"] = r.matches;
    j["evaluated"] = r.evaluated;
    j["inlier_ratio"] = r.inlier_ratio;
    j["pruned"] = r.pruned;
    j["prune_skipped"] = r.prune_skipped;
    if (r.has_pose) {
      j["pose_error"] = {{"translation_m", r.error.translation}, {"rotation_rad", r.error.rotation}};
      j["prior_error"] = {{"translation_m", r.prior_error.translation}, {"rotation_rad", r.prior_error.rotation}};
      j["iterations"] = r.iterations;
    }
    per.push_back(j);
    if (r.status != "ok") ++sum.failed;
    for (const char* gname : {r.small ? "small" : "large", "all"}) {
      Group& g = groups[gname];
      ++g.pairs;
      if (r.status != "ok" && !r.has_pose) ++g.failed;
      g.matches.push_back(static_cast<double>(r.matches));
      for (const auto& [k, v] : r.inlier_ratio) g.inliers[k].push_back(v);
      if (r.has_pose) {
        g.trans.push_back(r.error.translation);
        g.rot.push_back(r.error.rotation);
        g.prior_trans.push_back(r.prior_error.translation);
        g.prior_rot.push_back(r.prior_error.rotation);
      }
    }
  }
  ordered_json agg;
  for (const char* gname : {"small", "large", "all"}) {
    const Group& g = groups[gname];
    ordered_json ir;
    for (double t : thresholds) {
      const auto it = g.inliers.find(threshold_key(t));
      ir[threshold_key(t)] = stats(it == g.inliers.end() ? std::vector<double>{} : it->second);
    }
    agg[gname] = {{"pairs", g.pairs},
                  {"failed", g.failed},
                  {"matches", stats(g.matches)},
                  {"inlier_ratio", ir},
                  {"translation_m", stats(g.trans)},
                  {"rotation_rad", stats(g.rot)},
                  {"prior_translation_m", stats(g.prior_trans)},
                  {"prior_rotation_rad", stats(g.prior_rot)}};
  }
  const Group& all = groups["all"];
  const auto it12 = all.inliers.find("12");
  sum.mean_inlier_ratio_12px = it12 == all.inliers.end() ? 0.0 : mean_of(it12->second);
  sum.mean_translation_error = mean_of(all.trans);
  sum.mean_rotation_error = mean_of(all.rot);

  ordered_json out;
  out["format_version"] = kManifestVersion;
  out["method"] = method;
  out["seed"] = opt.seed;
  out["dataset_seed"] = idx.seed;
  out["thresholds_px"] = thresholds;
  out["z_threshold"] = opt.z_threshold;
  out["prior_sigma_xy"] = opt.prior_sigma_xy;
  out["prior_sigma_yaw_rad"] = opt.prior_sigma_yaw;
  out["aggregate"] = agg;
  out["pairs"] = per;
  write_atomic(opt.output, out.dump(2) + "\n");
  spdlog::info("{}: inlier ratio @12px {:.4f}, pose error {:.4f} m / {:.5f} rad, {} failed", method,
               sum.mean_inlier_ratio_12px, sum.mean_translation_error, sum.mean_rotation_error, sum.failed);
  return sum;
}

// ---------------------------------------------------------------------------
// report

std::string cmd_report(const ReportOptions& opt) {
  if (opt.inputs.empty()) throw Error(Errc::config, "report: no metrics inputs given");
  const std::string tkey = threshold_key(opt.threshold_px.value_or(12.0));
  std::ostringstream os;
  os << "| method | group | pairs | inliers @" << tkey << "px mean (std) | translation m mean (std) | rotation deg mean (std) |\n";
  os << "|---|---|---|---|---|---|\n";
  char buf[512];
  for (const auto& [label, path] : opt.inputs) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::io, "cannot read " + path.string());
    Json j;
    try {
      j = Json::parse(in);
      for (const char* g : {"small", "large", "all"}) {
        const auto& a = j.at("aggregate").at(g);
        const auto& ir = a.at("inlier_ratio");
        double im = 0.0, is = 0.0;
        if (ir.contains(tkey)) {
          im = ir.at(tkey).at("mean").get<double>();
          is = ir.at(tkey).at("std").get<double>();
        }
        std::snprintf(buf, sizeof(buf), "| %s | %s | %zu | %.2f%% (%.2f) | %.3f (%.3f) | %.3f (%.3f) |\n", label.c_str(),
                      g, a.at("pairs").get<std::size_t>(), 100.0 * im, 100.0 * is,
                      a.at("translation_m").at("mean").get<double>(), a.at("translation_m").at("std").get<double>(),
                      rad2deg(a.at("rotation_rad").at("mean").get<double>()),
                      rad2deg(a.at("rotation_rad").at("std").get<double>()));
        os << buf;
      }
    } catch (const Json::exception& e) {
      throw Error(Errc::load, path.string() + ": " + e.what());
    }
  }
  const std::string table = os.str();
  if (opt.output) write_atomic(*opt.output, table);
  return table;
}

}  // namespace sonic::cli
