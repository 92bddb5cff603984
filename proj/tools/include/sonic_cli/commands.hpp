#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <sonic/descriptor.hpp>
#include <sonic/simulator.hpp>
#include <sonic/training.hpp>

namespace sonic::cli {

namespace fs = std::filesystem;

/// Flags shared by every subcommand; set values override the config file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::optional<std::string> intrinsics;
  std::optional<double> threshold_px;
  std::optional<double> confidence;
  std::optional<bool> coam;
};

struct GenerateOptions {
  fs::path output;
  std::string intrinsics = "m1200d-lf-64";
  DatasetSpec spec;
  int jobs = 1;
};

struct TrainOptions {
  fs::path dataset;
  fs::path output;
  TrainConfig train;
  bool coam = false;
  /// Model directory whose weights initialize training.
  std::optional<fs::path> resume;
  std::string split = "train";
};

enum class MatchMethod { learned, ncc, ground_truth };

struct MatchOptions {
  fs::path dataset;
  fs::path model;  // training output directory; unused by ncc and ground_truth
  fs::path output;
  MatchMethod method = MatchMethod::learned;
  std::string split = "test";
  double confidence = 0.5;
  /// Must agree with the model when given.
  std::optional<bool> coam;
  /// Settings used by the non-learned methods.
  TrainConfig detector;
  std::uint64_t seed = 0;
  int jobs = 1;
};

struct EvalOptions {
  fs::path dataset;
  fs::path matches;
  fs::path output;  // metrics JSON file
  /// 12 px is always reported; this adds one more threshold.
  std::optional<double> threshold_px;
  double z_threshold = 2.0;
  double prior_sigma_xy = 0.3;
  double prior_sigma_yaw = deg2rad(5.0);
  bool prune = true;
  bool confident_only = false;
  std::uint64_t seed = 0;
  int jobs = 1;
};

struct ReportOptions {
  std::vector<std::pair<std::string, fs::path>> inputs;  // label, metrics JSON
  std::optional<fs::path> output;
  std::optional<double> threshold_px;
};

// Each loader starts from defaults, applies the JSON config file when given
// (unknown keys are rejected), then the flag overrides.
GenerateOptions load_generate_options(const std::optional<fs::path>& config, const Overrides& o);
TrainOptions load_train_options(const std::optional<fs::path>& config, const Overrides& o);
MatchOptions load_match_options(const std::optional<fs::path>& config, const Overrides& o);
EvalOptions load_eval_options(const std::optional<fs::path>& config, const Overrides& o);
ReportOptions load_report_options(const std::optional<fs::path>& config, const Overrides& o);

struct GenerateSummary {
  std::size_t train_pairs = 0;
  std::size_t test_pairs = 0;
  std::size_t small = 0;
  std::size_t large = 0;
};
GenerateSummary cmd_generate(const GenerateOptions& opt);

struct TrainSummary {
  std::vector<double> epoch_loss;
  std::size_t pairs = 0;
};
TrainSummary cmd_train(const TrainOptions& opt);

struct MatchSummary {
  std::size_t pairs = 0;
  std::size_t matches = 0;
  std::size_t high_confidence = 0;
};
MatchSummary cmd_match(const MatchOptions& opt);

struct EvalSummary {
  std::size_t pairs = 0;
  std::size_t failed = 0;
  double mean_inlier_ratio_12px = 0.0;
  double mean_translation_error = 0.0;
  double mean_rotation_error = 0.0;
};
EvalSummary cmd_eval(const EvalOptions& opt);

/// Markdown table of (mean, std) per method and variation group.
std::string cmd_report(const ReportOptions& opt);

// Dataset and model directories.

struct DatasetIndex {
  std::vector<std::string> train;
  std::vector<std::string> test;
  SonarIntrinsics intrinsics;
  std::uint64_t seed = 0;

  std::vector<std::string> select(const std::string& split) const;
  fs::path pair_dir(const fs::path& root, const std::string& name) const { return root / "pairs" / name; }
};
DatasetIndex read_dataset_index(const fs::path& dataset);

struct Model {
  ModelWeights weights;
  TrainConfig settings;  // inference settings recorded at training time
};
void write_model(const fs::path& dir, const ModelWeights& weights, const TrainConfig& settings);
Model read_model(const fs::path& dir);

}  // namespace sonic::cli
