#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>

#include <sonic/error.hpp>

#include "sonic_cli/commands.hpp"

namespace {

void configure_logging() {
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("SONIC_KIT_LOG")) spdlog::set_level(spdlog::level::from_str(env));
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  using namespace sonic::cli;

  CLI::App app{"sonic-kit: synthetic sonar pairs, descriptor training, matching and pose evaluation"};
  app.require_subcommand(1);

  std::optional<fs::path> config;
  Overrides ov;
  std::string coam_flag;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "JSON config file");
    sub->add_option("--seed", ov.seed, "RNG seed");
    sub->add_option("--jobs", ov.jobs, "worker threads")->check(CLI::PositiveNumber);
  };

  auto* gen = app.add_subcommand("generate", "render a synthetic pair dataset");
  add_common(gen);
  std::string gen_out;
  gen->add_option("-o,--output", gen_out, "dataset directory");
  gen->add_option("--intrinsics", ov.intrinsics, "preset name or intrinsics JSON file");

  auto* tr = app.add_subcommand("train", "train the descriptor network");
  add_common(tr);
  std::string tr_dataset, tr_out, tr_resume;
  tr->add_option("-d,--dataset", tr_dataset, "dataset directory");
  tr->add_option("-o,--output", tr_out, "model directory");
  tr->add_option("--resume", tr_resume, "model directory to continue from");
  tr->add_option("--coam", coam_flag, "co-attention on|off")->check(CLI::IsMember({"on", "off"}));

  auto* ma = app.add_subcommand("match", "match keypoints on dataset pairs");
  add_common(ma);
  std::string ma_dataset, ma_model, ma_out, ma_method, ma_split;
  ma->add_option("-d,--dataset", ma_dataset, "dataset directory");
  ma->add_option("-m,--model", ma_model, "model directory (learned method)");
  ma->add_option("-o,--output", ma_out, "matches directory");
  ma->add_option("--method", ma_method, "learned|ncc|ground_truth")
      ->check(CLI::IsMember({"learned", "ncc", "ground_truth"}));
  ma->add_option("--split", ma_split, "train|test|all")->check(CLI::IsMember({"train", "test", "all"}));
  ma->add_option("--confidence", ov.confidence, "minimum weight for a confident match");
  ma->add_option("--coam", coam_flag, "expected co-attention setting on|off")->check(CLI::IsMember({"on", "off"}));

  auto* ev = app.add_subcommand("eval", "inlier ratios and pose errors for a match set");
  add_common(ev);
  std::string ev_dataset, ev_matches, ev_out;
  bool no_prune = false, confident_only = false;
  ev->add_option("-d,--dataset", ev_dataset, "dataset directory");
  ev->add_option("-m,--matches", ev_matches, "matches directory");
  ev->add_option("-o,--output", ev_out, "metrics JSON file");
  ev->add_option("--threshold-px", ov.threshold_px, "extra inlier threshold in pixels");
  ev->add_flag("--no-prune", no_prune, "skip z-test pruning");
  ev->add_flag("--confident-only", confident_only, "drop low-confidence matches");

  auto* rep = app.add_subcommand("report", "markdown table over metrics files");
  add_common(rep);
  std::vector<std::string> rep_inputs;
  std::string rep_out;
  rep->add_option("inputs", rep_inputs, "label=metrics.json ...");
  rep->add_option("-o,--output", rep_out, "markdown output file");
  rep->add_option("--threshold-px", ov.threshold_px, "inlier threshold column");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  if (!coam_flag.empty()) ov.coam = coam_flag == "on";

  try {
    if (*gen) {
      auto opt = load_generate_options(config, ov);
      if (!gen_out.empty()) opt.output = gen_out;
      const auto s = cmd_generate(opt);
      std::cout << "train " << s.train_pairs << " test " << s.test_pairs << " small " << s.small << " large "
                << s.large << "\n";
    } else if (*tr) {
      auto opt = load_train_options(config, ov);
      if (!tr_dataset.empty()) opt.dataset = tr_dataset;
      if (!tr_out.empty()) opt.output = tr_out;
      if (!tr_resume.empty()) opt.resume = fs::path(tr_resume);
      const auto s = cmd_train(opt);
      std::cout << "pairs " << s.pairs << " final loss " << (s.epoch_loss.empty() ? 0.0 : s.epoch_loss.back())
                << "\n";
    } else if (*ma) {
      auto opt = load_match_options(config, ov);
      if (!ma_dataset.empty()) opt.dataset = ma_dataset;
      if (!ma_model.empty()) opt.model = ma_model;
      if (!ma_out.empty()) opt.output = ma_out;
      if (!ma_split.empty()) opt.split = ma_split;
      if (ma_method == "learned") opt.method = MatchMethod::learned;
      if (ma_method == "ncc") opt.method = MatchMethod::ncc;
      if (ma_method == "ground_truth") opt.method = MatchMethod::ground_truth;
      const auto s = cmd_match(opt);
      std::cout << "pairs " << s.pairs << " matches " << s.matches << " confident " << s.high_confidence << "\n";
    } else if (*ev) {
      auto opt = load_eval_options(config, ov);
      if (!ev_dataset.empty()) opt.dataset = ev_dataset;
      if (!ev_matches.empty()) opt.matches = ev_matches;
      if (!ev_out.empty()) opt.output = ev_out;
      if (no_prune) opt.prune = false;
      if (confident_only) opt.confident_only = true;
      const auto s = cmd_eval(opt);
      std::cout << "pairs " << s.pairs << " failed " << s.failed << " inliers@12px " << s.mean_inlier_ratio_12px
                << " translation " << s.mean_translation_error << " rotation " << s.mean_rotation_error << "\n";
    } else if (*rep) {
      auto opt = load_report_options(config, ov);
      for (const auto& in : rep_inputs) {
        const auto eq = in.find('=');
        if (eq == std::string::npos)
          opt.inputs.emplace_back(fs::path(in).stem().string(), in);
        else
          opt.inputs.emplace_back(in.substr(0, eq), in.substr(eq + 1));
      }
      if (!rep_out.empty()) opt.output = fs::path(rep_out);
      std::cout << cmd_report(opt);
    }
  } catch (const sonic::Error& e) {
    spdlog::error("{} ({})", e.what(), sonic::to_string(e.code()));
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
