#include <benchmark/benchmark.h>

#include <sonic/descriptor.hpp>
#include <sonic/epipolar.hpp>
#include <sonic/evaluation.hpp>
#include <sonic/matching.hpp>
#include <sonic/simulator.hpp>
#include <sonic/training.hpp>

namespace {

using namespace sonic;

const GeneratedDataset& desk_pairs() {
  static const GeneratedDataset ds = [] {
    DatasetSpec spec;
    spec.intrinsics = intrinsics_preset("m1200d-lf-64");
    spec.pairs = 4;
    spec.held_out = 0;
    spec.pairs_per_scene = 2;
    spec.seed = 21;
    return generate_dataset(spec);
  }();
  return ds;
}

void BM_Encode(benchmark::State& state) {
  EncoderConfig ec = EncoderConfig::desk();
  const auto w = ModelWeights::initialize(ec);
  const auto& p = desk_pairs().pairs[0];
  for (auto _ : state) benchmark::DoNotOptimize(encode(p.image_a, w));
}
BENCHMARK(BM_Encode)->Unit(benchmark::kMillisecond);

void BM_EncodePairCoAttention(benchmark::State& state) {
  EncoderConfig ec = EncoderConfig::desk();
  ec.co_attention = true;
  const auto w = ModelWeights::initialize(ec);
  const auto& p = desk_pairs().pairs[0];
  for (auto _ : state) benchmark::DoNotOptimize(encode_pair(p.image_a, p.image_b, w));
}
BENCHMARK(BM_EncodePairCoAttention)->Unit(benchmark::kMillisecond);

void BM_PairObjective(benchmark::State& state) {
  const auto w = ModelWeights::initialize(EncoderConfig::desk());
  const auto& p = desk_pairs().pairs[0];
  TrainConfig cfg;
  const auto k = training_keypoints(p.image_a, cfg);
  const bool grad = state.range(0) != 0;
  for (auto _ : state) benchmark::DoNotOptimize(pair_objective(p, k, w, cfg, grad));
}
BENCHMARK(BM_PairObjective)->Arg(0)->Arg(1)->ArgNames({"gradient"})->Unit(benchmark::kMillisecond);

void BM_MatchKeypoints(benchmark::State& state) {
  const auto w = ModelWeights::initialize(EncoderConfig::desk());
  const auto& p = desk_pairs().pairs[0];
  TrainConfig cfg;
  const auto k = training_keypoints(p.image_a, cfg);
  const auto a = to_level_maps(encode(p.image_a, w));
  const auto b = to_level_maps(encode(p.image_b, w));
  for (auto _ : state) benchmark::DoNotOptimize(match_keypoints(k, a, b, cfg.match_config()));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(k.size()));
}
BENCHMARK(BM_MatchKeypoints)->Unit(benchmark::kMicrosecond);

void BM_EpipolarContour(benchmark::State& state) {
  const auto intr = intrinsics_preset("m1200d-lf");
  const auto& p = desk_pairs().pairs[0];
  const auto n = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(epipolar_contour(5.0, 0.2, p.pose_ab, intr, n));
}
BENCHMARK(BM_EpipolarContour)->Arg(16)->Arg(64)->Arg(256);

void BM_Render(benchmark::State& state) {
  const auto intr = intrinsics_preset(state.range(0) == 64 ? "m1200d-lf-64" : "m1200d-lf");
  SensorPose pose;
  pose.position.z() = 1.0;
  pose.pitch = deg2rad(10.0);
  const auto scene = random_scene({}, pose, intr, 5);
  NoiseConfig noise;
  noise.speckle_strength = 0.2;
  noise.additive_sigma = 0.02;
  noise.seed = 9;
  for (auto _ : state) benchmark::DoNotOptimize(render(scene, pose, intr, noise));
}
BENCHMARK(BM_Render)->Arg(64)->Arg(512)->Unit(benchmark::kMillisecond);

void BM_BundleAdjust(benchmark::State& state) {
  const auto& p = desk_pairs().pairs[0];
  std::vector<PolarMatch> matches;
  for (const auto& l : p.landmarks)
    if (l.covisible()) matches.push_back({l.a, l.b});
  const auto truth = bundle_prior(p.pose_a, p.pose_b);
  auto prior = truth;
  prior.b.x += 0.3;
  prior.b.y -= 0.3;
  prior.b.yaw += deg2rad(5.0);
  for (auto _ : state) benchmark::DoNotOptimize(two_view_bundle_adjust(matches, prior, p.intrinsics));
  state.counters["matches"] = static_cast<double>(matches.size());
}
BENCHMARK(BM_BundleAdjust)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
