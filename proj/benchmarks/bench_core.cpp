#include <benchmark/benchmark.h>

#include <map>

#include "headsplat/adam.hpp"
#include "headsplat/harness.hpp"
#include "headsplat/losses.hpp"

namespace hs = headsplat;

namespace {

struct Scene {
  hs::HeadTemplate tmpl;
  hs::CanonicalAvatar avatar;
};

// One subject per Gaussian count, built on first use.
const Scene& scene(std::size_t gaussians) {
  static std::map<std::size_t, Scene> cache;
  auto it = cache.find(gaussians);
  if (it == cache.end()) {
    Scene s;
    s.tmpl = hs::generate_synthetic_template(0, 2000, 8, 10, 4);
    hs::SyntheticSubjectOptions o;
    o.gaussians = gaussians;
    s.avatar = hs::synthetic_subject(s.tmpl, 1, o);
    it = cache.emplace(gaussians, std::move(s)).first;
  }
  return it->second;
}

hs::FlameParams posed(const hs::HeadTemplate& tmpl) { return hs::smooth_trajectory(tmpl, 1, 7).front(); }

void BM_PoseAvatar(benchmark::State& state) {
  const auto& s = scene(static_cast<std::size_t>(state.range(0)));
  const hs::Rig rig(s.tmpl, s.avatar);
  const auto p = posed(s.tmpl);
  for (auto _ : state) benchmark::DoNotOptimize(rig.pose(s.avatar, p));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_PoseAvatar)->Arg(20000)->Arg(80000)->Unit(benchmark::kMillisecond);

void BM_PoseJacobian(benchmark::State& state) {
  const auto& s = scene(static_cast<std::size_t>(state.range(0)));
  const hs::Rig rig(s.tmpl, s.avatar);
  const auto p = posed(s.tmpl);
  for (auto _ : state) benchmark::DoNotOptimize(rig.jacobian(s.avatar, p));
}
BENCHMARK(BM_PoseJacobian)->Arg(20000)->Unit(benchmark::kMillisecond);

void BM_Render(benchmark::State& state) {
  const auto& s = scene(static_cast<std::size_t>(state.range(0)));
  const auto g = hs::pose_avatar(s.avatar, s.tmpl, posed(s.tmpl));
  const int side = static_cast<int>(state.range(1));
  const auto cam = hs::Camera::normalized(side, side);
  for (auto _ : state) benchmark::DoNotOptimize(hs::render(g, cam));
}
BENCHMARK(BM_Render)->Args({20000, 128})->Args({20000, 504})->Args({80000, 504})->Unit(benchmark::kMillisecond);

void BM_RenderBackward(benchmark::State& state) {
  const auto& s = scene(static_cast<std::size_t>(state.range(0)));
  const auto g = hs::pose_avatar(s.avatar, s.tmpl, posed(s.tmpl));
  const int side = static_cast<int>(state.range(1));
  const auto frame = hs::render(g, hs::Camera::normalized(side, side));
  const hs::Image upstream(side, side, 3, 1e-3);
  for (auto _ : state) benchmark::DoNotOptimize(hs::render_backward(frame, upstream));
}
BENCHMARK(BM_RenderBackward)->Args({20000, 128})->Unit(benchmark::kMillisecond);

void BM_Ssim(benchmark::State& state) {
  const int side = static_cast<int>(state.range(0));
  hs::Image a(side, side, 3), b(side, side, 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a.data[i] = 0.5 + 0.4 * std::sin(0.37 * static_cast<double>(i));
    b.data[i] = 0.5 + 0.4 * std::sin(0.37 * static_cast<double>(i) + 0.1);
  }
  for (auto _ : state) benchmark::DoNotOptimize(hs::ssim(a, b));
}
BENCHMARK(BM_Ssim)->Arg(128)->Arg(504)->Unit(benchmark::kMillisecond);

void BM_AdamStep(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<double> values(n, 0.0), grads(n, 1e-3);
  hs::AdamState adam;
  const hs::ParamBlock block{"values", values, grads, 1.0};
  for (auto _ : state) hs::adam_step(std::span(&block, 1), adam);
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_AdamStep)->Arg(14 * 20000);

}  // namespace

BENCHMARK_MAIN();
