// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any fails.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <thread>
#include <unistd.h>

#include "CLI11.hpp"
#include "headsplat/harness.hpp"
#include "headsplat/random.hpp"
#include "headsplat/so3.hpp"
#include "test_scenes.hpp"
#include "test_subjects.hpp"

namespace hs = headsplat;
namespace fs = std::filesystem;
using hs::testing::relative_error;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
  json metrics = json::object();
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------
// Gradient suite

double image_energy(const hs::RenderedFrame& f) {
  double e = 0.0;
  for (double v : f.rgb.data) e += v * v;
  for (double v : f.alpha.data) e += v * v;
  return e;
}

// Worst norm-relative error per attribute group of render_backward against
// central differences of sum(rgb^2) + sum(alpha^2).
std::array<double, 5> rasterizer_errors(const hs::PosedGaussians& g, const hs::Camera& cam) {
  const auto f = hs::render(g, cam);
  hs::Image up_rgb = f.rgb, up_alpha = f.alpha;
  for (double& v : up_rgb.data) v *= 2.0;
  for (double& v : up_alpha.data) v *= 2.0;
  const auto grads = hs::render_backward(f, up_rgb, &up_alpha);
  auto energy = [&](const std::function<void(hs::PosedGaussians&)>& mutate) {
    hs::PosedGaussians p = g;
    mutate(p);
    return image_energy(hs::render(p, cam));
  };
  const double h = 1e-6;
  std::array<std::vector<double>, 5> an, num;
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      const double hc = 1e-8;
      an[0].push_back(grads.centers[i][k]);
      num[0].push_back((energy([&](auto& p) { p.centers[i][k] += hc; }) -
                        energy([&](auto& p) { p.centers[i][k] -= hc; })) / (2 * hc));
      an[1].push_back(grads.log_scales[i][k]);
      num[1].push_back((energy([&](auto& p) { p.log_scales[i][k] += h; }) -
                        energy([&](auto& p) { p.log_scales[i][k] -= h; })) / (2 * h));
      auto turn = [&](double s) {
        return [&, s](hs::PosedGaussians& p) {
          Eigen::Vector3d w = Eigen::Vector3d::Zero();
          w[k] = s;
          p.rotations[i] = hs::so3::quat_multiply(p.rotations[i], hs::so3::quat_exp(w));
        };
      };
      an[2].push_back(grads.rotation_tangents[i][k]);
      num[2].push_back((energy(turn(h)) - energy(turn(-h))) / (2 * h));
      an[4].push_back(grads.colors[i][k]);
      num[4].push_back((energy([&](auto& p) { p.colors[i][k] += h; }) -
                        energy([&](auto& p) { p.colors[i][k] -= h; })) / (2 * h));
    }
    an[3].push_back(grads.opacity_logits[i]);
    num[3].push_back((energy([&](auto& p) { p.opacity_logits[i] += h; }) -
                      energy([&](auto& p) { p.opacity_logits[i] -= h; })) / (2 * h));
  }
  std::array<double, 5> out{};
  for (int a = 0; a < 5; ++a) out[a] = relative_error(an[a], num[a]);
  return out;
}

// Worst per-column error of the pose Jacobian, split into psi, theta, pi.
std::array<double, 3> jacobian_errors(const hs::CanonicalAvatar& av, const hs::HeadTemplate& t,
                                      const hs::FlameParams& p) {
  const hs::Rig rig(t, av);
  const auto jac = rig.jacobian(av, p);
  const auto packed = p.pack();
  const int k_expr = t.num_expression();
  const int k_art = 3 * (t.num_bones() - 1);
  std::array<double, 3> worst{};
  const double h = 1e-5;
  for (int q = 0; q < static_cast<int>(packed.size()); ++q) {
    auto plus = packed, minus = packed;
    plus[q] += h;
    minus[q] -= h;
    const auto cp = rig.pose(av, hs::FlameParams::unpack(plus, k_expr, t.num_bones())).centers;
    const auto cm = rig.pose(av, hs::FlameParams::unpack(minus, k_expr, t.num_bones())).centers;
    std::vector<double> an, num;
    for (std::size_t m = 0; m < av.size(); ++m) {
      for (int c = 0; c < 3; ++c) {
        an.push_back(jac(m, c, q));
        num.push_back((cp[m][c] - cm[m][c]) / (2 * h));
      }
    }
    const int group = q < k_expr ? 0 : (q < k_expr + k_art ? 1 : 2);
    worst[group] = std::max(worst[group], relative_error(an, num));
  }
  return worst;
}

hs::Image random_image(hs::Rng& rng, int w, int h) {
  hs::Image img(w, h, 3);
  for (double& v : img.data) v = rng.uniform(0.0, 1.0);
  return img;
}

std::array<double, 2> image_loss_errors(hs::Rng& rng) {
  const auto a = random_image(rng, 14, 13), b = random_image(rng, 14, 13);
  const auto l1 = hs::l1_loss(a, b);
  const auto s = hs::ssim(a, b);
  std::vector<double> an_l1, num_l1, an_s, num_s;
  for (std::size_t i = 0; i < a.size(); ++i) {
    hs::Image p = a, m = a;
    if (std::abs(a.data[i] - b.data[i]) > 1e-3) {  // L1 has a kink at ties
      p.data[i] += 1e-6;
      m.data[i] -= 1e-6;
      an_l1.push_back(l1.grad.data[i]);
      num_l1.push_back((hs::l1_loss(p, b).value - hs::l1_loss(m, b).value) / 2e-6);
    }
    p = a;
    m = a;
    p.data[i] += 1e-5;
    m.data[i] -= 1e-5;
    an_s.push_back(s.grad.data[i]);
    num_s.push_back((hs::ssim(p, b).value - hs::ssim(m, b).value) / 2e-5);
  }
  return {relative_error(an_l1, num_l1), relative_error(an_s, num_s)};
}

hs::CanonicalAvatar jittered_avatar(const hs::HeadTemplate& t, std::size_t m, std::uint64_t seed) {
  hs::Rng rng(seed);
  auto av = hs::init_avatar(hs::upsample_anchors(t, m, seed));
  for (std::size_t i = 0; i < av.size(); ++i) {
    av.offsets[i] = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * 0.003;
  }
  return av;
}

hs::FlameParams random_params(hs::Rng& rng, const hs::HeadTemplate& t) {
  auto p = hs::viewing_params(t);
  for (double& e : p.expression) e = rng.normal(0.0, 0.7);
  for (auto& a : p.articulation) a = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * 0.3;
  p.head_rotation = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * 0.3;
  p.head_translation += Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * 0.05;
  return p;
}

Outcome gradient_suite() {
  constexpr int kScenes = 100;
  constexpr double kTol = 1e-3;
  const auto t0 = Clock::now();
  hs::SyntheticTemplateOptions corr;
  corr.corrective_amplitude = 0.01;
  const std::array<hs::HeadTemplate, 2> templates = {hs::generate_synthetic_template(3, 300, 3, 5, 4),
                                                     hs::generate_synthetic_template(4, 300, 3, 5, 5, corr)};
  const char* names[] = {"centers", "log_scales", "rotations", "opacity", "colors", "psi", "theta", "pi", "l1", "ssim"};
  std::array<double, 10> worst{};
  hs::Rng rng(2024);
  const auto cam = hs::Camera::normalized(16, 16);
  for (int scene = 0; scene < kScenes; ++scene) {
    const auto n = static_cast<std::size_t>(3 + rng.index(6));
    const auto g = hs::testing::random_scene(rng, n, cam, 0.8, 1.4, 1.0, 4.0);
    const auto r = rasterizer_errors(g, cam);
    for (int a = 0; a < 5; ++a) worst[a] = std::max(worst[a], r[a]);
    const auto& t = templates[scene % 2];
    const auto av = jittered_avatar(t, 350, static_cast<std::uint64_t>(scene));
    const auto j = jacobian_errors(av, t, scene % 10 == 0 ? hs::FlameParams::rest(t) : random_params(rng, t));
    for (int a = 0; a < 3; ++a) worst[5 + a] = std::max(worst[5 + a], j[a]);
    const auto l = image_loss_errors(rng);
    worst[8] = std::max(worst[8], l[0]);
    worst[9] = std::max(worst[9], l[1]);
  }
  const double elapsed = seconds_since(t0);
  Outcome o;
  o.pass = elapsed < 120.0;
  std::string detail = std::to_string(kScenes) + " scenes, worst relative error:";
  for (int a = 0; a < 10; ++a) {
    o.pass = o.pass && worst[a] < kTol;
    detail += std::string(" ") + names[a] + " " + fmt("%.1e", worst[a]);
    o.metrics["worst_relative_error"][names[a]] = worst[a];
  }
  o.detail = detail + " (tol 1e-3); " + fmt("%.1f", elapsed) + " s (limit 120 s)";
  o.metrics["scenes"] = kScenes;
  o.metrics["seconds"] = elapsed;
  return o;
}

// ---------------------------------------------------------------------------
// Renderer oracle

double oracle_diff(const hs::PosedGaussians& g, const hs::Camera& cam, const hs::RenderedFrame& f) {
  const auto oracle = hs::brute_force_render(g, cam);
  double worst = 0.0;
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      for (int c = 0; c < 3; ++c) worst = std::max(worst, std::abs(oracle.at(x, y, c) - f.rgb.at(x, y, c)));
      worst = std::max(worst, std::abs(oracle.at(x, y, 3) - f.alpha.at(x, y, 0)));
    }
  }
  return worst;
}

Outcome renderer_oracle() {
  hs::Rng rng(77);
  const auto cam = hs::Camera::normalized(64, 64);
  hs::RasterConfig one, eight;
  one.threads = 1;
  eight.threads = 8;
  double worst = 0.0;
  bool threads_equal = true;
  for (int scene = 0; scene < 50; ++scene) {
    const auto g = hs::testing::random_scene(rng, 1 + rng.index(200), cam);
    const auto a = hs::render(g, cam, one);
    const auto b = hs::render(g, cam, eight);
    threads_equal = threads_equal && a.rgb.data == b.rgb.data && a.alpha.data == b.alpha.data;
    worst = std::max(worst, oracle_diff(g, cam, a));
  }
  // Info only: opaque stacks where the transmittance cutoff fires, which the
  // oracle does not apply.
  double dense = 0.0;
  for (int scene = 0; scene < 10; ++scene) {
    const auto g = hs::testing::random_scene(rng, 200, cam, 0.6, 2.0, 4.0, 10.0);
    dense = std::max(dense, oracle_diff(g, cam, hs::render(g, cam, one)));
  }
  Outcome o;
  o.pass = worst <= 1e-5 && threads_equal;
  o.detail = "50 scenes at 64x64 (1-200 Gaussians, 1-5 px): max |tiled - brute force| " + fmt("%.2e", worst) +
             " (tol 1e-5); 1 vs 8 threads " + (threads_equal ? "identical" : "DIFFERENT") +
             "; info, opaque 200-Gaussian stacks past the 1e-4 transmittance cutoff: " + fmt("%.2e", dense);
  o.metrics = {{"max_abs_diff", worst}, {"threads_identical", threads_equal}, {"opaque_stack_max_abs_diff", dense}};
  return o;
}

// ---------------------------------------------------------------------------
// LBS invariants

Outcome lbs_invariants() {
  hs::Rng rng(5);
  double rigid = 0.0, neutral = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    hs::SyntheticTemplateOptions opts;
    opts.corrective_amplitude = trial % 2 ? 0.01 : 0.0;
    const int bones = 2 + trial % 5;
    const auto t = hs::generate_synthetic_template(100 + trial, 200 + 90 * trial, 4, 6, bones, opts);
    const hs::RigidTransform T{hs::so3::exp(Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * 0.8),
                               Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal())};
    const std::vector<hs::RigidTransform> same(t.num_bones(), T);
    const auto shaped = hs::shape_vertices(t, std::vector<double>(t.num_identity(), 0.3),
                                           std::vector<double>(t.num_expression(), 0.2));
    const auto out = hs::lbs_deform(shaped, t.skinning_weights, same);
    for (std::size_t v = 0; v < shaped.size(); ++v) rigid = std::max(rigid, (out[v] - T.apply(shaped[v])).norm());

    // Through the full pose path: theta = psi = 0 with a rigid head pose.
    const auto av = jittered_avatar(t, t.vertices.size() + 300, 11 + trial);
    auto p = hs::FlameParams::rest(t);
    p.head_rotation = hs::so3::log(T.rotation);
    p.head_translation = T.translation;
    const auto posed = hs::pose_avatar(av, t, p);
    for (std::size_t m = 0; m < av.size(); ++m) rigid = std::max(rigid, (posed.centers[m] - T.apply(av.center(m))).norm());

    const auto rest = hs::FlameParams::rest(t);
    const auto zero_shape = hs::shape_vertices(t, std::vector<double>(t.num_identity(), 0.0),
                                               std::vector<double>(t.num_expression(), 0.0));
    const auto rest_out = hs::lbs_deform(zero_shape, t.skinning_weights, hs::bone_transforms(t, rest));
    for (std::size_t v = 0; v < rest_out.size(); ++v) neutral = std::max(neutral, (rest_out[v] - t.vertices[v]).norm());
    const auto rest_posed = hs::pose_avatar(av, t, rest);
    for (std::size_t m = 0; m < av.size(); ++m) {
      neutral = std::max(neutral, (rest_posed.centers[m] - av.center(m)).norm());
    }
  }
  Outcome o;
  o.pass = rigid < 1e-7 && neutral < 1e-6;
  o.detail = "10 templates (2-6 bones): rigid invariance max err " + fmt("%.1e", rigid) +
             " (tol 1e-7), rest-pose neutrality max err " + fmt("%.1e", neutral) + " (tol 1e-6)";
  o.metrics = {{"rigid_max_err", rigid}, {"neutral_max_err", neutral}};
  return o;
}

// ---------------------------------------------------------------------------
// Parameter round trip

hs::FlameParams perturbed(const hs::FlameParams& gt, hs::Rng& rng, double expr_norm, double rot_deg) {
  hs::FlameParams p = gt;
  Eigen::VectorXd d(static_cast<Eigen::Index>(gt.expression.size()));
  for (Eigen::Index k = 0; k < d.size(); ++k) d[k] = rng.normal();
  d *= expr_norm / d.norm();
  for (Eigen::Index k = 0; k < d.size(); ++k) p.expression[k] += d[k];
  Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
  axis.normalize();
  p.head_rotation = hs::so3::log(hs::so3::exp(axis * rot_deg * M_PI / 180.0) * hs::so3::exp(gt.head_rotation));
  return p;
}

Outcome flame_round_trip() {
  const auto t0 = Clock::now();
  const auto tmpl = hs::generate_synthetic_template(31, 1000, 8, 10, 4);
  hs::SyntheticSubjectOptions so;
  so.gaussians = 3000;
  const auto avatar = hs::synthetic_subject(tmpl, 5, so);
  const hs::Rig rig(tmpl, avatar);
  const auto cam = hs::Camera::normalized(64, 64);
  int ok = 0;
  double worst_expr = 0.0, worst_art = 0.0, worst_pose = 0.0;
  json per_seed = json::array();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    hs::Rng rng(1000 + seed);
    auto gt = hs::viewing_params(tmpl);
    for (double& e : gt.expression) e = rng.normal(0.0, 0.5);
    for (auto& a : gt.articulation) a = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * 0.1;
    gt.head_rotation = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * 0.15;
    const auto img = hs::render(rig.pose(avatar, gt), cam).rgb;
    hs::FitFlameOptions fo;
    fo.ground_truth = gt;
    const auto fit = hs::fit_flame(rig, avatar, img, cam, perturbed(gt, rng, 0.1, 5.0), fo);
    const auto& r = *fit.report.rmse;
    const bool pass = r.expression < 0.02 && r.articulation < 0.02 && r.head_pose_rad < 0.05;
    ok += pass;
    worst_expr = std::max(worst_expr, r.expression);
    worst_art = std::max(worst_art, r.articulation);
    worst_pose = std::max(worst_pose, r.head_pose_rad);
    per_seed.push_back({{"seed", seed},
                        {"expression", r.expression},
                        {"articulation", r.articulation},
                        {"head_pose_rad", r.head_pose_rad},
                        {"pass", pass}});
  }
  const double elapsed = seconds_since(t0);
  Outcome o;
  o.pass = ok >= 18 && elapsed < 300.0;
  o.detail = std::to_string(ok) + "/20 seeds within expr < 0.02, art < 0.02 rad, pose < 0.05 rad (need 18); worst " +
             fmt("%.4f", worst_expr) + " / " + fmt("%.4f", worst_art) + " / " + fmt("%.4f", worst_pose) + "; " +
             fmt("%.1f", elapsed) + " s (limit 300 s)";
  o.metrics = {{"passing_seeds", ok}, {"seeds", per_seed}, {"seconds", elapsed}};
  return o;
}

// ---------------------------------------------------------------------------
// Personalization dynamics

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("headsplat_accept_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Outcome personalization_dynamics() {
  const auto t0 = Clock::now();
  const auto dir = scratch_dir("personalize");
  const auto tmpl = hs::generate_synthetic_template(21, 2000, 8, 10, 4);
  hs::SyntheticSubjectOptions so;
  so.gaussians = 20000;
  const auto dataset = hs::make_synthetic_subject(tmpl, 3, 12, hs::Camera::normalized(128, 128), dir, so);
  hs::EvalOptions eo;
  eo.conditioning = 4;
  eo.seed = 3;
  const auto split = hs::few_to_many_split(dataset.size(), 4, dataset.size() - 4, eo.seed);
  const auto base = hs::init_avatar(hs::upsample_anchors(tmpl, 20000, 17));
  const auto frames = hs::training_frames(dataset, base, tmpl, split.conditioning);

  const auto fitted = hs::fitted_initialization(base, tmpl, frames);
  const auto random = hs::random_initialization(base, 17);
  hs::PersonalizeOptions po;
  po.steps = 500;
  const auto fitted_run = hs::personalize(fitted, tmpl, frames, po);
  const auto random_run = hs::personalize(random, tmpl, frames, po);

  const double psnr_gray = hs::evaluate(dataset, base, tmpl, eo).mean_psnr;
  const double psnr_init = hs::evaluate(dataset, fitted, tmpl, eo).mean_psnr;
  const double psnr_fitted = hs::evaluate(dataset, hs::apply_residuals(fitted, fitted_run.residuals), tmpl, eo).mean_psnr;
  const double psnr_random = hs::evaluate(dataset, hs::apply_residuals(random, random_run.residuals), tmpl, eo).mean_psnr;
  fs::remove_all(dir);
  const double elapsed = seconds_since(t0);
  const double gain = psnr_fitted - psnr_init;
  Outcome o;
  o.pass = gain >= 3.0 && psnr_fitted > psnr_random && elapsed < 600.0;
  o.detail = "128x128, M=20000, 4 conditioning / 8 held-out, 500 steps: held-out PSNR " + fmt("%.2f", psnr_init) +
             " -> " + fmt("%.2f", psnr_fitted) + " dB (+" + fmt("%.2f", gain) + ", need 3); random-init run " +
             fmt("%.2f", psnr_random) + " dB (fitted must be higher); gray " + fmt("%.2f", psnr_gray) + " dB; " +
             fmt("%.1f", elapsed) + " s (limit 600 s)";
  o.metrics = {{"psnr_gray", psnr_gray},       {"psnr_unpersonalized", psnr_init}, {"psnr_personalized", psnr_fitted},
               {"psnr_random_init", psnr_random}, {"gain_db", gain},                {"seconds", elapsed}};
  return o;
}

// ---------------------------------------------------------------------------
// Few-to-many sampler

Outcome sampler_properties() {
  hs::Rng rng(99);
  int valid = 0, invalid = 0, bad = 0;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t n = rng.index(61);
    const std::size_t s = rng.index(41);
    const std::size_t r = rng.index(61);
    const std::uint64_t seed = rng.engine()();
    const bool ok_input = s >= 1 && r >= s && s + r <= n;
    try {
      const auto split = hs::few_to_many_split(n, s, r, seed);
      if (!ok_input) {
        ++bad;
        continue;
      }
      ++valid;
      std::set<std::size_t> all(split.conditioning.begin(), split.conditioning.end());
      all.insert(split.reconstruction.begin(), split.reconstruction.end());
      const bool sizes = split.conditioning.size() == s && split.reconstruction.size() == r;
      const bool disjoint = all.size() == s + r;
      const bool in_range = all.empty() || *all.rbegin() < n;
      const auto again = hs::few_to_many_split(n, s, r, seed);
      const bool repeatable = again.conditioning == split.conditioning && again.reconstruction == split.reconstruction;
      if (!(sizes && disjoint && in_range && repeatable && split.reconstruction.size() >= split.conditioning.size())) ++bad;
    } catch (const std::invalid_argument&) {
      if (ok_input) ++bad;
      else ++invalid;
    }
  }
  Outcome o;
  o.pass = bad == 0 && valid > 1000 && invalid > 1000;
  o.detail = "10000 random inputs (" + std::to_string(valid) + " valid, " + std::to_string(invalid) +
             " rejected): " + std::to_string(bad) + " violations of disjointness, sizes, R >= S or rejection";
  o.metrics = {{"valid", valid}, {"invalid", invalid}, {"violations", bad}};
  return o;
}

// ---------------------------------------------------------------------------
// Fixed point

Outcome fixed_point() {
  const auto s = hs::testing::make_subject(3000);
  const auto cam = hs::Camera::normalized(64, 64);
  const hs::Rig rig(s.tmpl, s.avatar);
  std::vector<hs::TrainingFrame> exact, quantized;
  for (const auto& p : hs::smooth_trajectory(s.tmpl, 4, 9)) {
    const auto r = hs::render(rig.pose(s.avatar, p), cam);
    exact.push_back({r.rgb, p, cam});
    quantized.push_back({hs::testing::quantized(r), p, cam});
  }
  hs::PersonalizeOptions po;
  po.steps = 500;
  const auto e = hs::personalize(s.avatar, s.tmpl, exact, po);
  const auto q = hs::personalize(s.avatar, s.tmpl, quantized, po);
  Outcome o;
  o.pass = e.report.final_loss <= e.report.initial_loss && e.residuals.max_abs() < 1e-2;
  o.detail = "own float renders, 500 steps: loss " + fmt("%.3g", e.report.initial_loss) + " -> " +
             fmt("%.3g", e.report.final_loss) + ", |residual|_inf " + fmt("%.3g", e.residuals.max_abs()) +
             " (tol 1e-2); info, 8-bit renders: loss " + fmt("%.3g", q.report.initial_loss) + " -> " +
             fmt("%.3g", q.report.final_loss) + ", |residual|_inf " + fmt("%.3g", q.residuals.max_abs());
  o.metrics = {{"initial_loss", e.report.initial_loss},
               {"final_loss", e.report.final_loss},
               {"max_abs_residual", e.residuals.max_abs()},
               {"quantized_initial_loss", q.report.initial_loss},
               {"quantized_final_loss", q.report.final_loss},
               {"quantized_max_abs_residual", q.residuals.max_abs()}};
  return o;
}

// ---------------------------------------------------------------------------
// Benchmark report

Outcome benchmark_report() {
  const auto tmpl = hs::generate_synthetic_template(0, 2000, 8, 10, 4);
  hs::SyntheticSubjectOptions so;
  so.gaussians = 80000;
  const auto avatar = hs::synthetic_subject(tmpl, 1, so);
  const auto r = hs::bench_animate(avatar, tmpl, hs::Camera::normalized(504, 504), 20);
  const unsigned cores = std::max(1u, std::thread::hardware_concurrency());
  Outcome o;
  o.pass = r.pose_per_second > 100.0 && r.total_ms.size() == 20;
  double pose = 0.0, render = 0.0;
  for (std::size_t i = 0; i < r.total_ms.size(); ++i) {
    pose += r.pose_ms[i] / r.total_ms.size();
    render += r.render_ms[i] / r.total_ms.size();
  }
  o.detail = "504x504, M=80000, 20 frames on " + std::to_string(cores) + " core(s): pose " + fmt("%.2f", pose) +
             " ms, render " + fmt("%.1f", render) + " ms, " + fmt("%.1f", r.mean_fps) + " FPS; pose_avatar " +
             fmt("%.0f", r.pose_per_second) + " deformations/s (need > 100)";
  o.metrics = r.to_json();
  o.metrics["cores"] = cores;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<std::string> only;
  std::string report_path;
  app.add_option("--only", only, "Run only these criteria");
  app.add_option("--report", report_path, "Write a JSON summary here");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient_suite", gradient_suite},
      {"renderer_oracle", renderer_oracle},
      {"lbs_invariants", lbs_invariants},
      {"flame_round_trip", flame_round_trip},
      {"personalization_dynamics", personalization_dynamics},
      {"sampler_properties", sampler_properties},
      {"fixed_point", fixed_point},
      {"benchmark_report", benchmark_report},
  };
  json summary = json::object();
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("threw: ") + e.what();
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    summary[name] = {{"pass", o.pass}, {"detail", o.detail}, {"metrics", o.metrics}};
  }
  if (!report_path.empty()) std::ofstream(report_path) << summary.dump(2) << '\n';
  return failures == 0 ? 0 : 1;
}
