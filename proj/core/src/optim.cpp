#include "headsplat/optim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "headsplat/errors.hpp"
#include "headsplat/random.hpp"
#include "headsplat/so3.hpp"

namespace headsplat {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::span<double> flat(std::vector<Eigen::Vector3d>& v) { return {v.data()->data(), 3 * v.size()}; }

double rms(const std::vector<double>& d) {
  if (d.empty()) return 0.0;
  double s = 0.0;
  for (double x : d) s += x * x;
  return std::sqrt(s / static_cast<double>(d.size()));
}

struct FrameEval {
  double loss = 0.0;
  RenderedFrame frame;
  Image grad;
};

FrameEval evaluate_frame(const PosedGaussians& posed, const Image& target, const Camera& camera,
                         const LossWeights& weights, const RasterConfig& raster) {
  FrameEval out;
  out.frame = render(posed, camera, raster);
  if (!out.frame.rgb.same_shape(target)) {
    throw std::invalid_argument("frame image does not match the camera resolution");
  }
  TotalLoss tl = total_loss({ImagePair{&target, &out.frame.rgb}}, weights);
  out.loss = tl.value;
  out.grad = std::move(tl.grads.front());
  return out;
}

void check_frames(const std::vector<TrainingFrame>& frames, const HeadTemplate& tmpl) {
  if (frames.empty()) throw std::invalid_argument("at least one training frame is required");
  for (const auto& f : frames) {
    f.params.validate(tmpl);
    f.camera.validate();
    if (f.image.width != f.camera.width || f.image.height != f.camera.height || f.image.channels != 3) {
      throw std::invalid_argument("training image does not match its camera");
    }
  }
}

double mean_loss(const Rig& rig, const CanonicalAvatar& avatar, const std::vector<TrainingFrame>& frames,
                 const PersonalizeOptions& o) {
  double sum = 0.0;
  for (const auto& f : frames) {
    const PosedGaussians posed = rig.pose(avatar, f.params, o.animation);
    const RenderedFrame r = render(posed, f.camera, o.raster);
    sum += total_loss({ImagePair{&f.image, &r.rgb}}, o.weights).value;
  }
  return sum / static_cast<double>(frames.size());
}

}  // namespace

CoefficientRmse coefficient_rmse(const FlameParams& estimate, const FlameParams& truth) {
  if (estimate.expression.size() != truth.expression.size() ||
      estimate.articulation.size() != truth.articulation.size()) {
    throw std::invalid_argument("coefficient_rmse: parameter dimensions differ");
  }
  CoefficientRmse r;
  std::vector<double> d;
  for (std::size_t i = 0; i < truth.expression.size(); ++i) d.push_back(estimate.expression[i] - truth.expression[i]);
  r.expression = rms(d);
  d.clear();
  for (std::size_t i = 0; i < truth.articulation.size(); ++i) {
    for (int c = 0; c < 3; ++c) d.push_back(estimate.articulation[i][c] - truth.articulation[i][c]);
  }
  r.articulation = rms(d);
  d.clear();
  for (int c = 0; c < 3; ++c) d.push_back(estimate.head_rotation[c] - truth.head_rotation[c]);
  r.head_pose_rad = rms(d);
  d.clear();
  for (int c = 0; c < 3; ++c) d.push_back(estimate.head_translation[c] - truth.head_translation[c]);
  r.head_translation_m = rms(d);
  return r;
}

nlohmann::json FitReport::to_json() const {
  nlohmann::json j;
  j["loss_trace"] = loss_trace;
  j["initial_loss"] = initial_loss;
  j["final_loss"] = final_loss;
  j["best_loss"] = best_loss;
  j["best_step"] = best_step;
  j["initial_grad_norm"] = initial_grad_norm;
  j["steps"] = steps;
  j["wall_time_s"] = wall_time_s;
  j["fps"] = fps;
  if (rmse) {
    j["rmse"] = {{"expression", rmse->expression},
                 {"articulation", rmse->articulation},
                 {"head_pose_rad", rmse->head_pose_rad},
                 {"head_translation_m", rmse->head_translation_m}};
  } else {
    j["rmse"] = nullptr;
  }
  return j;
}

ResidualGradient residual_gradient(const Rig& rig, const CanonicalAvatar& avatar, const AvatarResiduals& residuals,
                                   const TrainingFrame& frame, const PersonalizeOptions& o) {
  const std::size_t m = avatar.size();
  std::vector<Eigen::Matrix3d> blended;
  const CanonicalAvatar current = apply_residuals(avatar, residuals);
  const PosedGaussians posed = rig.pose(current, frame.params, o.animation, &blended);
  FrameEval ev = evaluate_frame(posed, frame.image, frame.camera, o.weights, o.raster);
  ResidualGradient out;
  out.loss = ev.loss;
  out.grad = AvatarResiduals::zeros(m);
  if (!std::isfinite(ev.loss)) return out;
  GaussianGradients raw = render_backward(ev.frame, ev.grad);
  for (std::size_t i = 0; i < m; ++i) {
    out.grad.offsets[i] = blended[i].transpose() * raw.centers[i];
    out.grad.log_scales[i] = raw.log_scales[i];
    out.grad.rotation_tangents[i] =
        so3::right_jacobian(residuals.rotation_tangents[i]).transpose() * raw.rotation_tangents[i];
    out.grad.opacity_logits[i] = raw.opacity_logits[i];
    out.grad.colors[i] = raw.colors[i];
  }
  return out;
}

PersonalizeResult personalize(const CanonicalAvatar& avatar, const HeadTemplate& tmpl,
                              const std::vector<TrainingFrame>& frames, const PersonalizeOptions& o) {
  const auto start = Clock::now();
  check_compatible(avatar, tmpl);
  check_frames(frames, tmpl);
  o.weights.validate();
  if (o.steps < 0) throw std::invalid_argument("personalize: negative step count");

  const Rig rig(tmpl, avatar);
  const std::size_t m = avatar.size();
  PersonalizeResult out;
  out.residuals = AvatarResiduals::zeros(m);
  AvatarResiduals& res = out.residuals;
  GaussianGradients g = GaussianGradients::zeros(m);

  const std::vector<ParamBlock> blocks = {
      {"offsets", flat(res.offsets), flat(g.centers), o.lr_scales.offsets},
      {"log_scales", flat(res.log_scales), flat(g.log_scales), o.lr_scales.log_scales},
      {"rotation_tangents", flat(res.rotation_tangents), flat(g.rotation_tangents), o.lr_scales.rotations},
      {"opacity_logits", res.opacity_logits, g.opacity_logits, o.lr_scales.opacity},
      {"colors", flat(res.colors), flat(g.colors), o.lr_scales.colors},
  };
  AdamState adam(AdamOptions{.lr = o.lr});

  FitReport& report = out.report;
  report.initial_loss = mean_loss(rig, avatar, frames, o);
  report.best_loss = std::numeric_limits<double>::infinity();
  for (int step = 0; step < o.steps; ++step) {
    const TrainingFrame& f = frames[static_cast<std::size_t>(step) % frames.size()];
    ResidualGradient rg = residual_gradient(rig, avatar, res, f, o);
    if (!std::isfinite(rg.loss)) throw DivergedError("loss", step);
    report.loss_trace.push_back(rg.loss);
    if (rg.loss < report.best_loss) {
      report.best_loss = rg.loss;
      report.best_step = step;
    }
    if (o.on_step) o.on_step(step, rg.loss);
    // Copy, not move: the Adam blocks hold spans into g.
    std::copy(rg.grad.offsets.begin(), rg.grad.offsets.end(), g.centers.begin());
    std::copy(rg.grad.log_scales.begin(), rg.grad.log_scales.end(), g.log_scales.begin());
    std::copy(rg.grad.rotation_tangents.begin(), rg.grad.rotation_tangents.end(), g.rotation_tangents.begin());
    std::copy(rg.grad.opacity_logits.begin(), rg.grad.opacity_logits.end(), g.opacity_logits.begin());
    std::copy(rg.grad.colors.begin(), rg.grad.colors.end(), g.colors.begin());
    if (step == 0) {
      double s = 0.0;
      for (const auto& b : blocks) {
        for (double x : b.grads) s += x * x;
      }
      report.initial_grad_norm = std::sqrt(s);
    }
    adam_step(blocks, adam);
  }
  report.steps = o.steps;
  report.final_loss = o.steps > 0 ? mean_loss(rig, apply_residuals(avatar, res), frames, o) : report.initial_loss;
  if (o.steps == 0) report.best_loss = report.initial_loss;
  report.wall_time_s = seconds_since(start);
  return out;
}

ParamGradient param_gradient(const Rig& rig, const CanonicalAvatar& avatar, const Image& frame, const Camera& camera,
                             const FlameParams& params, const FitFlameOptions& o) {
  const PosedGaussians posed = rig.pose(avatar, params, o.animation);
  FrameEval ev = evaluate_frame(posed, frame, camera, o.weights, o.raster);
  ParamGradient out;
  out.loss = ev.loss;
  if (!std::isfinite(ev.loss)) {
    out.grad.assign(static_cast<std::size_t>(flame_param_count(rig.skeleton().num_expression(),
                                                               rig.skeleton().num_bones())), 0.0);
    return out;
  }
  const GaussianGradients raw = render_backward(ev.frame, ev.grad);
  out.grad = rig.jacobian(avatar, params, o.raster.threads).apply_transpose(raw.centers);
  return out;
}

FlameFit fit_flame(const Rig& rig, const CanonicalAvatar& avatar, const Image& frame, const Camera& camera,
                   const FlameParams& init, const FitFlameOptions& o) {
  const auto start = Clock::now();
  const HeadTemplate& skel = rig.skeleton();
  init.validate(skel);
  camera.validate();
  o.weights.validate();
  if (o.steps < 0) throw std::invalid_argument("fit_flame: negative step count");
  if (frame.width != camera.width || frame.height != camera.height || frame.channels != 3) {
    throw std::invalid_argument("fit_flame: image does not match the camera");
  }

  const int k = skel.num_expression();
  const int b = skel.num_bones();
  std::vector<double> packed = init.pack();
  std::vector<double> grad(packed.size(), 0.0);
  const std::size_t n_expr = static_cast<std::size_t>(k);
  const std::size_t n_art = 3 * static_cast<std::size_t>(b - 1);
  const std::span<double> pv(packed);
  const std::span<const double> gv(grad);
  std::vector<ParamBlock> blocks;
  if (n_expr > 0) blocks.push_back({"expression", pv.subspan(0, n_expr), gv.subspan(0, n_expr), 1.0});
  if (n_art > 0) blocks.push_back({"articulation", pv.subspan(n_expr, n_art), gv.subspan(n_expr, n_art), 1.0});
  blocks.push_back({"head_rotation", pv.subspan(n_expr + n_art, 3), gv.subspan(n_expr + n_art, 3), 1.0});
  blocks.push_back(
      {"head_translation", pv.subspan(n_expr + n_art + 3, 3), gv.subspan(n_expr + n_art + 3, 3), o.translation_lr_scale});
  AdamState adam(AdamOptions{.lr = o.lr});

  FlameFit out;
  out.params = init;
  FitReport& report = out.report;
  report.best_loss = std::numeric_limits<double>::infinity();
  for (int step = 0;; ++step) {
    const FlameParams params = FlameParams::unpack(packed, k, b);
    const ParamGradient pg = param_gradient(rig, avatar, frame, camera, params, o);
    if (!std::isfinite(pg.loss)) throw DivergedError("loss", step);
    report.loss_trace.push_back(pg.loss);
    if (step == 0) report.initial_loss = pg.loss;
    if (pg.loss < report.best_loss) {
      report.best_loss = pg.loss;
      report.best_step = step;
      out.params = params;
    }
    if (step == o.steps) {
      report.final_loss = pg.loss;
      break;
    }
    std::copy(pg.grad.begin(), pg.grad.end(), grad.begin());
    if (step == 0) {
      double s = 0.0;
      for (double x : grad) s += x * x;
      report.initial_grad_norm = std::sqrt(s);
    }
    adam_step(blocks, adam);
  }
  report.steps = o.steps;
  if (o.ground_truth) report.rmse = coefficient_rmse(out.params, *o.ground_truth);
  report.wall_time_s = seconds_since(start);
  return out;
}

FlameFit fit_flame(const CanonicalAvatar& avatar, const HeadTemplate& tmpl, const Image& frame, const Camera& camera,
                   const FlameParams& init, const FitFlameOptions& options) {
  check_compatible(avatar, tmpl);
  const Rig rig(tmpl, avatar);
  return fit_flame(rig, avatar, frame, camera, init, options);
}

SequenceEstimate estimate_sequence(const CanonicalAvatar& avatar, const HeadTemplate& tmpl,
                                   const std::vector<Image>& frames, const Camera& camera, const FlameParams& init,
                                   const SequenceOptions& o) {
  if (frames.empty()) throw std::invalid_argument("estimate_sequence: no frames");
  const auto start = Clock::now();
  check_compatible(avatar, tmpl);
  const Rig rig(tmpl, avatar);
  SequenceEstimate out;
  FlameParams current = init;
  FitFlameOptions fo = o.fit;
  fo.ground_truth.reset();
  double previous_loss = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < frames.size(); ++i) {
    fo.steps = i == 0 ? o.first_frame_steps : o.steps_per_frame;
    // A frame the warm start already explains as well as the previous fit
    // is kept as is; identical frames then reproduce the same parameters.
    if (i > 0) {
      FitFlameOptions probe = fo;
      probe.steps = 0;
      const double warm = fit_flame(rig, avatar, frames[i], camera, current, probe).report.best_loss;
      if (warm <= previous_loss * (1.0 + 1e-9)) fo.steps = 0;
    }
    FlameFit fit = fit_flame(rig, avatar, frames[i], camera, current, fo);
    current = fit.params;
    previous_loss = fit.report.best_loss;
    out.params.push_back(current);
    out.final_losses.push_back(previous_loss);
  }
  out.wall_time_s = seconds_since(start);
  out.fps = out.wall_time_s > 0.0 ? static_cast<double>(frames.size()) / out.wall_time_s : 0.0;
  return out;
}

CanonicalAvatar fitted_initialization(const CanonicalAvatar& avatar, const HeadTemplate& tmpl,
                                      const std::vector<TrainingFrame>& frames, const RasterConfig& raster,
                                      const AnimationConfig& animation) {
  check_compatible(avatar, tmpl);
  check_frames(frames, tmpl);
  const Rig rig(tmpl, avatar);
  const std::size_t m = avatar.size();
  // Probe with mid-gray so the color clamp passes gradients for every channel.
  CanonicalAvatar probe = avatar;
  probe.colors.assign(m, Eigen::Vector3d::Constant(0.5));
  std::vector<Eigen::Vector3d> num(m, Eigen::Vector3d::Zero());
  std::vector<Eigen::Vector3d> den(m, Eigen::Vector3d::Zero());
  for (const auto& f : frames) {
    const PosedGaussians posed = rig.pose(probe, f.params, animation);
    const RenderedFrame r = render(posed, f.camera, raster);
    // Back-projected color over back-projected coverage: exact for a target
    // of uniform color rendered with the same geometry.
    Image coverage(f.camera.width, f.camera.height, 3);
    for (int y = 0; y < coverage.height; ++y) {
      for (int x = 0; x < coverage.width; ++x) {
        for (int c = 0; c < 3; ++c) coverage.at(x, y, c) = r.alpha.at(x, y, 0);
      }
    }
    const GaussianGradients gi = render_backward(r, f.image);
    const GaussianGradients gw = render_backward(r, coverage);
    for (std::size_t i = 0; i < m; ++i) {
      num[i] += gi.colors[i];
      den[i] += gw.colors[i];
    }
  }
  CanonicalAvatar out = avatar;
  for (std::size_t i = 0; i < m; ++i) {
    for (int c = 0; c < 3; ++c) {
      if (den[i][c] > 1e-9) out.colors[i][c] = std::clamp(num[i][c] / den[i][c], 0.0, 1.0);
    }
  }
  return out;
}

CanonicalAvatar random_initialization(const CanonicalAvatar& avatar, std::uint64_t seed) {
  Rng rng(seed);
  CanonicalAvatar out = avatar;
  for (auto& c : out.colors) c = Eigen::Vector3d(rng.uniform(), rng.uniform(), rng.uniform());
  return out;
}

}  // namespace headsplat
