#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "headsplat/adam.hpp"
#include "headsplat/animation.hpp"
#include "headsplat/avatar.hpp"
#include "headsplat/image.hpp"
#include "headsplat/losses.hpp"
#include "headsplat/rasterizer.hpp"
#include "headsplat/template.hpp"

namespace headsplat {

// Root-mean-square error per coefficient group. Rotations are compared as
// axis-angle components.
struct CoefficientRmse {
  double expression = 0.0;
  double articulation = 0.0;     // rad
  double head_pose_rad = 0.0;
  double head_translation_m = 0.0;
};

CoefficientRmse coefficient_rmse(const FlameParams& estimate, const FlameParams& truth);

struct FitReport {
  std::vector<double> loss_trace;  // loss before each update
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double best_loss = 0.0;
  long best_step = 0;
  double initial_grad_norm = 0.0;
  long steps = 0;
  double wall_time_s = 0.0;
  double fps = 0.0;  // frames processed per second, sequence estimation only
  std::optional<CoefficientRmse> rmse;

  nlohmann::json to_json() const;
};

struct TrainingFrame {
  Image image;
  FlameParams params;
  Camera camera;
};

// Learning-rate multipliers per residual attribute.
struct ResidualLrScales {
  double offsets = 1.0;
  double log_scales = 1.0;
  double rotations = 1.0;
  double opacity = 1.0;
  double colors = 1.0;
};

struct PersonalizeOptions {
  int steps = 500;
  double lr = 1e-4;
  ResidualLrScales lr_scales;
  LossWeights weights;
  AnimationConfig animation;
  RasterConfig raster;
  std::function<void(int step, double loss)> on_step;
};

struct PersonalizeResult {
  AvatarResiduals residuals;
  FitReport report;
};

struct ResidualGradient {
  double loss = 0.0;
  AvatarResiduals grad;
};

// Loss of one frame rendered from apply_residuals(avatar, residuals) and its
// gradient with respect to the residuals. `rig` must be built from `avatar`.
ResidualGradient residual_gradient(const Rig& rig, const CanonicalAvatar& avatar, const AvatarResiduals& residuals,
                                   const TrainingFrame& frame, const PersonalizeOptions& options = {});

// Optimizes residuals on a frozen avatar. Step k trains on frame k mod N.
// initial_loss and final_loss are means over all frames, at zero residuals
// and at the returned residuals.
PersonalizeResult personalize(const CanonicalAvatar& avatar, const HeadTemplate& tmpl,
                              const std::vector<TrainingFrame>& frames, const PersonalizeOptions& options = {});

struct FitFlameOptions {
  int steps = 300;
  double lr = 0.01;
  double translation_lr_scale = 0.1;
  LossWeights weights;
  AnimationConfig animation;
  RasterConfig raster;
  std::optional<FlameParams> ground_truth;  // fills FitReport::rmse
};

struct FlameFit {
  FlameParams params;  // lowest-loss iterate, including the initial guess
  FitReport report;
};

struct ParamGradient {
  double loss = 0.0;
  std::vector<double> grad;  // packed order of FlameParams::pack
};

// Photometric loss at `params` and its gradient through the center Jacobian.
ParamGradient param_gradient(const Rig& rig, const CanonicalAvatar& avatar, const Image& frame, const Camera& camera,
                             const FlameParams& params, const FitFlameOptions& options = {});

FlameFit fit_flame(const Rig& rig, const CanonicalAvatar& avatar, const Image& frame, const Camera& camera,
                   const FlameParams& init, const FitFlameOptions& options = {});
FlameFit fit_flame(const CanonicalAvatar& avatar, const HeadTemplate& tmpl, const Image& frame, const Camera& camera,
                   const FlameParams& init, const FitFlameOptions& options = {});

struct SequenceOptions {
  int first_frame_steps = 200;
  int steps_per_frame = 20;
  FitFlameOptions fit;
};

struct SequenceEstimate {
  std::vector<FlameParams> params;
  std::vector<double> final_losses;
  double wall_time_s = 0.0;
  double fps = 0.0;
};

// Fits each frame starting from the previous frame's solution.
SequenceEstimate estimate_sequence(const CanonicalAvatar& avatar, const HeadTemplate& tmpl,
                                   const std::vector<Image>& frames, const Camera& camera, const FlameParams& init,
                                   const SequenceOptions& options = {});

// Coarse colors by back-projection: over the pixels a Gaussian covers, the
// compositing-weighted sum of target color divided by the same sum of
// rendered coverage. Gaussians that cover no pixel keep their color.
CanonicalAvatar fitted_initialization(const CanonicalAvatar& avatar, const HeadTemplate& tmpl,
                                      const std::vector<TrainingFrame>& frames, const RasterConfig& raster = {},
                                      const AnimationConfig& animation = {});

// Uniform random colors in [0, 1].
CanonicalAvatar random_initialization(const CanonicalAvatar& avatar, std::uint64_t seed);

}  // namespace headsplat
