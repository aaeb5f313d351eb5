#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include <Eigen/Core>

#include "headsplat/animation.hpp"
#include "headsplat/image.hpp"

namespace headsplat {

// Pinhole camera at the origin looking down -z with +y up. Pixel (x, y) has
// its center at (x + 0.5, y + 0.5); u = cx + fx * X / d, v = cy - fy * Y / d
// with depth d = -Z.
struct Camera {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;
  double near_clip = 0.01;
  double far_clip = 100.0;

  void validate() const;

  // The normalized frame used for all head-pose parameters: principal point
  // at the image center and a focal length at which a head of
  // `head_extent` meters at distance 1 spans `coverage` of the image width.
  static Camera normalized(int width, int height, double head_extent = 0.2, double coverage = 0.8);
};

struct RasterConfig {
  static constexpr int kTileSize = 16;

  int threads = 0;
  double transmittance_cutoff = 1e-4;
  double cov2d_floor = 0.3;  // px^2 added to the projected covariance diagonal
  double alpha_max = 0.9999;
  // Splats are binned to tiles only where opacity * falloff exceeds this.
  double tail_epsilon = 1e-7;
};

// A projected Gaussian. The conic (a, b, c) is the inverse 2D covariance
// [[a, b], [b, c]].
struct Splat2D {
  std::uint32_t gaussian = 0;
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  Eigen::Matrix2d cov = Eigen::Matrix2d::Identity();
  Eigen::Vector3d conic = Eigen::Vector3d(1.0, 0.0, 1.0);
  double depth = 0.0;
  double opacity = 0.0;
  Eigen::Vector3d color = Eigen::Vector3d::Zero();  // clamped to [0, 1]
};

// Visible splats in Gaussian index order. Splats closer than near_clip (or
// beyond far_clip) are culled.
std::vector<Splat2D> project_gaussians(const PosedGaussians& posed, const Camera& camera,
                                       const RasterConfig& config = {});

struct RenderState;

struct RenderedFrame {
  Image rgb;    // H x W x 3, composited over transparent black
  Image alpha;  // H x W x 1
  std::shared_ptr<const RenderState> state;  // intermediates for render_backward

  bool has_intermediates() const { return state != nullptr; }
};

// Tiled front-to-back compositing. Output is independent of config.threads.
RenderedFrame render(const PosedGaussians& posed, const Camera& camera, const RasterConfig& config = {});

// Reference renderer: every pixel composites every splat in depth order with
// no tiling, tail truncation or early termination. Returns H x W x 4 RGBA.
Image brute_force_render(const PosedGaussians& posed, const Camera& camera, const RasterConfig& config = {});

// Gradients laid out like the avatar attribute arrays. `centers` is the
// gradient with respect to the posed (camera-frame) centers;
// `rotation_tangents` is with respect to q' = q * exp(d) at d = 0.
struct GaussianGradients {
  std::vector<Eigen::Vector3d> centers;
  std::vector<Eigen::Vector3d> log_scales;
  std::vector<Eigen::Vector3d> rotation_tangents;
  std::vector<double> opacity_logits;
  std::vector<Eigen::Vector3d> colors;

  static GaussianGradients zeros(std::size_t count);
};

// Reverse-mode pass through compositing, projection and covariance
// construction. `grad_alpha` may be null. Throws InvalidStateError when the
// frame carries no intermediates.
GaussianGradients render_backward(const RenderedFrame& frame, const Image& grad_rgb, const Image* grad_alpha = nullptr);

}  // namespace headsplat
