#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "headsplat/avatar.hpp"
#include "headsplat/template.hpp"

namespace headsplat {

struct AnimationConfig {
  // Off by default: only Gaussian centers are deformed. When on, each
  // covariance is also rotated by the polar factor of its blended transform.
  bool rotate_covariance = false;
  int threads = 0;
};

// Gaussians after skinning. Everything except `centers` is copied verbatim
// from the canonical avatar.
struct PosedGaussians {
  std::vector<Eigen::Vector3d> centers;
  std::vector<Eigen::Vector3d> log_scales;
  std::vector<Eigen::Vector4d> rotations;
  std::vector<double> opacity_logits;
  std::vector<Eigen::Vector3d> colors;
  std::uint64_t frame_tag = 0;  // hash of the FlameParams that produced it

  std::size_t size() const { return centers.size(); }

  // Canonical attributes with centers = anchors + offsets (no skinning).
  static PosedGaussians from_canonical(const CanonicalAvatar& avatar);
};

std::uint64_t params_tag(const FlameParams& params);

// Dense d(center)/d(params), M x 3 x P with P = K_expr + 3 (B - 1) + 6 and
// the parameter order of FlameParams::pack.
class PoseJacobian {
 public:
  PoseJacobian() = default;
  PoseJacobian(std::size_t gaussians, int params)
      : gaussians_(gaussians), params_(params), data_(gaussians * 3 * static_cast<std::size_t>(params), 0.0) {}

  std::size_t num_gaussians() const { return gaussians_; }
  int num_params() const { return params_; }

  double& operator()(std::size_t m, int c, int p) { return data_[(m * 3 + c) * params_ + p]; }
  double operator()(std::size_t m, int c, int p) const { return data_[(m * 3 + c) * params_ + p]; }

  // The 3 x P block of one Gaussian.
  Eigen::Map<const Eigen::Matrix<double, 3, Eigen::Dynamic, Eigen::RowMajor>> block(std::size_t m) const {
    return {data_.data() + m * 3 * params_, 3, params_};
  }
  Eigen::Map<Eigen::Matrix<double, 3, Eigen::Dynamic, Eigen::RowMajor>> block(std::size_t m) {
    return {data_.data() + m * 3 * params_, 3, params_};
  }

  // sum_m J_m^T g_m.
  std::vector<double> apply_transpose(std::span<const Eigen::Vector3d> grad_centers) const;

 private:
  std::size_t gaussians_ = 0;
  int params_ = 0;
  std::vector<double> data_;
};

// Precomputed per-anchor blendshape bases for one (template, avatar) pair.
// Expression and corrective displacements are interpolated to anchors with
// their provenance barycentrics and added before skinning:
//   mu' = (sum_b w_b A_b) (v + o + E psi + C f(theta)).
class Rig {
 public:
  Rig(const HeadTemplate& tmpl, const CanonicalAvatar& avatar);

  std::size_t size() const { return weights_.rows(); }
  const HeadTemplate& skeleton() const { return skeleton_; }

  // `avatar` must have the anchors this rig was built with (residual-applied
  // copies are fine). When `blended_rotations` is given it receives the
  // per-Gaussian linear part sum_b w_b R_b.
  PosedGaussians pose(const CanonicalAvatar& avatar, const FlameParams& params, const AnimationConfig& config = {},
                      std::vector<Eigen::Matrix3d>* blended_rotations = nullptr) const;

  PoseJacobian jacobian(const CanonicalAvatar& avatar, const FlameParams& params, int threads = 0) const;

 private:
  Eigen::Vector3d rest_point(const CanonicalAvatar& avatar, std::size_t m, std::span<const double> psi,
                             std::span<const double> features) const;
  void check_avatar(const CanonicalAvatar& avatar) const;

  HeadTemplate skeleton_;  // bones and counts only
  RowMatrixXd weights_;
  RowMatrixXd expression_;  // 3M x K_expr
  RowMatrixXd corrective_;  // 3M x K_art, empty when the template has none or all zero
  std::vector<std::vector<char>> descendant_;  // [joint][bone]: bone is joint or below it
};

PosedGaussians pose_avatar(const CanonicalAvatar& avatar, const HeadTemplate& tmpl, const FlameParams& params,
                           const AnimationConfig& config = {});

PoseJacobian pose_jacobian(const CanonicalAvatar& avatar, const HeadTemplate& tmpl, const FlameParams& params);

}  // namespace headsplat
