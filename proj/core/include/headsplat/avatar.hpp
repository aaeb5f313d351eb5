#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "headsplat/template.hpp"

namespace headsplat {

// Where an anchor came from on the template surface: the triangle's vertex
// indices and barycentric coordinates. Original vertices use (v, v, v) and
// (1, 0, 0).
struct Provenance {
  std::array<std::uint32_t, 3> vertices{};
  Eigen::Vector3d barycentric{1.0, 0.0, 0.0};
};

struct AnchorSet {
  std::vector<Eigen::Vector3d> positions;
  RowMatrixXd weights;  // M x B
  std::vector<Provenance> provenance;
  std::uint32_t template_crc = 0;

  std::size_t size() const { return positions.size(); }
};

// M Gaussians in canonical space. Centers are anchors + offsets; covariance
// is R(q) diag(exp(2 s)) R(q)^T from log-scales s and unit quaternions q
// (w, x, y, z); opacity is logistic(opacity_logit). Colors are stored
// unclamped and clamped to [0, 1] at render time.
struct CanonicalAvatar {
  std::vector<Eigen::Vector3d> anchors;
  RowMatrixXd anchor_weights;
  std::vector<Provenance> provenance;
  std::vector<Eigen::Vector3d> offsets;
  std::vector<Eigen::Vector3d> log_scales;
  std::vector<Eigen::Vector4d> rotations;
  std::vector<double> opacity_logits;
  std::vector<Eigen::Vector3d> colors;
  std::uint32_t template_crc = 0;

  std::size_t size() const { return anchors.size(); }
  int num_bones() const { return static_cast<int>(anchor_weights.cols()); }

  Eigen::Vector3d center(std::size_t m) const { return anchors[m] + offsets[m]; }
  Eigen::Matrix3d covariance(std::size_t m) const;
  double opacity(std::size_t m) const;

  void validate() const;
};

// Additive deltas on every avatar attribute. Rotations are perturbed in the
// tangent space: q' = normalize(q * exp(rotation_tangent)).
struct AvatarResiduals {
  std::vector<Eigen::Vector3d> offsets;
  std::vector<Eigen::Vector3d> log_scales;
  std::vector<Eigen::Vector3d> rotation_tangents;
  std::vector<double> opacity_logits;
  std::vector<Eigen::Vector3d> colors;

  static AvatarResiduals zeros(std::size_t count);

  std::size_t size() const { return offsets.size(); }
  bool finite() const;
  AvatarResiduals operator-() const;
  double max_abs() const;
};

double logistic(double x);
double logit(double p);

AnchorSet upsample_anchors(const HeadTemplate& tmpl, std::size_t target_count, std::uint64_t seed,
                           std::span<const double> identity = {});

CanonicalAvatar init_avatar(const AnchorSet& anchors);

CanonicalAvatar apply_residuals(const CanonicalAvatar& avatar, const AvatarResiduals& residuals);

// Checks the avatar was built from `tmpl`; throws TemplateMismatchError.
void check_compatible(const CanonicalAvatar& avatar, const HeadTemplate& tmpl);

// File formats: "GHA1" avatars and "GHR1" residuals.
void save_avatar(const std::filesystem::path& path, const CanonicalAvatar& avatar);
CanonicalAvatar load_avatar(const std::filesystem::path& path);
void save_residuals(const std::filesystem::path& path, const AvatarResiduals& residuals, std::uint32_t template_crc);
AvatarResiduals load_residuals(const std::filesystem::path& path);

}  // namespace headsplat
