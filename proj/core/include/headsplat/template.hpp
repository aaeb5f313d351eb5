#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace headsplat {

using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kNoParent = -1;

struct Bone {
  std::string name;
  Eigen::Vector3d rest = Eigen::Vector3d::Zero();  // meters
  int parent = kNoParent;
};

// FLAME-style parametric head: a mesh with linear identity/expression
// blendshapes, articulated by a bone tree with linear blend skinning.
//
// Bases are stored as (3V) x K matrices; row 3v+c holds coordinate c of
// vertex v. Bones are stored in topological order: bone 0 is the root and
// every other bone's parent has a smaller index.
struct HeadTemplate {
  std::vector<Eigen::Vector3d> vertices;
  Eigen::MatrixXd identity_basis;
  Eigen::MatrixXd expression_basis;
  // Pose correctives, keyed on vec(R_j - I) of every non-root joint, so the
  // column count is either 0 or 9 * (B - 1).
  Eigen::MatrixXd articulation_corrective;
  std::vector<Bone> bones;
  RowMatrixXd skinning_weights;  // V x B, row-stochastic
  std::vector<std::array<std::uint32_t, 3>> faces;

  int num_vertices() const { return static_cast<int>(vertices.size()); }
  int num_identity() const { return static_cast<int>(identity_basis.cols()); }
  int num_expression() const { return static_cast<int>(expression_basis.cols()); }
  int num_corrective() const { return static_cast<int>(articulation_corrective.cols()); }
  int num_bones() const { return static_cast<int>(bones.size()); }

  // Throws std::invalid_argument on any violated invariant.
  void validate() const;

  // CRC32 of the binary payload as written by save_template.
  std::uint32_t crc() const;
};

// One frame's driving coefficients. `articulation` holds one axis-angle per
// non-root bone (bone i + 1 for entry i); the head pose is a rigid motion in
// the normalized camera frame applied after the bone chain.
struct FlameParams {
  std::vector<double> expression;
  std::vector<Eigen::Vector3d> articulation;
  Eigen::Vector3d head_rotation = Eigen::Vector3d::Zero();
  Eigen::Vector3d head_translation = Eigen::Vector3d::Zero();

  static FlameParams rest(const HeadTemplate& tmpl);

  void validate(const HeadTemplate& tmpl) const;

  // Flat parameter vector: [expression, articulation..., head rotation,
  // head translation], K_expr + 3 (B - 1) + 6 entries.
  std::vector<double> pack() const;
  static FlameParams unpack(std::span<const double> packed, int num_expression, int num_bones);
};

inline int flame_param_count(int num_expression, int num_bones) {
  return num_expression + 3 * (num_bones - 1) + 6;
}

struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
  RigidTransform operator*(const RigidTransform& rhs) const {
    return {rotation * rhs.rotation, rotation * rhs.translation + translation};
  }
  static RigidTransform translation_only(const Eigen::Vector3d& t) { return {Eigen::Matrix3d::Identity(), t}; }
};

struct SyntheticTemplateOptions {
  Eigen::Vector3d head_radii{0.08, 0.10, 0.09};  // x (width), y (height), z (depth)
  double identity_amplitude = 0.01;                // meters per unit coefficient
  double expression_amplitude = 0.04;              // meters per unit coefficient, <= 0.05
  double corrective_amplitude = 0.0;
  double skinning_power = 3.0;
};

HeadTemplate generate_synthetic_template(std::uint64_t seed, int num_vertices, int num_identity,
                                         int num_expression, int num_bones,
                                         const SyntheticTemplateOptions& options = {});

// vertices + identity_basis * beta + expression_basis * psi.
std::vector<Eigen::Vector3d> shape_vertices(const HeadTemplate& tmpl, std::span<const double> identity,
                                            std::span<const double> expression);

// Per-bone skinning transforms A_b relative to the rest pose, with the head
// pose composed on top (x' = R_h * (chain) + t_h).
std::vector<RigidTransform> bone_transforms(const HeadTemplate& tmpl, const FlameParams& params);

// Global joint frames of the bone chain without the head pose; the skinning
// transform is frame * translation(-rest).
std::vector<RigidTransform> joint_frames(const HeadTemplate& tmpl, const FlameParams& params);

// vec(R_j - I) for every non-root joint, row-major, 9 * (B - 1) entries.
std::vector<double> corrective_features(const FlameParams& params);

// Classic LBS: blend the 3x4 transform entries by the vertex weights, then apply.
std::vector<Eigen::Vector3d> lbs_deform(std::span<const Eigen::Vector3d> vertices, const RowMatrixXd& weights,
                                        std::span<const RigidTransform> transforms);

void save_template(const std::filesystem::path& path, const HeadTemplate& tmpl);
HeadTemplate load_template(const std::filesystem::path& path);

}  // namespace headsplat
