#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

// Rotation utilities shared by the kinematics, the rasterizer and the
// optimizers. Quaternions are stored as (w, x, y, z) 4-vectors.
namespace headsplat::so3 {

Eigen::Matrix3d skew(const Eigen::Vector3d& v);

// Rodrigues formula, exp: so(3) -> SO(3).
Eigen::Matrix3d exp(const Eigen::Vector3d& omega);

// Inverse of exp for rotations with angle < pi.
Eigen::Vector3d log(const Eigen::Matrix3d& rotation);

// Right Jacobian: exp(w + d) ~= exp(w) * exp(right_jacobian(w) * d).
Eigen::Matrix3d right_jacobian(const Eigen::Vector3d& omega);

Eigen::Vector4d quat_exp(const Eigen::Vector3d& omega);
Eigen::Vector4d quat_multiply(const Eigen::Vector4d& a, const Eigen::Vector4d& b);
Eigen::Vector4d quat_normalized(const Eigen::Vector4d& q);
Eigen::Matrix3d quat_to_matrix(const Eigen::Vector4d& q);
Eigen::Vector4d quat_identity();

// Converts the gradient of a scalar with respect to a rotation matrix R into
// the gradient with respect to a right tangent perturbation R * exp([d]x).
Eigen::Vector3d tangent_gradient(const Eigen::Matrix3d& rotation, const Eigen::Matrix3d& grad_rotation);

}  // namespace headsplat::so3
