#include "headsplat/animation.hpp"

#include <cstring>
#include <stdexcept>

#include <Eigen/Geometry>
#include <Eigen/SVD>

#include "headsplat/parallel.hpp"
#include "headsplat/so3.hpp"

namespace headsplat {

namespace {

constexpr std::size_t kGrain = 1024;

Eigen::Vector4d rotation_to_quat(const Eigen::Matrix3d& r) {
  const Eigen::Quaterniond q(r);
  return {q.w(), q.x(), q.y(), q.z()};
}

Eigen::Matrix3d polar_rotation(const Eigen::Matrix3d& m) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU();
  const Eigen::Matrix3d v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0.0) u.col(2) = -u.col(2);
  return u * v.transpose();
}

}  // namespace

PosedGaussians PosedGaussians::from_canonical(const CanonicalAvatar& avatar) {
  PosedGaussians p;
  p.centers.resize(avatar.size());
  for (std::size_t m = 0; m < avatar.size(); ++m) p.centers[m] = avatar.center(m);
  p.log_scales = avatar.log_scales;
  p.rotations = avatar.rotations;
  p.opacity_logits = avatar.opacity_logits;
  p.colors = avatar.colors;
  return p;
}

std::uint64_t params_tag(const FlameParams& params) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a over the packed bits
  for (double v : params.pack()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xffu;
      h *= 1099511628211ull;
    }
  }
  return h;
}

std::vector<double> PoseJacobian::apply_transpose(std::span<const Eigen::Vector3d> grad_centers) const {
  if (grad_centers.size() != gaussians_) throw std::invalid_argument("gradient count does not match Jacobian");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(params_);
  for (std::size_t m = 0; m < gaussians_; ++m) out.noalias() += block(m).transpose() * grad_centers[m];
  return {out.data(), out.data() + out.size()};
}

namespace {

// Rescale rows so their left-to-right floating-point sum is exactly 1;
// stored weights are float32-rounded. Setting the last nonzero entry to
// 1 - (sum of the others) makes the sequential sum round to exactly 1.
void normalize_rows(RowMatrixXd& w) {
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    w.row(r) /= w.row(r).sum();
    Eigen::Index last = w.cols() - 1;
    while (last > 0 && w(r, last) == 0.0) --last;
    double partial = 0.0;
    for (Eigen::Index b = 0; b < last; ++b) partial += w(r, b);
    w(r, last) = 1.0 - partial;
  }
}

}  // namespace

Rig::Rig(const HeadTemplate& tmpl, const CanonicalAvatar& avatar) {
  check_compatible(avatar, tmpl);
  skeleton_.bones = tmpl.bones;
  weights_ = avatar.anchor_weights;
  normalize_rows(weights_);
  const std::size_t m = avatar.size();
  const int k = tmpl.num_expression();
  expression_.resize(static_cast<Eigen::Index>(3 * m), k);
  const bool has_corrective = tmpl.num_corrective() > 0 && tmpl.articulation_corrective.cwiseAbs().maxCoeff() > 0.0;
  if (has_corrective) corrective_.resize(static_cast<Eigen::Index>(3 * m), tmpl.num_corrective());
  for (std::size_t i = 0; i < m; ++i) {
    const auto& prov = avatar.provenance[i];
    for (int c = 0; c < 3; ++c) {
      const auto row = static_cast<Eigen::Index>(3 * i + c);
      expression_.row(row).setZero();
      if (has_corrective) corrective_.row(row).setZero();
      for (int v = 0; v < 3; ++v) {
        const double b = prov.barycentric[v];
        if (b == 0.0) continue;
        const auto src = static_cast<Eigen::Index>(3 * prov.vertices[v] + c);
        expression_.row(row) += b * tmpl.expression_basis.row(src);
        if (has_corrective) corrective_.row(row) += b * tmpl.articulation_corrective.row(src);
      }
    }
  }
  const int bones = tmpl.num_bones();
  descendant_.assign(bones, std::vector<char>(bones, 0));
  for (int b = 0; b < bones; ++b) {
    for (int j = b; j != kNoParent; j = tmpl.bones[j].parent) descendant_[j][b] = 1;
  }
  // Scratch copies of the counts used by joint_frames/bone_transforms.
  skeleton_.expression_basis.resize(0, k);
  skeleton_.articulation_corrective.resize(0, tmpl.num_corrective());
}

void Rig::check_avatar(const CanonicalAvatar& avatar) const {
  if (avatar.size() != size()) throw std::invalid_argument("avatar size does not match rig");
}

Eigen::Vector3d Rig::rest_point(const CanonicalAvatar& avatar, std::size_t m, std::span<const double> psi,
                                std::span<const double> features) const {
  Eigen::Vector3d x = avatar.anchors[m] + avatar.offsets[m];
  const Eigen::Map<const Eigen::VectorXd> psi_v(psi.data(), static_cast<Eigen::Index>(psi.size()));
  x += expression_.middleRows(static_cast<Eigen::Index>(3 * m), 3) * psi_v;
  if (corrective_.size() > 0) {
    const Eigen::Map<const Eigen::VectorXd> f(features.data(), static_cast<Eigen::Index>(features.size()));
    x += corrective_.middleRows(static_cast<Eigen::Index>(3 * m), 3) * f;
  }
  return x;
}

PosedGaussians Rig::pose(const CanonicalAvatar& avatar, const FlameParams& params, const AnimationConfig& config,
                         std::vector<Eigen::Matrix3d>* blended_rotations) const {
  check_avatar(avatar);
  if (static_cast<Eigen::Index>(params.expression.size()) != expression_.cols()) {
    throw std::invalid_argument("expression coefficient count does not match template");
  }
  const auto transforms = bone_transforms(skeleton_, params);
  const auto features = corrective_features(params);
  const std::size_t count = size();
  const auto bones = static_cast<Eigen::Index>(transforms.size());

  PosedGaussians out;
  out.centers.resize(count);
  out.log_scales = avatar.log_scales;
  out.rotations = avatar.rotations;
  out.opacity_logits = avatar.opacity_logits;
  out.colors = avatar.colors;
  out.frame_tag = params_tag(params);
  if (blended_rotations) blended_rotations->resize(count);

  parallel_for(count, config.threads, kGrain, [&](std::size_t begin, std::size_t end) {
    for (std::size_t m = begin; m < end; ++m) {
      Eigen::Matrix3d r = Eigen::Matrix3d::Zero();
      Eigen::Vector3d t = Eigen::Vector3d::Zero();
      for (Eigen::Index b = 0; b < bones; ++b) {
        const double w = weights_(static_cast<Eigen::Index>(m), b);
        if (w == 0.0) continue;
        r += w * transforms[b].rotation;
        t += w * transforms[b].translation;
      }
      out.centers[m] = r * rest_point(avatar, m, params.expression, features) + t;
      if (blended_rotations) (*blended_rotations)[m] = r;
      if (config.rotate_covariance) {
        out.rotations[m] = so3::quat_normalized(so3::quat_multiply(rotation_to_quat(polar_rotation(r)), avatar.rotations[m]));
      }
    }
  });
  return out;
}

PoseJacobian Rig::jacobian(const CanonicalAvatar& avatar, const FlameParams& params, int threads) const {
  check_avatar(avatar);
  const int k = static_cast<int>(expression_.cols());
  if (static_cast<int>(params.expression.size()) != k) {
    throw std::invalid_argument("expression coefficient count does not match template");
  }
  const int bones = skeleton_.num_bones();
  const int joints = bones - 1;
  const int p_count = flame_param_count(k, bones);
  const int rot_offset = k + 3 * joints;
  const int trans_offset = rot_offset + 3;

  const auto frames = joint_frames(skeleton_, params);
  const Eigen::Matrix3d head_r = so3::exp(params.head_rotation);
  const Eigen::Matrix3d head_jr = so3::right_jacobian(params.head_rotation);
  std::vector<RigidTransform> local(bones);  // chain-only skinning transforms
  for (int b = 0; b < bones; ++b) local[b] = frames[b] * RigidTransform::translation_only(-skeleton_.bones[b].rest);
  std::vector<Eigen::Matrix3d> joint_jr(joints);
  for (int j = 0; j < joints; ++j) joint_jr[j] = so3::right_jacobian(params.articulation[j]);

  // d vec(R_j - I) / d theta_j, 9 x 3 per joint.
  std::vector<Eigen::Matrix<double, 9, 3>> feature_jac(joints);
  if (corrective_.size() > 0) {
    for (int j = 0; j < joints; ++j) {
      const Eigen::Matrix3d r = so3::exp(params.articulation[j]);
      for (int c = 0; c < 3; ++c) {
        const Eigen::Matrix3d d = r * so3::skew(joint_jr[j].col(c));
        for (int a = 0; a < 3; ++a) {
          for (int b = 0; b < 3; ++b) feature_jac[j](3 * a + b, c) = d(a, b);
        }
      }
    }
  }
  const auto features = corrective_features(params);

  PoseJacobian jac(size(), p_count);
  parallel_for(size(), threads, kGrain, [&](std::size_t begin, std::size_t end) {
    std::vector<Eigen::Vector3d> chain_points(bones);
    for (std::size_t m = begin; m < end; ++m) {
      const auto row = static_cast<Eigen::Index>(m);
      const Eigen::Vector3d x = rest_point(avatar, m, params.expression, features);
      Eigen::Matrix3d chain_r = Eigen::Matrix3d::Zero();
      Eigen::Vector3d y = Eigen::Vector3d::Zero();
      for (int b = 0; b < bones; ++b) {
        chain_points[b] = local[b].apply(x);
        const double w = weights_(row, b);
        chain_r += w * local[b].rotation;
        y += w * chain_points[b];
      }
      const Eigen::Matrix3d blended = head_r * chain_r;
      auto block = jac.block(m);

      block.leftCols(k) = blended * expression_.middleRows(3 * row, 3);

      for (int j = 0; j < joints; ++j) {
        const int bone = j + 1;
        Eigen::Vector3d s = Eigen::Vector3d::Zero();
        for (int b = 0; b < bones; ++b) {
          if (descendant_[bone][b]) s += weights_(row, b) * (chain_points[b] - frames[bone].translation);
        }
        const Eigen::Vector3d z = frames[bone].rotation.transpose() * s;
        Eigen::Matrix3d d = -head_r * frames[bone].rotation * so3::skew(z) * joint_jr[j];
        if (corrective_.size() > 0) {
          d += blended * corrective_.block(3 * row, 9 * j, 3, 9) * feature_jac[j];
        }
        block.middleCols(k + 3 * j, 3) = d;
      }
      block.middleCols(rot_offset, 3) = -head_r * so3::skew(y) * head_jr;
      block.middleCols(trans_offset, 3) = weights_.row(row).sum() * Eigen::Matrix3d::Identity();
    }
  });
  return jac;
}

PosedGaussians pose_avatar(const CanonicalAvatar& avatar, const HeadTemplate& tmpl, const FlameParams& params,
                           const AnimationConfig& config) {
  return Rig(tmpl, avatar).pose(avatar, params, config);
}

PoseJacobian pose_jacobian(const CanonicalAvatar& avatar, const HeadTemplate& tmpl, const FlameParams& params) {
  return Rig(tmpl, avatar).jacobian(avatar, params);
}

}  // namespace headsplat
