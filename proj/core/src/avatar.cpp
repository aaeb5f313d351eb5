#include "headsplat/avatar.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_map>

#include "binary_io.hpp"
#include "headsplat/errors.hpp"
#include "headsplat/random.hpp"
#include "headsplat/so3.hpp"

namespace headsplat {

namespace {

constexpr double kDistinctEpsilon = 1e-9;

double storage(double v) { return detail::round_f32(v); }

Eigen::Vector3d storage(const Eigen::Vector3d& v) { return {storage(v[0]), storage(v[1]), storage(v[2])}; }

// Uniform hash grid for nearest-neighbor queries on surface samples.
class PointGrid {
 public:
  explicit PointGrid(const std::vector<Eigen::Vector3d>& points) : points_(points) {
    Eigen::Vector3d lo = points[0], hi = points[0];
    for (const auto& p : points) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    const Eigen::Vector3d extent = (hi - lo).cwiseMax(1e-9);
    const double volume = extent.prod();
    cell_ = std::max(std::cbrt(volume / static_cast<double>(points.size())), 1e-6);
    origin_ = lo;
    for (std::size_t i = 0; i < points.size(); ++i) cells_[key(cell_of(points[i]))].push_back(static_cast<std::uint32_t>(i));
    max_ring_ = static_cast<int>(std::ceil(extent.maxCoeff() / cell_)) + 1;
  }

  // Mean distance to the k nearest points farther than kDistinctEpsilon;
  // NaN when fewer than k such points exist.
  double mean_distinct_neighbor_distance(std::size_t query, int k) const {
    const Eigen::Vector3d& q = points_[query];
    const Eigen::Vector3i c = cell_of(q);
    std::vector<double> best;  // sorted ascending, size <= k
    auto consider = [&](std::uint32_t j) {
      const double d = (points_[j] - q).norm();
      if (d <= kDistinctEpsilon) return;
      if (static_cast<int>(best.size()) < k || d < best.back()) {
        best.insert(std::upper_bound(best.begin(), best.end(), d), d);
        if (static_cast<int>(best.size()) > k) best.pop_back();
      }
    };
    for (int ring = 0; ring <= max_ring_; ++ring) {
      for (int dz = -ring; dz <= ring; ++dz) {
        for (int dy = -ring; dy <= ring; ++dy) {
          for (int dx = -ring; dx <= ring; ++dx) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
            const auto it = cells_.find(key(c + Eigen::Vector3i(dx, dy, dz)));
            if (it == cells_.end()) continue;
            for (auto j : it->second) consider(j);
          }
        }
      }
      // Every unvisited point is at least `ring * cell_` away.
      if (static_cast<int>(best.size()) == k && best.back() <= ring * cell_) break;
    }
    if (static_cast<int>(best.size()) < k) return std::numeric_limits<double>::quiet_NaN();
    double sum = 0.0;
    for (double d : best) sum += d;
    return sum / k;
  }

 private:
  Eigen::Vector3i cell_of(const Eigen::Vector3d& p) const {
    return ((p - origin_) / cell_).array().floor().cast<int>();
  }
  static std::int64_t key(const Eigen::Vector3i& c) {
    return (static_cast<std::int64_t>(c.x()) * 73856093) ^ (static_cast<std::int64_t>(c.y()) * 19349663) ^
           (static_cast<std::int64_t>(c.z()) * 83492791);
  }

  const std::vector<Eigen::Vector3d>& points_;
  double cell_ = 1.0;
  Eigen::Vector3d origin_;
  int max_ring_ = 1;
  // Hash collisions only add candidates; distances are always exact.
  std::unordered_map<std::int64_t, std::vector<std::uint32_t>> cells_;
};

template <typename T>
void check_size(const std::vector<T>& v, std::size_t m, const char* what) {
  if (v.size() != m) throw std::invalid_argument(std::string("attribute size mismatch: ") + what);
}

void check_residual_shapes(const AvatarResiduals& r, std::size_t m) {
  check_size(r.offsets, m, "offsets");
  check_size(r.log_scales, m, "log_scales");
  check_size(r.rotation_tangents, m, "rotation_tangents");
  check_size(r.opacity_logits, m, "opacity_logits");
  check_size(r.colors, m, "colors");
}

void write_vec3s(detail::PayloadWriter& w, const std::vector<Eigen::Vector3d>& v) {
  for (const auto& p : v) {
    for (int c = 0; c < 3; ++c) w.f32(p[c]);
  }
}

void read_vec3s(detail::PayloadReader& r, std::vector<Eigen::Vector3d>& v, std::size_t m) {
  v.resize(m);
  for (auto& p : v) {
    for (int c = 0; c < 3; ++c) p[c] = r.f32();
  }
}

}  // namespace

double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double logit(double p) { return std::log(p / (1.0 - p)); }

Eigen::Matrix3d CanonicalAvatar::covariance(std::size_t m) const {
  const Eigen::Matrix3d r = so3::quat_to_matrix(rotations[m]);
  const Eigen::Vector3d var = (2.0 * log_scales[m]).array().exp();
  return r * var.asDiagonal() * r.transpose();
}

double CanonicalAvatar::opacity(std::size_t m) const { return logistic(opacity_logits[m]); }

void CanonicalAvatar::validate() const {
  const std::size_t m = anchors.size();
  if (anchor_weights.rows() != static_cast<Eigen::Index>(m)) throw std::invalid_argument("anchor weights must be M x B");
  check_size(provenance, m, "provenance");
  check_size(offsets, m, "offsets");
  check_size(log_scales, m, "log_scales");
  check_size(rotations, m, "rotations");
  check_size(opacity_logits, m, "opacity_logits");
  check_size(colors, m, "colors");
  for (std::size_t i = 0; i < m; ++i) {
    if (std::abs(rotations[i].norm() - 1.0) > 1e-6) throw std::invalid_argument("rotation is not unit norm");
    if (std::abs(anchor_weights.row(static_cast<Eigen::Index>(i)).sum() - 1.0) > 1e-6 ||
        (anchor_weights.row(static_cast<Eigen::Index>(i)).array() < 0.0).any()) {
      throw std::invalid_argument("anchor weights are not row-stochastic");
    }
  }
}

AvatarResiduals AvatarResiduals::zeros(std::size_t count) {
  AvatarResiduals r;
  r.offsets.assign(count, Eigen::Vector3d::Zero());
  r.log_scales.assign(count, Eigen::Vector3d::Zero());
  r.rotation_tangents.assign(count, Eigen::Vector3d::Zero());
  r.opacity_logits.assign(count, 0.0);
  r.colors.assign(count, Eigen::Vector3d::Zero());
  return r;
}

bool AvatarResiduals::finite() const {
  auto ok = [](const std::vector<Eigen::Vector3d>& v) {
    return std::all_of(v.begin(), v.end(), [](const Eigen::Vector3d& x) { return x.allFinite(); });
  };
  return ok(offsets) && ok(log_scales) && ok(rotation_tangents) && ok(colors) &&
         std::all_of(opacity_logits.begin(), opacity_logits.end(), [](double x) { return std::isfinite(x); });
}

AvatarResiduals AvatarResiduals::operator-() const {
  AvatarResiduals r = *this;
  for (auto* v : {&r.offsets, &r.log_scales, &r.rotation_tangents, &r.colors}) {
    for (auto& x : *v) x = -x;
  }
  for (auto& x : r.opacity_logits) x = -x;
  return r;
}

double AvatarResiduals::max_abs() const {
  double m = 0.0;
  for (const auto* v : {&offsets, &log_scales, &rotation_tangents, &colors}) {
    for (const auto& x : *v) m = std::max(m, x.cwiseAbs().maxCoeff());
  }
  for (double x : opacity_logits) m = std::max(m, std::abs(x));
  return m;
}

AnchorSet upsample_anchors(const HeadTemplate& tmpl, std::size_t target_count, std::uint64_t seed,
                           std::span<const double> identity) {
  tmpl.validate();
  const std::size_t v = tmpl.vertices.size();
  if (target_count < v) throw std::invalid_argument("upsample target must be at least the template vertex count");

  std::vector<double> beta(identity.begin(), identity.end());
  if (beta.empty()) beta.assign(tmpl.num_identity(), 0.0);
  const std::vector<double> psi(tmpl.num_expression(), 0.0);
  const auto shaped = shape_vertices(tmpl, beta, psi);

  AnchorSet out;
  out.template_crc = tmpl.crc();
  out.positions.resize(v);
  for (std::size_t i = 0; i < v; ++i) out.positions[i] = storage(shaped[i]);
  out.weights.resize(static_cast<Eigen::Index>(target_count), tmpl.num_bones());
  out.weights.topRows(static_cast<Eigen::Index>(v)) = tmpl.skinning_weights;
  out.provenance.resize(v);
  for (std::size_t i = 0; i < v; ++i) {
    const auto u = static_cast<std::uint32_t>(i);
    out.provenance[i] = {{u, u, u}, {1.0, 0.0, 0.0}};
  }
  if (target_count == v) return out;

  std::vector<double> cumulative(tmpl.faces.size());
  double total = 0.0;
  for (std::size_t f = 0; f < tmpl.faces.size(); ++f) {
    const auto& face = tmpl.faces[f];
    total += 0.5 * (shaped[face[1]] - shaped[face[0]]).cross(shaped[face[2]] - shaped[face[0]]).norm();
    cumulative[f] = total;
  }
  if (!(total > 0.0)) throw std::invalid_argument("cannot upsample a mesh with zero surface area");

  Rng rng(seed);
  out.positions.reserve(target_count);
  out.provenance.reserve(target_count);
  for (std::size_t i = v; i < target_count; ++i) {
    const double pick = rng.uniform() * total;
    auto f = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin());
    f = std::min(f, cumulative.size() - 1);
    const auto& face = tmpl.faces[f];
    const double r1 = std::sqrt(rng.uniform());
    const double r2 = rng.uniform();
    // Everything is rounded to the on-disk precision so saved avatars load
    // back bit-identical.
    Eigen::Vector3d bary(storage(r1 * (1.0 - r2)), storage(r1 * r2), 0.0);
    bary[0] = storage(1.0 - bary[1] - bary[2]);
    out.positions.push_back(storage(bary[0] * shaped[face[0]] + bary[1] * shaped[face[1]] + bary[2] * shaped[face[2]]));
    out.provenance.push_back({face, bary});
    Eigen::RowVectorXd w = Eigen::RowVectorXd::Zero(tmpl.num_bones());
    for (int k = 0; k < 3; ++k) w += bary[k] * tmpl.skinning_weights.row(face[k]);
    w /= w.sum();
    for (Eigen::Index b = 0; b < w.size(); ++b) w[b] = storage(w[b]);
    out.weights.row(static_cast<Eigen::Index>(i)) = w;
  }
  return out;
}

CanonicalAvatar init_avatar(const AnchorSet& anchors) {
  const std::size_t m = anchors.size();
  if (m < 4) throw std::invalid_argument("init_avatar needs at least 4 anchors");
  if (anchors.weights.rows() != static_cast<Eigen::Index>(m) || anchors.provenance.size() != m) {
    throw std::invalid_argument("anchor set arrays disagree in length");
  }
  CanonicalAvatar a;
  a.anchors.resize(m);
  a.anchors = anchors.positions;
  a.anchor_weights = anchors.weights;
  a.provenance = anchors.provenance;
  a.template_crc = anchors.template_crc;
  a.offsets.assign(m, Eigen::Vector3d::Zero());
  a.rotations.assign(m, so3::quat_identity());
  a.opacity_logits.assign(m, 0.0);  // logit(0.5)
  a.colors.assign(m, Eigen::Vector3d::Constant(0.5));
  a.log_scales.resize(m);

  const PointGrid grid(a.anchors);
  for (std::size_t i = 0; i < m; ++i) {
    const double d = grid.mean_distinct_neighbor_distance(i, 3);
    if (!std::isfinite(d) || !(d > 0.0)) throw std::invalid_argument("anchors have fewer than 3 distinct neighbors");
    a.log_scales[i] = Eigen::Vector3d::Constant(storage(std::log(0.5 * d)));
  }
  return a;
}

CanonicalAvatar apply_residuals(const CanonicalAvatar& avatar, const AvatarResiduals& residuals) {
  const std::size_t m = avatar.size();
  check_residual_shapes(residuals, m);
  CanonicalAvatar out = avatar;
  for (std::size_t i = 0; i < m; ++i) {
    out.offsets[i] += residuals.offsets[i];
    out.log_scales[i] += residuals.log_scales[i];
    // A zero tangent leaves the stored quaternion bit-identical.
    if (!residuals.rotation_tangents[i].isZero(0.0)) {
      out.rotations[i] =
          so3::quat_normalized(so3::quat_multiply(avatar.rotations[i], so3::quat_exp(residuals.rotation_tangents[i])));
    }
    out.opacity_logits[i] += residuals.opacity_logits[i];
    out.colors[i] += residuals.colors[i];
  }
  return out;
}

void check_compatible(const CanonicalAvatar& avatar, const HeadTemplate& tmpl) {
  if (avatar.template_crc != tmpl.crc()) {
    throw TemplateMismatchError("avatar was built from a different template (CRC mismatch)");
  }
  if (avatar.num_bones() != tmpl.num_bones()) throw TemplateMismatchError("avatar bone count differs from template");
  const auto v = static_cast<std::uint32_t>(tmpl.num_vertices());
  for (const auto& p : avatar.provenance) {
    for (auto i : p.vertices) {
      if (i >= v) throw TemplateMismatchError("avatar provenance references a vertex outside the template");
    }
  }
}

void save_avatar(const std::filesystem::path& path, const CanonicalAvatar& a) {
  a.validate();
  const std::size_t m = a.size();
  detail::PayloadWriter w;
  write_vec3s(w, a.anchors);
  for (Eigen::Index i = 0; i < a.anchor_weights.rows(); ++i) {
    for (Eigen::Index b = 0; b < a.anchor_weights.cols(); ++b) w.f32(a.anchor_weights(i, b));
  }
  write_vec3s(w, a.offsets);
  write_vec3s(w, a.log_scales);
  for (const auto& q : a.rotations) {
    for (int c = 0; c < 4; ++c) w.f32(q[c]);
  }
  for (double o : a.opacity_logits) w.f32(o);
  write_vec3s(w, a.colors);
  for (const auto& p : a.provenance) {
    for (auto i : p.vertices) w.u32(i);
  }
  for (const auto& p : a.provenance) {
    for (int c = 0; c < 3; ++c) w.f32(p.barycentric[c]);
  }
  const nlohmann::json header = {{"magic", "GHA1"},          {"M", m},
                                 {"B", a.num_bones()},       {"template_crc", a.template_crc},
                                 {"provenance", true},       {"endianness", "LE"}};
  detail::write_container(path, header, w.bytes(), true);
}

CanonicalAvatar load_avatar(const std::filesystem::path& path) {
  const auto c = detail::read_container(path, "GHA1", true);
  const std::string ctx = path.string();
  const auto m = detail::header_count(c.header, "M", ctx);
  const auto b = detail::header_count(c.header, "B", ctx);
  const bool has_provenance = c.header.value("provenance", false);
  const std::size_t expected = 4 * m * (3 + b + 3 + 3 + 4 + 1 + 3 + (has_provenance ? 6 : 0));
  if (c.payload.size() != expected) throw FormatError(ctx + ": payload length does not match header counts");

  detail::PayloadReader r(c.payload, ctx);
  CanonicalAvatar a;
  a.template_crc = c.header.at("template_crc").get<std::uint32_t>();
  read_vec3s(r, a.anchors, m);
  a.anchor_weights.resize(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(b));
  for (Eigen::Index i = 0; i < a.anchor_weights.rows(); ++i) {
    for (Eigen::Index k = 0; k < a.anchor_weights.cols(); ++k) a.anchor_weights(i, k) = r.f32();
  }
  read_vec3s(r, a.offsets, m);
  read_vec3s(r, a.log_scales, m);
  a.rotations.resize(m);
  for (auto& q : a.rotations) {
    for (int k = 0; k < 4; ++k) q[k] = r.f32();
    q = so3::quat_normalized(q);
  }
  a.opacity_logits.resize(m);
  for (auto& o : a.opacity_logits) o = r.f32();
  read_vec3s(r, a.colors, m);
  a.provenance.resize(m);
  if (has_provenance) {
    for (auto& p : a.provenance) {
      for (auto& i : p.vertices) i = r.u32();
    }
    for (auto& p : a.provenance) {
      for (int k = 0; k < 3; ++k) p.barycentric[k] = r.f32();
    }
  } else {
    // Without provenance every anchor is treated as a template vertex.
    for (std::size_t i = 0; i < m; ++i) {
      const auto u = static_cast<std::uint32_t>(i);
      a.provenance[i] = {{u, u, u}, {1.0, 0.0, 0.0}};
    }
  }
  r.expect_end();
  try {
    a.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(ctx + ": " + e.what());
  }
  return a;
}

void save_residuals(const std::filesystem::path& path, const AvatarResiduals& res, std::uint32_t template_crc) {
  const std::size_t m = res.size();
  check_residual_shapes(res, m);
  detail::PayloadWriter w;
  write_vec3s(w, res.offsets);
  write_vec3s(w, res.log_scales);
  write_vec3s(w, res.rotation_tangents);
  for (double o : res.opacity_logits) w.f32(o);
  write_vec3s(w, res.colors);
  const nlohmann::json header = {
      {"magic", "GHR1"}, {"M", m}, {"template_crc", template_crc}, {"rotation", "tangent"}, {"endianness", "LE"}};
  detail::write_container(path, header, w.bytes(), true);
}

AvatarResiduals load_residuals(const std::filesystem::path& path) {
  const auto c = detail::read_container(path, "GHR1", true);
  const std::string ctx = path.string();
  const auto m = detail::header_count(c.header, "M", ctx);
  if (c.payload.size() != 4 * m * 13) throw FormatError(ctx + ": payload length does not match header counts");
  detail::PayloadReader r(c.payload, ctx);
  AvatarResiduals res;
  read_vec3s(r, res.offsets, m);
  read_vec3s(r, res.log_scales, m);
  read_vec3s(r, res.rotation_tangents, m);
  res.opacity_logits.resize(m);
  for (auto& o : res.opacity_logits) o = r.f32();
  read_vec3s(r, res.colors, m);
  r.expect_end();
  return res;
}

}  // namespace headsplat
