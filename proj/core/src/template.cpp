#include "headsplat/template.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <queue>
#include <stdexcept>

#include "binary_io.hpp"
#include "headsplat/random.hpp"
#include "headsplat/so3.hpp"

namespace headsplat {

namespace {

using Face = std::array<std::uint32_t, 3>;

struct SphereMesh {
  std::vector<Eigen::Vector3d> points;  // unit sphere
  std::vector<Face> faces;
};

SphereMesh tetrahedron() {
  SphereMesh m;
  const double s = 1.0 / std::sqrt(3.0);
  m.points = {{s, s, s}, {s, -s, -s}, {-s, s, -s}, {-s, -s, s}};
  m.faces = {{0, 1, 2}, {0, 3, 1}, {0, 2, 3}, {1, 3, 2}};
  return m;
}

SphereMesh icosahedron() {
  SphereMesh m;
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  m.points = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
              {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (auto& p : m.points) p.normalize();
  m.faces = {{0, 11, 5}, {0, 5, 1}, {0, 1, 7}, {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
             {11, 10, 2}, {10, 7, 6}, {7, 1, 8}, {3, 9, 4}, {3, 4, 2}, {3, 2, 6}, {3, 6, 8},
             {3, 8, 9}, {4, 9, 5}, {2, 4, 11}, {6, 2, 10}, {8, 6, 7}, {9, 8, 1}};
  return m;
}

SphereMesh subdivide(const SphereMesh& in) {
  SphereMesh out;
  out.points = in.points;
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> midpoints;
  auto midpoint = [&](std::uint32_t a, std::uint32_t b) {
    const auto key = std::minmax(a, b);
    auto [it, inserted] = midpoints.try_emplace(key, static_cast<std::uint32_t>(out.points.size()));
    if (inserted) out.points.push_back((in.points[a] + in.points[b]).normalized());
    return it->second;
  };
  for (const auto& f : in.faces) {
    const auto ab = midpoint(f[0], f[1]);
    const auto bc = midpoint(f[1], f[2]);
    const auto ca = midpoint(f[2], f[0]);
    out.faces.push_back({f[0], ab, ca});
    out.faces.push_back({f[1], bc, ab});
    out.faces.push_back({f[2], ca, bc});
    out.faces.push_back({ab, bc, ca});
  }
  return out;
}

double face_area(const std::vector<Eigen::Vector3d>& p, const Face& f) {
  return 0.5 * (p[f[1]] - p[f[0]]).cross(p[f[2]] - p[f[0]]).norm();
}

// Icosphere (or tetrahedron for tiny counts) refined to exactly `count`
// vertices by splitting the largest faces at their centroids.
SphereMesh sphere_with_vertex_count(int count) {
  SphereMesh m = count >= 12 ? icosahedron() : tetrahedron();
  while (static_cast<int>(4 * m.points.size() - 6) <= count) m = subdivide(m);

  using Entry = std::pair<double, std::int64_t>;  // (area, -face index): largest area, then lowest index
  std::priority_queue<Entry> queue;
  for (std::size_t i = 0; i < m.faces.size(); ++i) {
    queue.push({face_area(m.points, m.faces[i]), -static_cast<std::int64_t>(i)});
  }
  while (static_cast<int>(m.points.size()) < count) {
    const auto [area, neg_index] = queue.top();
    queue.pop();
    const auto fi = static_cast<std::size_t>(-neg_index);
    if (area != face_area(m.points, m.faces[fi])) continue;  // stale entry
    const Face f = m.faces[fi];
    const auto c = static_cast<std::uint32_t>(m.points.size());
    m.points.push_back((m.points[f[0]] + m.points[f[1]] + m.points[f[2]]).normalized());
    m.faces[fi] = {f[0], f[1], c};
    m.faces.push_back({f[1], f[2], c});
    m.faces.push_back({f[2], f[0], c});
    for (std::size_t g : {fi, m.faces.size() - 2, m.faces.size() - 1}) {
      queue.push({face_area(m.points, m.faces[g]), -static_cast<std::int64_t>(g)});
    }
  }
  return m;
}

Eigen::Vector3d random_unit(Rng& rng) {
  Eigen::Vector3d v(rng.normal(), rng.normal(), rng.normal());
  const double n = v.norm();
  return n > 1e-12 ? Eigen::Vector3d(v / n) : Eigen::Vector3d::UnitZ();
}

// A smooth displacement field made of a few anisotropic Gaussian bumps,
// scaled so that the largest vertex displacement equals `amplitude`.
void fill_bump_field(Rng& rng, const std::vector<Eigen::Vector3d>& verts, double amplitude, bool front_only,
                     Eigen::MatrixXd& basis, int column) {
  const int bumps = 1 + static_cast<int>(rng.index(3));
  std::vector<Eigen::Vector3d> centers, dirs;
  std::vector<double> widths;
  for (int b = 0; b < bumps; ++b) {
    Eigen::Vector3d c = verts[rng.index(verts.size())];
    if (front_only) {
      for (int tries = 0; tries < 64 && c.z() < 0.02; ++tries) c = verts[rng.index(verts.size())];
    }
    centers.push_back(c);
    dirs.push_back(random_unit(rng) * rng.uniform(0.5, 1.0));
    widths.push_back(rng.uniform(0.025, 0.05));
  }
  double peak = 0.0;
  for (std::size_t v = 0; v < verts.size(); ++v) {
    Eigen::Vector3d d = Eigen::Vector3d::Zero();
    for (int b = 0; b < bumps; ++b) {
      const double r2 = (verts[v] - centers[b]).squaredNorm();
      d += dirs[b] * std::exp(-0.5 * r2 / (widths[b] * widths[b]));
    }
    basis.block<3, 1>(3 * v, column) = d;
    peak = std::max(peak, d.norm());
  }
  if (peak > 0.0) basis.col(column) *= amplitude / peak;
}

std::vector<Bone> default_bones(int count, const Eigen::Vector3d& radii, Rng& rng) {
  std::vector<Bone> bones = {
      {"neck", {0.0, -0.85 * radii.y(), -0.2 * radii.z()}, kNoParent},
      {"jaw", {0.0, -0.2 * radii.y(), -0.25 * radii.z()}, 0},
      {"left_eye", {0.38 * radii.x(), 0.25 * radii.y(), 0.6 * radii.z()}, 0},
      {"right_eye", {-0.38 * radii.x(), 0.25 * radii.y(), 0.6 * radii.z()}, 0},
  };
  bones.resize(std::min<std::size_t>(bones.size(), count));
  while (static_cast<int>(bones.size()) < count) {
    const int parent = static_cast<int>(rng.index(bones.size()));
    const Eigen::Vector3d p = random_unit(rng).cwiseProduct(radii) * rng.uniform(0.2, 0.7);
    bones.push_back({"bone_" + std::to_string(bones.size()), p, parent});
  }
  return bones;
}

double to_storage(double v) { return detail::round_f32(v); }

template <typename Matrix>
void round_to_storage(Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = to_storage(m.data()[i]);
}

void check_rows_stochastic(const RowMatrixXd& w, const char* what) {
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    if ((w.row(r).array() < 0.0).any() || !w.row(r).allFinite()) {
      throw std::invalid_argument(std::string(what) + ": negative or non-finite weight in row " + std::to_string(r));
    }
    if (std::abs(w.row(r).sum() - 1.0) > 1e-6) {
      throw std::invalid_argument(std::string(what) + ": row " + std::to_string(r) + " does not sum to 1");
    }
  }
}

std::vector<std::uint8_t> template_payload(const HeadTemplate& t) {
  detail::PayloadWriter w;
  for (const auto& v : t.vertices) {
    for (int c = 0; c < 3; ++c) w.f32(v[c]);
  }
  for (const Eigen::MatrixXd* basis : {&t.identity_basis, &t.expression_basis, &t.articulation_corrective}) {
    for (Eigen::Index r = 0; r < basis->rows(); ++r) {
      for (Eigen::Index k = 0; k < basis->cols(); ++k) w.f32((*basis)(r, k));
    }
  }
  for (const auto& b : t.bones) {
    for (int c = 0; c < 3; ++c) w.f32(b.rest[c]);
  }
  for (const auto& b : t.bones) w.i32(b.parent);
  for (Eigen::Index r = 0; r < t.skinning_weights.rows(); ++r) {
    for (Eigen::Index b = 0; b < t.skinning_weights.cols(); ++b) w.f32(t.skinning_weights(r, b));
  }
  for (const auto& f : t.faces) {
    for (auto i : f) w.u32(i);
  }
  return w.take();
}

}  // namespace

void HeadTemplate::validate() const {
  const int v = num_vertices();
  const int b = num_bones();
  if (v == 0) throw std::invalid_argument("template has no vertices");
  if (b < 1) throw std::invalid_argument("template has no bones");
  for (const Eigen::MatrixXd* basis : {&identity_basis, &expression_basis, &articulation_corrective}) {
    if (basis->rows() != 3 * v) throw std::invalid_argument("basis leading dimension does not match vertices");
    if (!basis->allFinite()) throw std::invalid_argument("basis contains non-finite values");
  }
  if (num_corrective() != 0 && num_corrective() != 9 * (b - 1)) {
    throw std::invalid_argument("articulation corrective basis must have 0 or 9*(B-1) columns");
  }
  if (bones[0].parent != kNoParent) throw std::invalid_argument("bone 0 must be the root");
  for (int i = 1; i < b; ++i) {
    if (bones[i].parent < 0 || bones[i].parent >= i) {
      throw std::invalid_argument("bone " + std::to_string(i) + " parent must precede it (tree rooted at bone 0)");
    }
  }
  if (skinning_weights.rows() != v || skinning_weights.cols() != b) {
    throw std::invalid_argument("skinning weights must be V x B");
  }
  check_rows_stochastic(skinning_weights, "skinning weights");
  for (const auto& f : faces) {
    for (auto i : f) {
      if (i >= static_cast<std::uint32_t>(v)) throw std::invalid_argument("face index out of range");
    }
  }
  for (const auto& p : vertices) {
    if (!p.allFinite()) throw std::invalid_argument("non-finite vertex");
  }
}

std::uint32_t HeadTemplate::crc() const { return detail::crc32(template_payload(*this)); }

FlameParams FlameParams::rest(const HeadTemplate& tmpl) {
  FlameParams p;
  p.expression.assign(tmpl.num_expression(), 0.0);
  p.articulation.assign(std::max(0, tmpl.num_bones() - 1), Eigen::Vector3d::Zero());
  return p;
}

void FlameParams::validate(const HeadTemplate& tmpl) const {
  if (static_cast<int>(expression.size()) != tmpl.num_expression()) {
    throw std::invalid_argument("expression has " + std::to_string(expression.size()) + " coefficients, template expects " +
                                std::to_string(tmpl.num_expression()));
  }
  if (static_cast<int>(articulation.size()) != tmpl.num_bones() - 1) {
    throw std::invalid_argument("articulation must have one rotation per non-root bone");
  }
  for (double e : expression) {
    if (!std::isfinite(e)) throw std::invalid_argument("non-finite expression coefficient");
  }
  for (const auto& a : articulation) {
    if (!a.allFinite()) throw std::invalid_argument("non-finite articulation");
    if (a.norm() >= M_PI) throw std::invalid_argument("articulation angle outside the principal range");
  }
  if (!head_rotation.allFinite() || !head_translation.allFinite()) throw std::invalid_argument("non-finite head pose");
}

std::vector<double> FlameParams::pack() const {
  std::vector<double> out(expression);
  for (const auto& a : articulation) out.insert(out.end(), a.data(), a.data() + 3);
  out.insert(out.end(), head_rotation.data(), head_rotation.data() + 3);
  out.insert(out.end(), head_translation.data(), head_translation.data() + 3);
  return out;
}

FlameParams FlameParams::unpack(std::span<const double> packed, int num_expression, int num_bones) {
  if (static_cast<int>(packed.size()) != flame_param_count(num_expression, num_bones)) {
    throw std::invalid_argument("packed parameter vector has the wrong length");
  }
  FlameParams p;
  std::size_t i = 0;
  p.expression.assign(packed.begin(), packed.begin() + num_expression);
  i = num_expression;
  for (int j = 0; j + 1 < num_bones; ++j, i += 3) p.articulation.emplace_back(packed[i], packed[i + 1], packed[i + 2]);
  p.head_rotation = {packed[i], packed[i + 1], packed[i + 2]};
  p.head_translation = {packed[i + 3], packed[i + 4], packed[i + 5]};
  return p;
}

HeadTemplate generate_synthetic_template(std::uint64_t seed, int num_vertices, int num_identity, int num_expression,
                                         int num_bones, const SyntheticTemplateOptions& options) {
  if (num_vertices <= 0 || num_identity <= 0 || num_expression <= 0 || num_bones <= 0) {
    throw std::invalid_argument("synthetic template counts must be positive");
  }
  if (num_vertices < 4) throw std::invalid_argument("synthetic template needs at least 4 vertices");
  if (num_bones < 2) throw std::invalid_argument("synthetic template needs at least 2 bones");

  Rng rng(seed);
  const SphereMesh sphere = sphere_with_vertex_count(num_vertices);
  HeadTemplate t;
  t.faces = sphere.faces;

  // Low-frequency radial relief so seeds produce distinct head shapes.
  const int harmonics = 6;
  std::vector<Eigen::Vector3d> freq;
  std::vector<double> phase, amp;
  for (int h = 0; h < harmonics; ++h) {
    freq.push_back(random_unit(rng) * rng.uniform(1.0, 3.0));
    phase.push_back(rng.uniform(0.0, 2.0 * M_PI));
    amp.push_back(rng.uniform(0.01, 0.04));
  }
  t.vertices.reserve(sphere.points.size());
  for (const auto& u : sphere.points) {
    double relief = 1.0;
    for (int h = 0; h < harmonics; ++h) relief += amp[h] * std::sin(freq[h].dot(u) + phase[h]);
    t.vertices.push_back(u.cwiseProduct(options.head_radii) * relief);
  }

  const int v = num_vertices;
  t.identity_basis = Eigen::MatrixXd::Zero(3 * v, num_identity);
  t.expression_basis = Eigen::MatrixXd::Zero(3 * v, num_expression);
  t.articulation_corrective = Eigen::MatrixXd::Zero(3 * v, 9 * (num_bones - 1));
  for (int k = 0; k < num_identity; ++k) fill_bump_field(rng, t.vertices, options.identity_amplitude, false, t.identity_basis, k);
  for (int k = 0; k < num_expression; ++k) fill_bump_field(rng, t.vertices, options.expression_amplitude, true, t.expression_basis, k);
  if (options.corrective_amplitude > 0.0) {
    for (int k = 0; k < t.articulation_corrective.cols(); ++k) {
      fill_bump_field(rng, t.vertices, options.corrective_amplitude, false, t.articulation_corrective, k);
    }
  }

  t.bones = default_bones(num_bones, options.head_radii, rng);
  t.skinning_weights.resize(v, num_bones);
  for (int i = 0; i < v; ++i) {
    double total = 0.0;
    for (int b = 0; b < num_bones; ++b) {
      const double d = (t.vertices[i] - t.bones[b].rest).norm();
      const double w = std::pow(d + 1e-3, -options.skinning_power);
      t.skinning_weights(i, b) = w;
      total += w;
    }
    t.skinning_weights.row(i) /= total;
  }

  // Quantize to the on-disk precision so in-memory and loaded templates agree.
  for (auto& p : t.vertices) {
    for (int c = 0; c < 3; ++c) p[c] = to_storage(p[c]);
  }
  round_to_storage(t.identity_basis);
  round_to_storage(t.expression_basis);
  round_to_storage(t.articulation_corrective);
  for (auto& b : t.bones) {
    for (int c = 0; c < 3; ++c) b.rest[c] = to_storage(b.rest[c]);
  }
  round_to_storage(t.skinning_weights);

  t.validate();
  return t;
}

std::vector<Eigen::Vector3d> shape_vertices(const HeadTemplate& tmpl, std::span<const double> identity,
                                            std::span<const double> expression) {
  if (static_cast<int>(identity.size()) != tmpl.num_identity()) {
    throw std::invalid_argument("identity coefficient count does not match template");
  }
  if (static_cast<int>(expression.size()) != tmpl.num_expression()) {
    throw std::invalid_argument("expression coefficient count does not match template");
  }
  const Eigen::Map<const Eigen::VectorXd> beta(identity.data(), static_cast<Eigen::Index>(identity.size()));
  const Eigen::Map<const Eigen::VectorXd> psi(expression.data(), static_cast<Eigen::Index>(expression.size()));
  Eigen::VectorXd offset = Eigen::VectorXd::Zero(3 * tmpl.num_vertices());
  if (beta.size() > 0) offset += tmpl.identity_basis * beta;
  if (psi.size() > 0) offset += tmpl.expression_basis * psi;
  std::vector<Eigen::Vector3d> out(tmpl.vertices);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += offset.segment<3>(3 * i);
  return out;
}

std::vector<RigidTransform> joint_frames(const HeadTemplate& tmpl, const FlameParams& params) {
  const int b = tmpl.num_bones();
  if (static_cast<int>(params.articulation.size()) != b - 1) {
    throw std::invalid_argument("articulation must have one rotation per non-root bone");
  }
  std::vector<RigidTransform> frames(b);
  frames[0] = RigidTransform::translation_only(tmpl.bones[0].rest);
  for (int i = 1; i < b; ++i) {
    const auto& bone = tmpl.bones[i];
    const RigidTransform local{so3::exp(params.articulation[i - 1]), bone.rest - tmpl.bones[bone.parent].rest};
    frames[i] = frames[bone.parent] * local;
  }
  return frames;
}

std::vector<RigidTransform> bone_transforms(const HeadTemplate& tmpl, const FlameParams& params) {
  if (!params.head_rotation.allFinite() || !params.head_translation.allFinite()) {
    throw std::invalid_argument("non-finite head pose");
  }
  for (const auto& a : params.articulation) {
    if (!a.allFinite()) throw std::invalid_argument("non-finite articulation");
  }
  const int b = tmpl.num_bones();
  if (static_cast<int>(params.articulation.size()) != b - 1) {
    throw std::invalid_argument("articulation must have one rotation per non-root bone");
  }
  // A_i = A_parent * T(j_i) R_i T(-j_i); composed this way the rest pose is
  // exactly the identity.
  std::vector<RigidTransform> chain(b);
  for (int i = 1; i < b; ++i) {
    const Eigen::Vector3d& j = tmpl.bones[i].rest;
    const Eigen::Matrix3d r = so3::exp(params.articulation[i - 1]);
    const RigidTransform about_joint{r, j - r * j};
    chain[i] = chain[tmpl.bones[i].parent] * about_joint;
  }
  const RigidTransform head{so3::exp(params.head_rotation), params.head_translation};
  for (auto& a : chain) a = head * a;
  return chain;
}

std::vector<double> corrective_features(const FlameParams& params) {
  std::vector<double> f;
  f.reserve(9 * params.articulation.size());
  for (const auto& a : params.articulation) {
    const Eigen::Matrix3d r = so3::exp(a) - Eigen::Matrix3d::Identity();
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) f.push_back(r(i, j));
    }
  }
  return f;
}

std::vector<Eigen::Vector3d> lbs_deform(std::span<const Eigen::Vector3d> vertices, const RowMatrixXd& weights,
                                        std::span<const RigidTransform> transforms) {
  if (weights.rows() != static_cast<Eigen::Index>(vertices.size()) ||
      weights.cols() != static_cast<Eigen::Index>(transforms.size())) {
    throw std::invalid_argument("lbs_deform: weights must be V x B");
  }
  check_rows_stochastic(weights, "lbs_deform");
  std::vector<Eigen::Vector3d> out(vertices.size());
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    Eigen::Matrix3d r = Eigen::Matrix3d::Zero();
    Eigen::Vector3d t = Eigen::Vector3d::Zero();
    for (std::size_t b = 0; b < transforms.size(); ++b) {
      const double w = weights(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(b));
      if (w == 0.0) continue;
      r += w * transforms[b].rotation;
      t += w * transforms[b].translation;
    }
    // Renormalize so float32-rounded weight rows still blend rigidly.
    const double sum = weights.row(static_cast<Eigen::Index>(i)).sum();
    out[i] = (r * vertices[i] + t) / sum;
  }
  return out;
}

void save_template(const std::filesystem::path& path, const HeadTemplate& tmpl) {
  tmpl.validate();
  nlohmann::json header = {{"magic", "GHT1"},
                           {"V", tmpl.num_vertices()},
                           {"K_id", tmpl.num_identity()},
                           {"K_expr", tmpl.num_expression()},
                           {"K_art", tmpl.num_corrective()},
                           {"B", tmpl.num_bones()},
                           {"F", tmpl.faces.size()},
                           {"endianness", "LE"}};
  nlohmann::json names = nlohmann::json::array();
  for (const auto& b : tmpl.bones) names.push_back(b.name);
  header["bones"] = names;
  detail::write_container(path, header, template_payload(tmpl), true);
}

HeadTemplate load_template(const std::filesystem::path& path) {
  const auto c = detail::read_container(path, "GHT1", true);
  const std::string ctx = path.string();
  if (c.header.value("endianness", std::string{}) != "LE") throw FormatError(ctx + ": unsupported endianness");
  const auto v = detail::header_count(c.header, "V", ctx);
  const auto k_id = detail::header_count(c.header, "K_id", ctx);
  const auto k_expr = detail::header_count(c.header, "K_expr", ctx);
  const auto k_art = detail::header_count(c.header, "K_art", ctx);
  const auto b = detail::header_count(c.header, "B", ctx);
  const auto f = detail::header_count(c.header, "F", ctx);
  const std::size_t expected =
      4 * (3 * v + 3 * v * (k_id + k_expr + k_art) + 3 * b + b + v * b + 3 * f);
  if (c.payload.size() != expected) throw FormatError(ctx + ": payload length does not match header counts");

  detail::PayloadReader r(c.payload, ctx);
  HeadTemplate t;
  t.vertices.resize(v);
  for (auto& p : t.vertices) {
    for (int i = 0; i < 3; ++i) p[i] = r.f32();
  }
  auto read_basis = [&](Eigen::MatrixXd& m, std::size_t k) {
    m.resize(static_cast<Eigen::Index>(3 * v), static_cast<Eigen::Index>(k));
    for (Eigen::Index row = 0; row < m.rows(); ++row) {
      for (Eigen::Index col = 0; col < m.cols(); ++col) m(row, col) = r.f32();
    }
  };
  read_basis(t.identity_basis, k_id);
  read_basis(t.expression_basis, k_expr);
  read_basis(t.articulation_corrective, k_art);
  t.bones.resize(b);
  const auto names = c.header.value("bones", nlohmann::json::array());
  for (std::size_t i = 0; i < b; ++i) {
    for (int j = 0; j < 3; ++j) t.bones[i].rest[j] = r.f32();
    t.bones[i].name = i < names.size() ? names[i].get<std::string>() : "bone_" + std::to_string(i);
  }
  for (auto& bone : t.bones) bone.parent = r.i32();
  t.skinning_weights.resize(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(b));
  for (Eigen::Index row = 0; row < t.skinning_weights.rows(); ++row) {
    for (Eigen::Index col = 0; col < t.skinning_weights.cols(); ++col) t.skinning_weights(row, col) = r.f32();
  }
  t.faces.resize(f);
  for (auto& face : t.faces) {
    for (auto& i : face) i = r.u32();
  }
  r.expect_end();
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(ctx + ": " + e.what());
  }
  return t;
}

}  // namespace headsplat
