#include "headsplat/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "headsplat/avatar.hpp"
#include "headsplat/errors.hpp"
#include "headsplat/parallel.hpp"
#include "headsplat/so3.hpp"

namespace headsplat {

namespace {

constexpr int kTile = RasterConfig::kTileSize;

using Matrix23d = Eigen::Matrix<double, 2, 3>;

// Per-splat values the backward pass needs besides Splat2D.
struct SplatDetail {
  Eigen::Vector3d point;
  Eigen::Matrix3d rotation;
  Eigen::Vector3d scale;
  Eigen::Matrix3d sigma;
  Matrix23d jac;
  std::array<bool, 3> color_passes{};  // raw color inside [0, 1]
};

struct Projection {
  Splat2D splat;
  SplatDetail detail;
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // binned pixel range (inclusive)
};

// Returns false when the Gaussian is culled.
bool project_one(const PosedGaussians& posed, std::size_t m, const Camera& cam, const RasterConfig& cfg,
                 Projection& out) {
  const Eigen::Vector3d& p = posed.centers[m];
  const double d = -p.z();
  if (!(d >= cam.near_clip) || d > cam.far_clip) return false;

  SplatDetail& det = out.detail;
  det.point = p;
  det.rotation = so3::quat_to_matrix(so3::quat_normalized(posed.rotations[m]));
  det.scale = posed.log_scales[m].array().exp();
  const Eigen::Matrix3d ms = det.rotation * det.scale.asDiagonal();
  det.sigma = ms * ms.transpose();
  const double inv_d = 1.0 / d;
  det.jac << cam.fx * inv_d, 0.0, cam.fx * p.x() * inv_d * inv_d,
             0.0, -cam.fy * inv_d, -cam.fy * p.y() * inv_d * inv_d;

  Splat2D& s = out.splat;
  s.gaussian = static_cast<std::uint32_t>(m);
  s.mean = {cam.cx + cam.fx * p.x() * inv_d, cam.cy - cam.fy * p.y() * inv_d};
  s.cov = det.jac * det.sigma * det.jac.transpose();
  s.cov(0, 0) += cfg.cov2d_floor;
  s.cov(1, 1) += cfg.cov2d_floor;
  s.cov(0, 1) = s.cov(1, 0) = 0.5 * (s.cov(0, 1) + s.cov(1, 0));
  const double det2 = s.cov.determinant();
  if (!(det2 > 0.0)) return false;
  s.conic = {s.cov(1, 1) / det2, -s.cov(0, 1) / det2, s.cov(0, 0) / det2};
  s.depth = d;
  s.opacity = logistic(posed.opacity_logits[m]);
  for (int c = 0; c < 3; ++c) {
    const double raw = posed.colors[m][c];
    det.color_passes[c] = raw >= 0.0 && raw <= 1.0;
    s.color[c] = std::clamp(raw, 0.0, 1.0);
  }

  // Bounding box of the level set where opacity * falloff == tail_epsilon.
  if (s.opacity <= cfg.tail_epsilon) return false;
  const double k = std::sqrt(2.0 * std::log(s.opacity / cfg.tail_epsilon));
  const double ex = k * std::sqrt(s.cov(0, 0));
  const double ey = k * std::sqrt(s.cov(1, 1));
  out.x0 = std::max(0, static_cast<int>(std::ceil(s.mean.x() - ex - 0.5)));
  out.x1 = std::min(cam.width - 1, static_cast<int>(std::floor(s.mean.x() + ex - 0.5)));
  out.y0 = std::max(0, static_cast<int>(std::ceil(s.mean.y() - ey - 0.5)));
  out.y1 = std::min(cam.height - 1, static_cast<int>(std::floor(s.mean.y() + ey - 0.5)));
  return true;
}

void check_posed(const PosedGaussians& posed) {
  const std::size_t m = posed.centers.size();
  if (posed.log_scales.size() != m || posed.rotations.size() != m || posed.opacity_logits.size() != m ||
      posed.colors.size() != m) {
    throw std::invalid_argument("posed Gaussian attribute arrays disagree in length");
  }
}

inline double falloff_power(const Eigen::Vector3d& conic, double dx, double dy) {
  return -0.5 * (conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy);
}

}  // namespace

struct RenderState {
  Camera camera;
  RasterConfig config;
  std::size_t num_gaussians = 0;
  std::vector<Splat2D> splats;        // depth-sorted, ties by Gaussian index
  std::vector<SplatDetail> details;   // parallel to splats
  std::vector<double> min_power;      // below this falloff power, opacity * falloff < tail_epsilon
  int tiles_x = 0, tiles_y = 0;
  std::vector<std::uint32_t> tile_offsets;  // CSR over tiles
  std::vector<std::uint32_t> tile_entries;  // indices into splats, front to back
  std::vector<std::array<int, 4>> boxes;    // binned pixel range x0, x1, y0, y1 per splat
  std::vector<std::uint32_t> pixel_end;     // one past the last tile entry composited per pixel
  std::vector<double> pixel_t;              // transmittance left after pixel_end
};

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw std::invalid_argument("camera focal length must be positive");
  if (width <= 0 || height <= 0) throw std::invalid_argument("camera image size must be positive");
  if (!(near_clip > 0.0) || !(near_clip < far_clip)) throw std::invalid_argument("camera clip range is invalid");
}

Camera Camera::normalized(int width, int height, double head_extent, double coverage) {
  Camera c;
  c.fx = c.fy = coverage * width / head_extent;
  c.cx = 0.5 * width;
  c.cy = 0.5 * height;
  c.width = width;
  c.height = height;
  c.validate();
  return c;
}

GaussianGradients GaussianGradients::zeros(std::size_t count) {
  GaussianGradients g;
  g.centers.assign(count, Eigen::Vector3d::Zero());
  g.log_scales.assign(count, Eigen::Vector3d::Zero());
  g.rotation_tangents.assign(count, Eigen::Vector3d::Zero());
  g.opacity_logits.assign(count, 0.0);
  g.colors.assign(count, Eigen::Vector3d::Zero());
  return g;
}

std::vector<Splat2D> project_gaussians(const PosedGaussians& posed, const Camera& camera, const RasterConfig& config) {
  camera.validate();
  check_posed(posed);
  std::vector<Splat2D> out;
  Projection p;
  for (std::size_t m = 0; m < posed.size(); ++m) {
    if (project_one(posed, m, camera, config, p)) out.push_back(p.splat);
  }
  return out;
}

RenderedFrame render(const PosedGaussians& posed, const Camera& camera, const RasterConfig& config) {
  camera.validate();
  check_posed(posed);
  const std::size_t count = posed.size();
  const int threads = config.threads;

  std::vector<Projection> projected(count);
  std::vector<char> visible(count, 0);
  parallel_for(count, threads, 2048, [&](std::size_t begin, std::size_t end) {
    for (std::size_t m = begin; m < end; ++m) visible[m] = project_one(posed, m, camera, config, projected[m]);
  });

  std::vector<std::uint32_t> order;
  order.reserve(count);
  for (std::size_t m = 0; m < count; ++m) {
    if (visible[m]) order.push_back(static_cast<std::uint32_t>(m));
  }
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    const double da = projected[a].splat.depth, db = projected[b].splat.depth;
    return da < db || (da == db && a < b);
  });

  auto state = std::make_shared<RenderState>();
  state->camera = camera;
  state->config = config;
  state->num_gaussians = count;
  state->tiles_x = (camera.width + kTile - 1) / kTile;
  state->tiles_y = (camera.height + kTile - 1) / kTile;
  const int tiles = state->tiles_x * state->tiles_y;
  state->splats.reserve(order.size());
  state->details.reserve(order.size());
  state->min_power.reserve(order.size());
  for (auto m : order) {
    state->splats.push_back(projected[m].splat);
    state->details.push_back(projected[m].detail);
    state->min_power.push_back(std::log(config.tail_epsilon / projected[m].splat.opacity));
    state->boxes.push_back({projected[m].x0, projected[m].x1, projected[m].y0, projected[m].y1});
  }

  // Bin in global depth order so every tile list is already front to back.
  std::vector<std::uint32_t> counts(tiles, 0);
  auto tile_range = [&](const Projection& p, int& tx0, int& tx1, int& ty0, int& ty1) {
    if (p.x1 < p.x0 || p.y1 < p.y0) return false;
    tx0 = p.x0 / kTile;
    tx1 = p.x1 / kTile;
    ty0 = p.y0 / kTile;
    ty1 = p.y1 / kTile;
    return true;
  };
  for (auto m : order) {
    int tx0, tx1, ty0, ty1;
    if (!tile_range(projected[m], tx0, tx1, ty0, ty1)) continue;
    for (int ty = ty0; ty <= ty1; ++ty) {
      for (int tx = tx0; tx <= tx1; ++tx) ++counts[ty * state->tiles_x + tx];
    }
  }
  state->tile_offsets.assign(tiles + 1, 0);
  for (int t = 0; t < tiles; ++t) state->tile_offsets[t + 1] = state->tile_offsets[t] + counts[t];
  state->tile_entries.resize(state->tile_offsets[tiles]);
  std::vector<std::uint32_t> cursor(state->tile_offsets.begin(), state->tile_offsets.end() - 1);
  for (std::uint32_t rank = 0; rank < order.size(); ++rank) {
    int tx0, tx1, ty0, ty1;
    if (!tile_range(projected[order[rank]], tx0, tx1, ty0, ty1)) continue;
    for (int ty = ty0; ty <= ty1; ++ty) {
      for (int tx = tx0; tx <= tx1; ++tx) state->tile_entries[cursor[ty * state->tiles_x + tx]++] = rank;
    }
  }

  RenderedFrame frame;
  frame.rgb = Image(camera.width, camera.height, 3);
  frame.alpha = Image(camera.width, camera.height, 1);
  const std::size_t pixels = static_cast<std::size_t>(camera.width) * camera.height;
  state->pixel_end.assign(pixels, 0);
  state->pixel_t.assign(pixels, 1.0);

  // Splat-major within a tile: each splat visits the pixels of its box, and
  // every pixel still sees splats front to back.
  const double cutoff = config.transmittance_cutoff;
  const double alpha_max = config.alpha_max;
  parallel_for(static_cast<std::size_t>(tiles), threads, 1, [&](std::size_t begin, std::size_t end) {
    std::array<double, kTile * kTile> t;
    std::array<Eigen::Vector3d, kTile * kTile> color;
    std::array<std::uint32_t, kTile * kTile> stop;
    for (std::size_t tile = begin; tile < end; ++tile) {
      const int tx = static_cast<int>(tile) % state->tiles_x;
      const int ty = static_cast<int>(tile) / state->tiles_x;
      const int bx0 = tx * kTile, by0 = ty * kTile;
      const int bx1 = std::min(camera.width, bx0 + kTile) - 1;
      const int by1 = std::min(camera.height, by0 + kTile) - 1;
      const std::uint32_t first = state->tile_offsets[tile];
      const std::uint32_t last = state->tile_offsets[tile + 1];
      t.fill(1.0);
      color.fill(Eigen::Vector3d::Zero());
      stop.fill(last);
      int live = (bx1 - bx0 + 1) * (by1 - by0 + 1);
      for (std::uint32_t e = first; e < last && live > 0; ++e) {
        const std::uint32_t rank = state->tile_entries[e];
        const Splat2D& s = state->splats[rank];
        const auto& box = state->boxes[rank];
        const double min_power = state->min_power[rank];
        for (int y = std::max(by0, box[2]); y <= std::min(by1, box[3]); ++y) {
          for (int x = std::max(bx0, box[0]); x <= std::min(bx1, box[1]); ++x) {
            const int local = (y - by0) * kTile + (x - bx0);
            if (stop[local] != last) continue;
            const double power = falloff_power(s.conic, x + 0.5 - s.mean.x(), y + 0.5 - s.mean.y());
            if (power < min_power) continue;
            const double alpha = std::min(alpha_max, s.opacity * std::exp(power));
            color[local] += s.color * (alpha * t[local]);
            t[local] *= 1.0 - alpha;
            if (t[local] < cutoff) {
              stop[local] = e + 1;
              --live;
            }
          }
        }
      }
      for (int y = by0; y <= by1; ++y) {
        for (int x = bx0; x <= bx1; ++x) {
          const int local = (y - by0) * kTile + (x - bx0);
          for (int c = 0; c < 3; ++c) frame.rgb.at(x, y, c) = color[local][c];
          frame.alpha.at(x, y, 0) = 1.0 - t[local];
          const std::size_t pix = static_cast<std::size_t>(y) * camera.width + x;
          state->pixel_end[pix] = stop[local];
          state->pixel_t[pix] = t[local];
        }
      }
    }
  });
  frame.state = std::move(state);
  return frame;
}

Image brute_force_render(const PosedGaussians& posed, const Camera& cam, const RasterConfig& config) {
  cam.validate();
  check_posed(posed);
  struct Flat {
    std::uint32_t index;
    double depth, u, v, qa, qb, qc, opacity;
    Eigen::Vector3d color;
  };
  // Straight-line projection, written independently of project_one.
  std::vector<Flat> splats;
  for (std::size_t m = 0; m < posed.size(); ++m) {
    const Eigen::Vector3d& p = posed.centers[m];
    const double depth = -p.z();
    if (!(depth >= cam.near_clip) || depth > cam.far_clip) continue;
    const Eigen::Quaterniond q(posed.rotations[m][0], posed.rotations[m][1], posed.rotations[m][2],
                               posed.rotations[m][3]);
    const Eigen::Matrix3d r = q.normalized().toRotationMatrix();
    Eigen::Matrix3d s = Eigen::Matrix3d::Zero();
    for (int i = 0; i < 3; ++i) s(i, i) = std::exp(2.0 * posed.log_scales[m][i]);
    const Eigen::Matrix3d sigma = r * s * r.transpose();
    Eigen::Matrix<double, 2, 3> j;
    j << cam.fx / depth, 0.0, cam.fx * p.x() / (depth * depth), 0.0, -cam.fy / depth, -cam.fy * p.y() / (depth * depth);
    Eigen::Matrix2d cov = j * sigma * j.transpose() + config.cov2d_floor * Eigen::Matrix2d::Identity();
    cov(0, 1) = cov(1, 0) = 0.5 * (cov(0, 1) + cov(1, 0));
    const Eigen::Matrix2d conic = cov.inverse();
    Eigen::Vector3d color;
    for (int c = 0; c < 3; ++c) color[c] = std::min(1.0, std::max(0.0, posed.colors[m][c]));
    const double opacity = 1.0 / (1.0 + std::exp(-posed.opacity_logits[m]));
    splats.push_back({static_cast<std::uint32_t>(m), depth, cam.cx + cam.fx * p.x() / depth,
                      cam.cy - cam.fy * p.y() / depth, conic(0, 0), conic(0, 1), conic(1, 1), opacity, color});
  }
  std::stable_sort(splats.begin(), splats.end(), [](const Flat& a, const Flat& b) { return a.depth < b.depth; });

  Image out(cam.width, cam.height, 4);
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      double t = 1.0;
      double rgb[3] = {0.0, 0.0, 0.0};
      for (const Flat& s : splats) {
        const double dx = x + 0.5 - s.u, dy = y + 0.5 - s.v;
        const double w = std::exp(-0.5 * (s.qa * dx * dx + 2.0 * s.qb * dx * dy + s.qc * dy * dy));
        const double alpha = std::min(config.alpha_max, s.opacity * w);
        for (int c = 0; c < 3; ++c) rgb[c] += s.color[c] * alpha * t;
        t *= 1.0 - alpha;
      }
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = rgb[c];
      out.at(x, y, 3) = 1.0 - t;
    }
  }
  return out;
}

GaussianGradients render_backward(const RenderedFrame& frame, const Image& grad_rgb, const Image* grad_alpha) {
  if (!frame.state) throw InvalidStateError("render_backward: frame has no saved intermediates");
  const RenderState& st = *frame.state;
  const Camera& cam = st.camera;
  if (grad_rgb.width != cam.width || grad_rgb.height != cam.height || grad_rgb.channels != 3) {
    throw std::invalid_argument("render_backward: grad_rgb must be H x W x 3");
  }
  if (grad_alpha && (grad_alpha->width != cam.width || grad_alpha->height != cam.height || grad_alpha->channels != 1)) {
    throw std::invalid_argument("render_backward: grad_alpha must be H x W x 1");
  }
  const int tiles = st.tiles_x * st.tiles_y;
  const double alpha_max = st.config.alpha_max;

  // Per tile-entry 2D gradients: mean (2), conic (3), opacity, color (3).
  constexpr int kSlots = 9;
  std::vector<double> entry_grads(st.tile_entries.size() * kSlots, 0.0);

  // Replays each tile back to front, recovering the transmittance in front
  // of every splat from the one behind it.
  parallel_for(static_cast<std::size_t>(tiles), st.config.threads, 1, [&](std::size_t begin, std::size_t end) {
    constexpr int kPixels = kTile * kTile;
    std::array<double, kPixels> t, behind_alpha, g_alpha;
    std::array<Eigen::Vector3d, kPixels> behind_color, g_color;
    std::array<std::uint32_t, kPixels> stop;
    for (std::size_t tile = begin; tile < end; ++tile) {
      const int tx = static_cast<int>(tile) % st.tiles_x;
      const int ty = static_cast<int>(tile) / st.tiles_x;
      const int bx0 = tx * kTile, by0 = ty * kTile;
      const int bx1 = std::min(cam.width, bx0 + kTile) - 1;
      const int by1 = std::min(cam.height, by0 + kTile) - 1;
      const std::uint32_t first = st.tile_offsets[tile];
      std::uint32_t top = first;
      for (int y = by0; y <= by1; ++y) {
        for (int x = bx0; x <= bx1; ++x) {
          const int local = (y - by0) * kTile + (x - bx0);
          const std::size_t pix = static_cast<std::size_t>(y) * cam.width + x;
          g_color[local] = {grad_rgb.at(x, y, 0), grad_rgb.at(x, y, 1), grad_rgb.at(x, y, 2)};
          g_alpha[local] = grad_alpha ? grad_alpha->at(x, y, 0) : 0.0;
          const bool active = !(g_color[local].isZero(0.0) && g_alpha[local] == 0.0);
          stop[local] = active ? st.pixel_end[pix] : first;
          top = std::max(top, stop[local]);
          t[local] = st.pixel_t[pix];
          behind_alpha[local] = 0.0;
          behind_color[local].setZero();
        }
      }
      for (std::uint32_t e = top; e-- > first;) {
        const std::uint32_t rank = st.tile_entries[e];
        const Splat2D& s = st.splats[rank];
        const auto& box = st.boxes[rank];
        const double min_power = st.min_power[rank];
        double acc[kSlots] = {};
        for (int y = std::max(by0, box[2]); y <= std::min(by1, box[3]); ++y) {
          for (int x = std::max(bx0, box[0]); x <= std::min(bx1, box[1]); ++x) {
            const int local = (y - by0) * kTile + (x - bx0);
            if (e >= stop[local]) continue;
            const double dx = x + 0.5 - s.mean.x(), dy = y + 0.5 - s.mean.y();
            const double power = falloff_power(s.conic, dx, dy);
            if (power < min_power) continue;
            const double weight = std::exp(power);
            const double raw = s.opacity * weight;
            const double alpha = std::min(alpha_max, raw);
            const double t_front = t[local] / (1.0 - alpha);
            const Eigen::Vector3d& gc = g_color[local];
            const double contrib = alpha * t_front;
            for (int c = 0; c < 3; ++c) acc[6 + c] += gc[c] * contrib;
            const double d_alpha =
                t_front * (gc.dot(s.color - behind_color[local]) + g_alpha[local] * (1.0 - behind_alpha[local]));
            behind_color[local] = s.color * alpha + (1.0 - alpha) * behind_color[local];
            behind_alpha[local] = alpha + (1.0 - alpha) * behind_alpha[local];
            t[local] = t_front;
            if (raw > alpha_max) continue;
            acc[5] += d_alpha * weight;
            const double d_power = d_alpha * s.opacity * weight;
            acc[0] += d_power * (s.conic[0] * dx + s.conic[1] * dy);
            acc[1] += d_power * (s.conic[1] * dx + s.conic[2] * dy);
            acc[2] += d_power * (-0.5 * dx * dx);
            acc[3] += d_power * (-dx * dy);
            acc[4] += d_power * (-0.5 * dy * dy);
          }
        }
        std::copy(acc, acc + kSlots, &entry_grads[static_cast<std::size_t>(e) * kSlots]);
      }
    }
  });

  // Tile-ordered reduction onto splats keeps the sum independent of threads.
  std::vector<std::array<double, kSlots>> splat_grads(st.splats.size());
  for (auto& g : splat_grads) g.fill(0.0);
  for (std::size_t e = 0; e < st.tile_entries.size(); ++e) {
    auto& dst = splat_grads[st.tile_entries[e]];
    const double* src = &entry_grads[e * kSlots];
    for (int k = 0; k < kSlots; ++k) dst[k] += src[k];
  }

  GaussianGradients out = GaussianGradients::zeros(st.num_gaussians);
  parallel_for(st.splats.size(), st.config.threads, 1024, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const Splat2D& s = st.splats[i];
      const SplatDetail& det = st.details[i];
      const auto& g = splat_grads[i];
      const std::size_t m = s.gaussian;

      for (int c = 0; c < 3; ++c) out.colors[m][c] = det.color_passes[c] ? g[6 + c] : 0.0;
      out.opacity_logits[m] = g[5] * s.opacity * (1.0 - s.opacity);

      // conic -> 2D covariance: dL/dCov = -Q G Q with G the symmetric
      // matrix gradient with respect to Q.
      Eigen::Matrix2d q;
      q << s.conic[0], s.conic[1], s.conic[1], s.conic[2];
      Eigen::Matrix2d gq;
      gq << g[2], 0.5 * g[3], 0.5 * g[3], g[4];
      const Eigen::Matrix2d g_cov = -q * gq * q;

      // cov2d = J Sigma J^T + floor
      const Eigen::Matrix3d g_sigma = det.jac.transpose() * g_cov * det.jac;
      const Matrix23d g_jac = 2.0 * g_cov * det.jac * det.sigma;

      const Eigen::Vector2d g_mean(g[0], g[1]);
      Eigen::Vector3d g_point = det.jac.transpose() * g_mean;
      const double d = -det.point.z();
      const double d2 = d * d, d3 = d2 * d;
      const double x = det.point.x(), y = det.point.y();
      g_point.x() += g_jac(0, 2) * cam.fx / d2;
      g_point.y() += g_jac(1, 2) * (-cam.fy / d2);
      g_point.z() += g_jac(0, 0) * cam.fx / d2 + g_jac(0, 2) * 2.0 * cam.fx * x / d3 +
                     g_jac(1, 1) * (-cam.fy / d2) + g_jac(1, 2) * (-2.0 * cam.fy * y / d3);
      out.centers[m] = g_point;

      // Sigma = M M^T with M = R S.
      const Eigen::Matrix3d ms = det.rotation * det.scale.asDiagonal();
      const Eigen::Matrix3d g_m = 2.0 * g_sigma * ms;
      const Eigen::Matrix3d g_r = g_m * det.scale.asDiagonal();
      const Eigen::Matrix3d rt_gm = det.rotation.transpose() * g_m;
      for (int k = 0; k < 3; ++k) out.log_scales[m][k] = rt_gm(k, k) * det.scale[k];
      out.rotation_tangents[m] = so3::tangent_gradient(det.rotation, g_r);
    }
  });
  return out;
}

}  // namespace headsplat
