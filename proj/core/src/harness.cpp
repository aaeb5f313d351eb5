#include "headsplat/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "headsplat/errors.hpp"
#include "headsplat/losses.hpp"
#include "headsplat/parallel.hpp"
#include "headsplat/random.hpp"

namespace headsplat {
namespace {

namespace fs = std::filesystem;

nlohmann::json vec3(const Eigen::Vector3d& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

Eigen::Vector3d vec3_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw FormatError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string frame_stem(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04d", i);
  return buf;
}

// Mixture of two sinusoids of frame index; zero mean over long runs.
struct SmoothCurve {
  double f1, f2, p1, p2;
  explicit SmoothCurve(Rng& rng)
      : f1(rng.uniform(0.5, 1.5)), f2(rng.uniform(1.5, 3.0)), p1(rng.uniform(0.0, 2.0 * M_PI)),
        p2(rng.uniform(0.0, 2.0 * M_PI)) {}
  double operator()(double u) const {
    return 0.7 * std::sin(2.0 * M_PI * f1 * u + p1) + 0.3 * std::sin(2.0 * M_PI * f2 * u + p2);
  }
};

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

nlohmann::json params_to_json(const FlameParams& p) {
  nlohmann::json art = nlohmann::json::array();
  for (const auto& a : p.articulation) art.push_back(vec3(a));
  return {{"expression", p.expression},
          {"articulation", art},
          {"head_rotation", vec3(p.head_rotation)},
          {"head_translation", vec3(p.head_translation)}};
}

FlameParams params_from_json(const nlohmann::json& j) {
  try {
    FlameParams p;
    p.expression = j.at("expression").get<std::vector<double>>();
    for (const auto& a : j.at("articulation")) p.articulation.push_back(vec3_from(a));
    p.head_rotation = vec3_from(j.at("head_rotation"));
    p.head_translation = vec3_from(j.at("head_translation"));
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed FLAME parameters: ") + e.what());
  }
}

nlohmann::json camera_to_json(const Camera& c, int id) {
  return {{"id", id},
          {"focal", {c.fx, c.fy}},
          {"principal", {c.cx, c.cy}},
          {"size", {c.width, c.height}},
          {"near", c.near_clip},
          {"far", c.far_clip}};
}

Camera camera_from_json(const nlohmann::json& j) {
  try {
    Camera c;
    c.fx = j.at("focal").at(0).get<double>();
    c.fy = j.at("focal").at(1).get<double>();
    c.cx = j.at("principal").at(0).get<double>();
    c.cy = j.at("principal").at(1).get<double>();
    c.width = j.at("size").at(0).get<int>();
    c.height = j.at("size").at(1).get<int>();
    if (j.contains("near")) c.near_clip = j["near"].get<double>();
    if (j.contains("far")) c.far_clip = j["far"].get<double>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed camera: ") + e.what());
  }
}

CanonicalAvatar synthetic_subject(const HeadTemplate& tmpl, std::uint64_t seed, const SyntheticSubjectOptions& o) {
  CanonicalAvatar a = init_avatar(upsample_anchors(tmpl, o.gaussians, seed));
  Rng rng(seed ^ 0x5bd1e995ULL);
  for (auto& off : a.offsets) off = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * o.offset_sigma;

  struct Wave {
    Eigen::Vector3d k;
    double phase;
    Eigen::Vector3d amplitude;
  };
  std::vector<Wave> waves;
  const double amp = 0.3 / std::sqrt(static_cast<double>(std::max(o.color_waves, 1)));
  for (int w = 0; w < o.color_waves; ++w) {
    Wave wave;
    wave.k = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * o.color_frequency;
    wave.phase = rng.uniform(0.0, 2.0 * M_PI);
    wave.amplitude = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * amp;
    waves.push_back(wave);
  }
  const Eigen::Vector3d base(0.62, 0.45, 0.38);
  for (std::size_t m = 0; m < a.size(); ++m) {
    Eigen::Vector3d c = base;
    for (const auto& w : waves) c += w.amplitude * std::sin(w.k.dot(a.anchors[m]) + w.phase);
    a.colors[m] = c.cwiseMax(0.02).cwiseMin(0.98);
  }
  return a;
}

std::vector<FlameParams> smooth_trajectory(const HeadTemplate& tmpl, int n_frames, std::uint64_t seed,
                                           const SyntheticSubjectOptions& o) {
  if (n_frames < 0) throw std::invalid_argument("smooth_trajectory: negative frame count");
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const int k = tmpl.num_expression();
  const int joints = tmpl.num_bones() - 1;
  std::vector<SmoothCurve> curves;
  for (int i = 0; i < k + 3 * joints + 6; ++i) curves.emplace_back(rng);
  std::vector<FlameParams> out;
  for (int f = 0; f < n_frames; ++f) {
    const double u = n_frames > 1 ? static_cast<double>(f) / (n_frames - 1) : 0.0;
    FlameParams p = FlameParams::rest(tmpl);
    int c = 0;
    for (int i = 0; i < k; ++i) p.expression[i] = o.expression_sigma * curves[c++](u);
    for (int j = 0; j < joints; ++j) {
      for (int a = 0; a < 3; ++a) p.articulation[j][a] = o.articulation_amplitude * curves[c++](u);
    }
    for (int a = 0; a < 3; ++a) p.head_rotation[a] = o.head_rotation_amplitude[a] * curves[c++](u);
    for (int a = 0; a < 3; ++a) p.head_translation[a] = o.translation_amplitude * curves[c++](u);
    p.head_translation.z() -= kViewingDistance;
    out.push_back(std::move(p));
  }
  return out;
}

const Camera& SubjectDataset::camera(int id) const {
  for (const auto& [cid, cam] : cameras) {
    if (cid == id) return cam;
  }
  throw FormatError("dataset references undefined camera " + std::to_string(id));
}

Image SubjectDataset::image(std::size_t frame) const {
  return read_png(root / frames.at(frame).image).rgb;
}

std::optional<FlameParams> SubjectDataset::params(std::size_t frame) const {
  const auto& f = frames.at(frame);
  if (!f.params) return std::nullopt;
  const nlohmann::json j = read_json(root / *f.params);
  if (!j.contains("params")) return std::nullopt;
  return params_from_json(j["params"]);
}

void SubjectDataset::save_manifest() const {
  nlohmann::json j;
  j["version"] = 1;
  j["template_crc"] = template_crc;
  j["cameras"] = nlohmann::json::array();
  for (const auto& [id, cam] : cameras) j["cameras"].push_back(camera_to_json(cam, id));
  j["frames"] = nlohmann::json::array();
  for (const auto& f : frames) {
    nlohmann::json e = {{"image", f.image}, {"camera_id", f.camera_id}};
    if (f.params) e["params"] = *f.params;
    j["frames"].push_back(e);
  }
  write_text(root / "manifest.json", j.dump(2) + "\n");
}

SubjectDataset SubjectDataset::load(const fs::path& root) {
  const nlohmann::json j = read_json(root / "manifest.json");
  SubjectDataset d;
  d.root = root;
  try {
    if (j.at("version").get<int>() != 1) throw FormatError("unsupported manifest version");
    d.template_crc = j.at("template_crc").get<std::uint32_t>();
    for (const auto& c : j.at("cameras")) d.cameras.emplace_back(c.at("id").get<int>(), camera_from_json(c));
    for (const auto& f : j.at("frames")) {
      DatasetFrame df;
      df.image = f.at("image").get<std::string>();
      df.camera_id = f.at("camera_id").get<int>();
      if (f.contains("params") && !f["params"].is_null()) df.params = f["params"].get<std::string>();
      d.frames.push_back(std::move(df));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((root / "manifest.json").string() + ": " + e.what());
  }
  for (const auto& f : d.frames) {
    d.camera(f.camera_id);
    if (!fs::exists(root / f.image)) throw FormatError("manifest lists a missing image: " + (root / f.image).string());
    if (f.params && !fs::exists(root / *f.params)) {
      throw FormatError("manifest lists a missing sidecar: " + (root / *f.params).string());
    }
  }
  return d;
}

SubjectDataset make_synthetic_subject(const HeadTemplate& tmpl, std::uint64_t seed, int n_frames, const Camera& camera,
                                      const fs::path& out_dir, const SyntheticSubjectOptions& o) {
  camera.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());

  const CanonicalAvatar avatar = synthetic_subject(tmpl, seed, o);
  save_avatar(out_dir / "subject.gha", avatar);
  const Rig rig(tmpl, avatar);
  const auto trajectory = smooth_trajectory(tmpl, n_frames, seed, o);

  SubjectDataset d;
  d.root = out_dir;
  d.template_crc = tmpl.crc();
  d.cameras.emplace_back(0, camera);
  for (int i = 0; i < n_frames; ++i) {
    const std::string stem = frame_stem(i);
    const RenderedFrame r = render(rig.pose(avatar, trajectory[i]), camera, o.raster);
    write_png(out_dir / (stem + ".png"), r.rgb, &r.alpha);
    const nlohmann::json sidecar = {{"camera_id", 0}, {"params", params_to_json(trajectory[i])}};
    write_text(out_dir / (stem + ".json"), sidecar.dump(2) + "\n");
    d.frames.push_back({stem + ".png", stem + ".json", 0});
  }
  d.save_manifest();
  return d;
}

nlohmann::json EvalReport::to_json() const {
  auto finite_or_null = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  nlohmann::json j;
  j["conditioning"] = conditioning;
  j["frames"] = nlohmann::json::array();
  for (const auto& f : frames) {
    j["frames"].push_back({{"frame", f.frame}, {"psnr", finite_or_null(f.psnr)}, {"ssim", f.ssim}});
  }
  j["mean_psnr"] = finite_or_null(mean_psnr);
  j["mean_ssim"] = mean_ssim;
  j["fitted_params"] = fitted_params;
  return j;
}

std::string EvalReport::to_csv() const {
  std::string out = "frame,psnr,ssim\n";
  char buf[96];
  for (const auto& f : frames) {
    if (std::isfinite(f.psnr)) {
      std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f\n", f.frame, f.psnr, f.ssim);
    } else {
      std::snprintf(buf, sizeof buf, "%zu,inf,%.6f\n", f.frame, f.ssim);
    }
    out += buf;
  }
  return out;
}

void EvalReport::write(const fs::path& json_path, const fs::path& csv_path) const {
  write_text(json_path, to_json().dump(2) + "\n");
  write_text(csv_path, to_csv());
}

FlameParams viewing_params(const HeadTemplate& tmpl, std::span<const double> psi, std::span<const double> theta,
                           std::span<const double> pose) {
  auto p = FlameParams::rest(tmpl);
  if (!psi.empty()) {
    if (psi.size() != p.expression.size()) throw std::invalid_argument("psi size does not match the template");
    std::copy(psi.begin(), psi.end(), p.expression.begin());
  }
  if (!theta.empty()) {
    if (theta.size() != 3 * p.articulation.size()) throw std::invalid_argument("theta size does not match the template");
    for (std::size_t j = 0; j < p.articulation.size(); ++j) {
      p.articulation[j] = Eigen::Vector3d(theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]);
    }
  }
  if (!pose.empty() && pose.size() != 6) throw std::invalid_argument("pose must have 6 entries");
  if (!pose.empty()) {
    p.head_rotation = Eigen::Vector3d(pose[0], pose[1], pose[2]);
    p.head_translation = Eigen::Vector3d(pose[3], pose[4], pose[5]);
  }
  p.head_translation.z() -= kViewingDistance;
  return p;
}

std::vector<TrainingFrame> training_frames(const SubjectDataset& dataset, const CanonicalAvatar& avatar,
                                           const HeadTemplate& tmpl, std::span<const std::size_t> indices,
                                           const FitFlameOptions& fit, bool* fitted) {
  check_compatible(avatar, tmpl);
  std::optional<Rig> rig;
  std::vector<TrainingFrame> out;
  if (fitted) *fitted = false;
  for (std::size_t idx : indices) {
    if (idx >= dataset.size()) throw std::out_of_range("frame index out of range");
    TrainingFrame f{dataset.image(idx), {}, dataset.camera(dataset.frames[idx].camera_id)};
    if (auto p = dataset.params(idx)) {
      f.params = std::move(*p);
    } else {
      if (!rig) rig.emplace(tmpl, avatar);
      f.params = fit_flame(*rig, avatar, f.image, f.camera, viewing_params(tmpl), fit).params;
      if (fitted) *fitted = true;
    }
    out.push_back(std::move(f));
  }
  return out;
}

EvalReport evaluate(const SubjectDataset& dataset, const CanonicalAvatar& avatar, const HeadTemplate& tmpl,
                    const EvalOptions& o) {
  check_compatible(avatar, tmpl);
  const std::size_t n = dataset.size();
  if (o.conditioning == 0 || n < 2 * o.conditioning) {
    throw std::invalid_argument("evaluate: need at least " + std::to_string(2 * std::max<std::size_t>(o.conditioning, 1)) +
                                " frames for " + std::to_string(o.conditioning) + " conditioning views, dataset has " +
                                std::to_string(n));
  }
  const FrameSplit split = few_to_many_split(n, o.conditioning, n - o.conditioning, o.seed);
  const Rig rig(tmpl, avatar);
  EvalReport report;
  report.conditioning = split.conditioning;
  std::vector<double> psnrs, ssims;
  for (std::size_t idx : split.reconstruction) {
    const Image target = dataset.image(idx);
    const Camera& cam = dataset.camera(dataset.frames[idx].camera_id);
    std::optional<FlameParams> params = dataset.params(idx);
    if (!params) {
      params = fit_flame(rig, avatar, target, cam, viewing_params(tmpl), o.fit).params;
      report.fitted_params = true;
    }
    const RenderedFrame r = render(rig.pose(avatar, *params), cam, o.raster);
    FrameMetrics fm;
    fm.frame = idx;
    fm.psnr = psnr(r.rgb, target);
    fm.ssim = ssim(r.rgb, target).value;
    report.frames.push_back(fm);
    psnrs.push_back(fm.psnr);
    ssims.push_back(fm.ssim);
  }
  report.mean_psnr = mean(psnrs);
  report.mean_ssim = mean(ssims);
  return report;
}

nlohmann::json BenchReport::to_json() const {
  nlohmann::json j;
  j["width"] = width;
  j["height"] = height;
  j["gaussians"] = gaussians;
  j["threads"] = threads;
  j["frames"] = total_ms.size();
  j["pose_ms"] = pose_ms;
  j["render_ms"] = render_ms;
  j["total_ms"] = total_ms;
  j["mean_pose_ms"] = mean(pose_ms);
  j["mean_render_ms"] = mean(render_ms);
  j["mean_total_ms"] = mean(total_ms);
  j["mean_fps"] = mean_fps;
  j["median_fps"] = median_fps;
  j["pose_per_second"] = pose_per_second;
  j["note"] = "pose_avatar + render only; no estimator network or preprocessing is timed";
  return j;
}

BenchReport bench_animate(const CanonicalAvatar& avatar, const HeadTemplate& tmpl, const Camera& camera, int n_frames,
                          std::uint64_t seed, const RasterConfig& raster) {
  using Clock = std::chrono::steady_clock;
  auto ms = [](Clock::time_point a, Clock::time_point b) { return std::chrono::duration<double, std::milli>(b - a).count(); };
  if (n_frames <= 0) throw std::invalid_argument("bench_animate: frame count must be positive");
  check_compatible(avatar, tmpl);
  camera.validate();
  const Rig rig(tmpl, avatar);
  const auto params = smooth_trajectory(tmpl, n_frames, seed);
  AnimationConfig anim;
  anim.threads = raster.threads;

  BenchReport r;
  r.width = camera.width;
  r.height = camera.height;
  r.gaussians = avatar.size();
  r.threads = resolve_threads(raster.threads);
  std::vector<double> fps;
  for (int f = 0; f < n_frames; ++f) {
    const auto t0 = Clock::now();
    const PosedGaussians posed = rig.pose(avatar, params[f], anim);
    const auto t1 = Clock::now();
    const RenderedFrame frame = render(posed, camera, raster);
    const auto t2 = Clock::now();
    r.pose_ms.push_back(ms(t0, t1));
    r.render_ms.push_back(ms(t1, t2));
    r.total_ms.push_back(ms(t0, t2));
    fps.push_back(1000.0 / std::max(r.total_ms.back(), 1e-9));
  }
  r.mean_fps = 1000.0 / std::max(mean(r.total_ms), 1e-9);
  r.median_fps = median(fps);
  r.pose_per_second = 1000.0 / std::max(mean(r.pose_ms), 1e-9);
  return r;
}

}  // namespace headsplat
