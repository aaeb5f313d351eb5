#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "headsplat/avatar.hpp"
#include "headsplat/optim.hpp"
#include "headsplat/rasterizer.hpp"
#include "headsplat/template.hpp"

namespace headsplat {

nlohmann::json params_to_json(const FlameParams& params);
FlameParams params_from_json(const nlohmann::json& j);
nlohmann::json camera_to_json(const Camera& camera, int id);
Camera camera_from_json(const nlohmann::json& j);

// Heads are viewed from the origin at this distance down -z.
constexpr double kViewingDistance = 1.0;

// Parameters from flat arrays: psi (K_expr), theta (3 (B - 1) axis-angle
// components) and pose (rx, ry, rz, tx, ty, tz), with the translation taken
// relative to (0, 0, -kViewingDistance). Empty arrays are zero.
FlameParams viewing_params(const HeadTemplate& tmpl, std::span<const double> psi = {},
                           std::span<const double> theta = {}, std::span<const double> pose = {});

struct SyntheticSubjectOptions {
  std::size_t gaussians = 20000;
  double offset_sigma = 0.002;      // meters
  double color_frequency = 60.0;    // rad / m, spread of the color field's spatial frequencies
  int color_waves = 12;
  double expression_sigma = 0.5;
  double articulation_amplitude = 0.08;  // rad
  Eigen::Vector3d head_rotation_amplitude{0.15, 0.35, 0.08};  // rad: pitch, yaw, roll
  double translation_amplitude = 0.01;  // meters around (0, 0, -1)
  RasterConfig raster;
};

// A colored, offset-perturbed avatar on `tmpl`. Opacity and scales keep the
// init_avatar defaults.
CanonicalAvatar synthetic_subject(const HeadTemplate& tmpl, std::uint64_t seed,
                                  const SyntheticSubjectOptions& options = {});

// n frames of parameters following random smooth curves.
std::vector<FlameParams> smooth_trajectory(const HeadTemplate& tmpl, int n_frames, std::uint64_t seed,
                                           const SyntheticSubjectOptions& options = {});

struct DatasetFrame {
  std::string image;                 // relative to the dataset root
  std::optional<std::string> params; // sidecar JSON, relative to the root
  int camera_id = 0;
};

// A directory with manifest.json, frame PNGs and optional parameter sidecars.
struct SubjectDataset {
  std::filesystem::path root;
  std::uint32_t template_crc = 0;
  std::vector<std::pair<int, Camera>> cameras;
  std::vector<DatasetFrame> frames;

  static SubjectDataset load(const std::filesystem::path& root);
  void save_manifest() const;

  std::size_t size() const { return frames.size(); }
  const Camera& camera(int id) const;
  Image image(std::size_t frame) const;
  std::optional<FlameParams> params(std::size_t frame) const;
};

// Renders an avatar from synthetic_subject along smooth_trajectory and
// writes frame_XXXX.png, frame_XXXX.json, manifest.json and subject.gha.
SubjectDataset make_synthetic_subject(const HeadTemplate& tmpl, std::uint64_t seed, int n_frames, const Camera& camera,
                                      const std::filesystem::path& out_dir,
                                      const SyntheticSubjectOptions& options = {});

struct FrameMetrics {
  std::size_t frame = 0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct EvalReport {
  std::vector<std::size_t> conditioning;
  std::vector<FrameMetrics> frames;  // reconstruction set, ascending
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  bool fitted_params = false;  // some frames had no sidecar and went through fit_flame

  nlohmann::json to_json() const;
  std::string to_csv() const;
  void write(const std::filesystem::path& json_path, const std::filesystem::path& csv_path) const;
};

struct EvalOptions {
  std::size_t conditioning = 4;
  std::uint64_t seed = 0;
  RasterConfig raster;
  FitFlameOptions fit;  // used for frames without sidecars
};

// Frames `indices` of the dataset with their sidecar parameters, or with
// fit_flame estimates from viewing_params when a sidecar is missing.
std::vector<TrainingFrame> training_frames(const SubjectDataset& dataset, const CanonicalAvatar& avatar,
                                           const HeadTemplate& tmpl, std::span<const std::size_t> indices,
                                           const FitFlameOptions& fit = {}, bool* fitted = nullptr);

EvalReport evaluate(const SubjectDataset& dataset, const CanonicalAvatar& avatar, const HeadTemplate& tmpl,
                    const EvalOptions& options = {});

struct BenchReport {
  int width = 0;
  int height = 0;
  std::size_t gaussians = 0;
  int threads = 0;
  std::vector<double> pose_ms;
  std::vector<double> render_ms;
  std::vector<double> total_ms;
  double mean_fps = 0.0;
  double median_fps = 0.0;
  double pose_per_second = 0.0;  // deformations per second

  nlohmann::json to_json() const;
};

BenchReport bench_animate(const CanonicalAvatar& avatar, const HeadTemplate& tmpl, const Camera& camera, int n_frames,
                          std::uint64_t seed = 0, const RasterConfig& raster = {});

}  // namespace headsplat
