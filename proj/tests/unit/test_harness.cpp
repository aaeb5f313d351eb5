#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "headsplat/errors.hpp"
#include "headsplat/harness.hpp"
#include "headsplat/random.hpp"
#include "test_subjects.hpp"

namespace hs = headsplat;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("headsplat_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

hs::SyntheticSubjectOptions small_options(std::size_t m = 2000) {
  hs::SyntheticSubjectOptions o;
  o.gaussians = m;
  return o;
}

const hs::HeadTemplate& tmpl() {
  static const hs::HeadTemplate t = hs::generate_synthetic_template(5, 642, 4, 8, 4);
  return t;
}

}  // namespace

TEST(Serialization, ParamsAndCameraRoundTrip) {
  hs::Rng rng(3);
  auto p = hs::FlameParams::rest(tmpl());
  for (double& e : p.expression) e = rng.normal();
  for (auto& a : p.articulation) a = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
  p.head_rotation = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
  p.head_translation = Eigen::Vector3d(0.01, -0.02, -0.9999999999999871);
  const auto text = hs::params_to_json(p).dump();
  const auto q = hs::params_from_json(nlohmann::json::parse(text));
  EXPECT_EQ(q.pack(), p.pack());
  EXPECT_THROW(hs::params_from_json(nlohmann::json{{"expression", {1.0}}}), hs::FormatError);

  auto cam = hs::Camera::normalized(96, 64);
  cam.cx = 47.25;
  const auto c = hs::camera_from_json(hs::camera_to_json(cam, 2));
  EXPECT_EQ(c.fx, cam.fx);
  EXPECT_EQ(c.cx, cam.cx);
  EXPECT_EQ(c.width, 96);
  EXPECT_EQ(c.height, 64);
}

TEST(SyntheticSubject, WritesReproducibleDataset) {
  const auto dir_a = scratch_dir("synth_a");
  const auto dir_b = scratch_dir("synth_b");
  const auto cam = hs::Camera::normalized(48, 48);
  const auto a = hs::make_synthetic_subject(tmpl(), 3, 16, cam, dir_a, small_options());
  hs::make_synthetic_subject(tmpl(), 3, 16, cam, dir_b, small_options());
  ASSERT_EQ(a.size(), 16u);
  int pngs = 0, sidecars = 0;
  for (const auto& e : fs::directory_iterator(dir_a)) {
    const auto name = e.path().filename().string();
    if (name.rfind("frame_", 0) != 0) continue;
    if (e.path().extension() == ".png") ++pngs;
    if (e.path().extension() == ".json") ++sidecars;
    EXPECT_EQ(slurp(e.path()), slurp(dir_b / name)) << name;
  }
  EXPECT_EQ(pngs, 16);
  EXPECT_EQ(sidecars, 16);
  EXPECT_EQ(slurp(dir_a / "manifest.json"), slurp(dir_b / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir_a / "subject.gha"));

  const auto loaded = hs::SubjectDataset::load(dir_a);
  EXPECT_EQ(loaded.template_crc, tmpl().crc());
  EXPECT_EQ(loaded.size(), 16u);
  const auto manifest = nlohmann::json::parse(slurp(dir_a / "manifest.json"));
  EXPECT_EQ(manifest["version"], 1);
  EXPECT_EQ(manifest["cameras"][0]["id"], 0);
  EXPECT_EQ(manifest["frames"][3]["image"], "frame_0003.png");
  EXPECT_EQ(manifest["frames"][3]["params"], "frame_0003.json");
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST(SyntheticSubject, StoredFramesMatchRendersWithinQuantization) {
  const auto dir = scratch_dir("quant");
  const auto cam = hs::Camera::normalized(48, 48);
  const auto d = hs::make_synthetic_subject(tmpl(), 4, 3, cam, dir, small_options());
  const auto avatar = hs::load_avatar(dir / "subject.gha");
  const hs::Rig rig(tmpl(), avatar);
  for (std::size_t f = 0; f < d.size(); ++f) {
    const auto params = d.params(f);
    ASSERT_TRUE(params.has_value());
    const auto r = hs::render(rig.pose(avatar, *params), cam).rgb;
    const auto stored = d.image(f);
    double worst = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) worst = std::max(worst, std::abs(r.data[i] - stored.data[i]));
    EXPECT_LE(worst, 1.0 / 255.0);
    EXPECT_GT(worst, 0.0);
  }
  fs::remove_all(dir);
}

TEST(SubjectDataset, LoadRejectsInconsistentManifests) {
  const auto dir = scratch_dir("manifest");
  const auto cam = hs::Camera::normalized(32, 32);
  auto d = hs::make_synthetic_subject(tmpl(), 1, 2, cam, dir, small_options(1000));

  auto broken = d;
  broken.frames[1].camera_id = 7;
  broken.save_manifest();
  EXPECT_THROW(hs::SubjectDataset::load(dir), hs::FormatError);

  broken = d;
  broken.frames[0].image = "missing.png";
  broken.save_manifest();
  EXPECT_THROW(hs::SubjectDataset::load(dir), hs::FormatError);

  d.save_manifest();
  EXPECT_NO_THROW(hs::SubjectDataset::load(dir));
  auto j = nlohmann::json::parse(slurp(dir / "manifest.json"));
  j["version"] = 2;
  std::ofstream(dir / "manifest.json") << j.dump();
  EXPECT_THROW(hs::SubjectDataset::load(dir), hs::FormatError);
  std::ofstream(dir / "manifest.json") << "{ not json";
  EXPECT_THROW(hs::SubjectDataset::load(dir), hs::FormatError);
  EXPECT_THROW(hs::SubjectDataset::load(dir / "nowhere"), std::runtime_error);
  fs::remove_all(dir);
}

TEST(Evaluate, GroundTruthAvatarIsQuantizationLimited) {
  const auto dir = scratch_dir("eval_gt");
  const auto cam = hs::Camera::normalized(48, 48);
  const auto d = hs::make_synthetic_subject(tmpl(), 6, 10, cam, dir, small_options());
  const auto avatar = hs::load_avatar(dir / "subject.gha");
  hs::EvalOptions o;
  o.conditioning = 2;
  o.seed = 11;
  const auto report = hs::evaluate(d, avatar, tmpl(), o);
  EXPECT_EQ(report.conditioning.size(), 2u);
  EXPECT_EQ(report.frames.size(), 8u);
  EXPECT_GE(report.mean_psnr, 45.0);
  EXPECT_FALSE(report.fitted_params);

  std::vector<bool> seen(d.size(), false);
  for (auto i : report.conditioning) seen[i] = true;
  for (const auto& f : report.frames) {
    EXPECT_FALSE(seen[f.frame]);
    seen[f.frame] = true;
  }
  for (bool s : seen) EXPECT_TRUE(s);

  const auto again = hs::evaluate(d, avatar, tmpl(), o);
  report.write(dir / "a.json", dir / "a.csv");
  again.write(dir / "b.json", dir / "b.csv");
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
  EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));
  const auto csv = slurp(dir / "a.csv");
  EXPECT_EQ(csv.rfind("frame,psnr,ssim\n", 0), 0u);
  EXPECT_EQ(csv.find('\r'), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 9);

  o.conditioning = 6;
  EXPECT_THROW(hs::evaluate(d, avatar, tmpl(), o), std::invalid_argument);
  fs::remove_all(dir);
}

TEST(Evaluate, PersonalizedBeatsGray) {
  const auto dir = scratch_dir("eval_order");
  const auto cam = hs::Camera::normalized(48, 48);
  const auto d = hs::make_synthetic_subject(tmpl(), 8, 8, cam, dir, small_options());
  hs::EvalOptions o;
  o.conditioning = 3;
  o.seed = 2;
  const auto split = hs::few_to_many_split(d.size(), 3, d.size() - 3, o.seed);
  std::vector<hs::TrainingFrame> frames;
  for (auto i : split.conditioning) frames.push_back({d.image(i), *d.params(i), cam});
  const auto gray = hs::init_avatar(hs::upsample_anchors(tmpl(), 2000, 8));
  const auto init = hs::fitted_initialization(gray, tmpl(), frames);
  hs::PersonalizeOptions po;
  po.steps = 60;
  const auto personalized = hs::apply_residuals(init, hs::personalize(init, tmpl(), frames, po).residuals);
  EXPECT_LT(hs::evaluate(d, gray, tmpl(), o).mean_psnr, hs::evaluate(d, personalized, tmpl(), o).mean_psnr);
  fs::remove_all(dir);
}

TEST(Evaluate, FitsParamsWithoutSidecars) {
  const auto dir = scratch_dir("eval_fit");
  const auto cam = hs::Camera::normalized(40, 40);
  auto o_subject = small_options();
  o_subject.head_rotation_amplitude = Eigen::Vector3d(0.05, 0.1, 0.02);
  auto d = hs::make_synthetic_subject(tmpl(), 9, 4, cam, dir, o_subject);
  for (auto& f : d.frames) f.params.reset();
  d.save_manifest();
  const auto loaded = hs::SubjectDataset::load(dir);
  const auto avatar = hs::load_avatar(dir / "subject.gha");
  hs::EvalOptions o;
  o.conditioning = 2;
  o.fit.steps = 150;
  const auto report = hs::evaluate(loaded, avatar, tmpl(), o);
  EXPECT_TRUE(report.fitted_params);
  EXPECT_GT(report.mean_psnr, 25.0);
  fs::remove_all(dir);
}

TEST(Bench, ReportsPerFrameTimings) {
  const auto s = hs::testing::make_subject(5000);
  const auto r = hs::bench_animate(s.avatar, s.tmpl, hs::Camera::normalized(128, 128), 100);
  ASSERT_EQ(r.total_ms.size(), 100u);
  for (std::size_t i = 0; i < r.total_ms.size(); ++i) {
    EXPECT_GT(r.pose_ms[i], 0.0);
    EXPECT_GT(r.render_ms[i], 0.0);
    EXPECT_LE(r.pose_ms[i] + r.render_ms[i], r.total_ms[i] * 1.05);
  }
  EXPECT_GT(r.mean_fps, 0.0);
  EXPECT_GT(r.pose_per_second, 0.0);
  const auto j = r.to_json();
  EXPECT_EQ(j["frames"], 100);
  EXPECT_EQ(j["gaussians"], 5000);
}

TEST(Bench, SmallerFramesAreNotSlower) {
  const auto s = hs::testing::make_subject(5000);
  const auto small = hs::bench_animate(s.avatar, s.tmpl, hs::Camera::normalized(64, 64), 5);
  const auto large = hs::bench_animate(s.avatar, s.tmpl, hs::Camera::normalized(504, 504), 5);
  EXPECT_GE(small.median_fps, large.median_fps);
  EXPECT_THROW(hs::bench_animate(s.avatar, s.tmpl, hs::Camera::normalized(64, 64), 0), std::invalid_argument);
}
