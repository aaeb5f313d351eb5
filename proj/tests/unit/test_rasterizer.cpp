#include <gtest/gtest.h>

#include <cmath>

#include "headsplat/avatar.hpp"
#include "headsplat/errors.hpp"
#include "headsplat/rasterizer.hpp"
#include "headsplat/so3.hpp"
#include "test_scenes.hpp"

namespace hs = headsplat;
using hs::testing::random_scene;

namespace {

hs::Camera test_camera(int w, int h) { return hs::Camera::normalized(w, h); }

hs::PosedGaussians single(const Eigen::Vector3d& center, double scale, double logit, const Eigen::Vector3d& color) {
  hs::PosedGaussians g;
  g.centers.push_back(center);
  g.log_scales.push_back(Eigen::Vector3d::Constant(std::log(scale)));
  g.rotations.push_back(hs::so3::quat_identity());
  g.opacity_logits.push_back(logit);
  g.colors.push_back(color);
  return g;
}

double max_diff_vs_oracle(const hs::RenderedFrame& f, const hs::Image& oracle) {
  double worst = 0.0;
  for (int y = 0; y < oracle.height; ++y) {
    for (int x = 0; x < oracle.width; ++x) {
      for (int c = 0; c < 3; ++c) worst = std::max(worst, std::abs(f.rgb.at(x, y, c) - oracle.at(x, y, c)));
      worst = std::max(worst, std::abs(f.alpha.at(x, y, 0) - oracle.at(x, y, 3)));
    }
  }
  return worst;
}

double image_energy(const hs::RenderedFrame& f) {
  double s = 0.0;
  for (double v : f.rgb.data) s += v * v;
  for (double v : f.alpha.data) s += v * v;
  return s;
}

}  // namespace

TEST(Projection, OpticalAxisMapsToPrincipalPoint) {
  const auto cam = test_camera(64, 48);
  const auto splats = hs::project_gaussians(single({0, 0, -1.3}, 0.01, 0.0, {1, 1, 1}), cam);
  ASSERT_EQ(splats.size(), 1u);
  EXPECT_NEAR(splats[0].mean.x(), cam.cx, 1e-12);
  EXPECT_NEAR(splats[0].mean.y(), cam.cy, 1e-12);
  EXPECT_NEAR(splats[0].depth, 1.3, 1e-12);
}

TEST(Projection, LateralShiftFollowsPinhole) {
  const auto cam = test_camera(64, 64);
  const double d = 1.2, dx = 0.013;
  const auto a = hs::project_gaussians(single({0.01, 0.02, -d}, 0.01, 0.0, {1, 1, 1}), cam);
  const auto b = hs::project_gaussians(single({0.01 + dx, 0.02, -d}, 0.01, 0.0, {1, 1, 1}), cam);
  EXPECT_NEAR(b[0].mean.x() - a[0].mean.x(), cam.fx * dx / d, 1e-10);
  EXPECT_NEAR(b[0].mean.y(), a[0].mean.y(), 1e-12);
}

TEST(Projection, CovarianceIncludesFloor) {
  const auto cam = test_camera(64, 64);
  const double d = 1.0, s = 0.002;
  const auto splats = hs::project_gaussians(single({0, 0, -d}, s, 0.0, {1, 1, 1}), cam);
  const double expected = std::pow(cam.fx * s / d, 2) + 0.3;
  EXPECT_NEAR(splats[0].cov(0, 0), expected, 1e-9);
  EXPECT_NEAR(splats[0].cov(1, 1), expected, 1e-9);
}

TEST(Projection, BehindNearPlaneCulled) {
  const auto cam = test_camera(32, 32);
  EXPECT_TRUE(hs::project_gaussians(single({0, 0, -0.005}, 0.01, 0.0, {1, 1, 1}), cam).empty());
  EXPECT_TRUE(hs::project_gaussians(single({0, 0, 0.5}, 0.01, 0.0, {1, 1, 1}), cam).empty());
}

TEST(Camera, RejectsInvalid) {
  hs::Camera cam = test_camera(16, 16);
  cam.fx = 0.0;
  EXPECT_THROW(cam.validate(), std::invalid_argument);
  cam = test_camera(16, 16);
  cam.near_clip = 200.0;
  EXPECT_THROW(cam.validate(), std::invalid_argument);
  EXPECT_THROW(hs::Camera::normalized(0, 16), std::invalid_argument);
}

TEST(Render, EmptySceneIsTransparentBlack) {
  const auto f = hs::render(hs::PosedGaussians{}, test_camera(40, 24));
  EXPECT_EQ(f.rgb.width, 40);
  EXPECT_EQ(f.rgb.height, 24);
  for (double v : f.rgb.data) EXPECT_EQ(v, 0.0);
  for (double v : f.alpha.data) EXPECT_EQ(v, 0.0);
}

TEST(Render, OpaqueSplatShowsItsColor) {
  const auto cam = test_camera(32, 32);
  // Centered on pixel (16, 16).
  const double d = 1.0;
  const Eigen::Vector3d c((16.5 - cam.cx) * d / cam.fx, -(16.5 - cam.cy) * d / cam.fy, -d);
  const Eigen::Vector3d color(0.2, 0.6, 0.9);
  const auto f = hs::render(single(c, 0.004, 20.0, color), cam);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(f.rgb.at(16, 16, k), color[k], 1e-3);
  EXPECT_NEAR(f.alpha.at(16, 16, 0), 1.0, 1e-3);
}

TEST(Render, MatchesOracleOnRandomScenes) {
  hs::Rng rng(11);
  for (int scene = 0; scene < 20; ++scene) {
    const auto cam = test_camera(64, 64);
    const auto g = random_scene(rng, 1 + rng.index(200), cam);
    const auto f = hs::render(g, cam);
    EXPECT_LE(max_diff_vs_oracle(f, hs::brute_force_render(g, cam)), 1e-5) << "scene " << scene;
  }
}

TEST(Render, NonSquareImageMatchesOracle) {
  hs::Rng rng(5);
  const auto cam = test_camera(37, 53);
  const auto g = random_scene(rng, 80, cam);
  EXPECT_LE(max_diff_vs_oracle(hs::render(g, cam), hs::brute_force_render(g, cam)), 1e-5);
}

TEST(Render, ThreadCountDoesNotChangeOutput) {
  hs::Rng rng(3);
  const auto cam = test_camera(64, 64);
  const auto g = random_scene(rng, 300, cam);
  hs::RasterConfig cfg;
  cfg.threads = 1;
  const auto ref = hs::render(g, cam, cfg);
  for (int t : {2, 8}) {
    cfg.threads = t;
    const auto f = hs::render(g, cam, cfg);
    EXPECT_EQ(f.rgb.data, ref.rgb.data);
    EXPECT_EQ(f.alpha.data, ref.alpha.data);
  }
}

TEST(BruteForce, SingleGaussianClosedForm) {
  const auto cam = test_camera(32, 32);
  const auto g = single({0.004, -0.003, -1.1}, 0.003, 0.4, {1, 1, 1});
  const auto splat = hs::project_gaussians(g, cam)[0];
  const auto img = hs::brute_force_render(g, cam);
  const Eigen::Matrix2d inv = splat.cov.inverse();
  for (int y = 0; y < 32; y += 3) {
    for (int x = 0; x < 32; x += 3) {
      const Eigen::Vector2d dlt(x + 0.5 - splat.mean.x(), y + 0.5 - splat.mean.y());
      const double expected = std::exp(-0.5 * dlt.dot(inv * dlt)) * hs::logistic(0.4);
      EXPECT_NEAR(img.at(x, y, 3), expected, 1e-12);
    }
  }
}

TEST(Render, EqualDepthUsesIndexOrder) {
  const auto cam = test_camera(32, 32);
  auto g = single({0.0, 0.0, -1.0}, 0.01, 0.5, {1, 0, 0});
  g.centers.push_back({0.003, 0.0, -1.0});
  g.log_scales.push_back(Eigen::Vector3d::Constant(std::log(0.01)));
  g.rotations.push_back(hs::so3::quat_identity());
  g.opacity_logits.push_back(0.5);
  g.colors.push_back({0, 0, 1});

  // Tails below tail_epsilon are cut per pixel; the oracle keeps them.
  const auto a = hs::render(g, cam);
  EXPECT_LE(max_diff_vs_oracle(a, hs::brute_force_render(g, cam)), 1e-6);
  EXPECT_EQ(hs::render(g, cam).rgb.data, a.rgb.data);

  std::swap(g.centers[0], g.centers[1]);
  std::swap(g.colors[0], g.colors[1]);
  const auto b = hs::render(g, cam);
  EXPECT_LE(max_diff_vs_oracle(b, hs::brute_force_render(g, cam)), 1e-6);
  // Red was in front; now blue is.
  EXPECT_GT(a.rgb.at(16, 16, 0), b.rgb.at(16, 16, 0));
}

TEST(Render, AddingGaussianNeverDecreasesAlpha) {
  hs::Rng rng(8);
  const auto cam = test_camera(48, 48);
  for (int trial = 0; trial < 10; ++trial) {
    auto g = random_scene(rng, 40, cam);
    const auto before = hs::render(g, cam);
    const auto extra = random_scene(rng, 1, cam);
    g.centers.push_back(extra.centers[0]);
    g.log_scales.push_back(extra.log_scales[0]);
    g.rotations.push_back(extra.rotations[0]);
    g.opacity_logits.push_back(extra.opacity_logits[0]);
    g.colors.push_back(extra.colors[0]);
    const auto after = hs::render(g, cam);
    for (std::size_t i = 0; i < after.alpha.size(); ++i) EXPECT_GE(after.alpha.data[i], before.alpha.data[i] - 1e-15);
  }
}

TEST(Backward, RequiresIntermediates) {
  hs::RenderedFrame f;
  f.rgb = hs::Image(4, 4, 3);
  EXPECT_THROW(hs::render_backward(f, hs::Image(4, 4, 3)), hs::InvalidStateError);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  hs::Rng rng(2);
  const auto cam = test_camera(16, 16);
  const auto g = random_scene(rng, 5, cam);
  const auto f = hs::render(g, cam);
  const auto grads = hs::render_backward(f, hs::Image(16, 16, 3));
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_EQ(grads.centers[i].norm(), 0.0);
    EXPECT_EQ(grads.log_scales[i].norm(), 0.0);
    EXPECT_EQ(grads.rotation_tangents[i].norm(), 0.0);
    EXPECT_EQ(grads.opacity_logits[i], 0.0);
    EXPECT_EQ(grads.colors[i].norm(), 0.0);
  }
}

TEST(Backward, OccludedSplatGetsNoColorGradient) {
  const auto cam = test_camera(16, 16);
  auto g = single({0, 0, -1.0}, 3.0, 30.0, {0.5, 0.5, 0.5});
  for (double z : {-1.1, -1.5}) {
    g.centers.push_back({0, 0, z});
    g.log_scales.push_back(Eigen::Vector3d::Constant(std::log(z == -1.1 ? 3.0 : 0.001)));
    g.rotations.push_back(hs::so3::quat_identity());
    g.opacity_logits.push_back(z == -1.1 ? 30.0 : 0.0);
    g.colors.push_back({0.3, 0.3, 0.3});
  }
  const auto f = hs::render(g, cam);
  hs::Image up(16, 16, 3, 1.0);
  const auto grads = hs::render_backward(f, up);
  EXPECT_EQ(grads.colors[2], Eigen::Vector3d::Zero());
  EXPECT_GT(grads.colors[0].norm(), 0.0);
}

namespace {

// Central differences of sum(rgb^2) + sum(alpha^2) over every attribute.
void check_gradients(const hs::PosedGaussians& g, const hs::Camera& cam, double tol) {
  const auto f = hs::render(g, cam);
  hs::Image up_rgb = f.rgb, up_alpha = f.alpha;
  for (double& v : up_rgb.data) v *= 2.0;
  for (double& v : up_alpha.data) v *= 2.0;
  const auto grads = hs::render_backward(f, up_rgb, &up_alpha);

  auto loss = [&](auto mutate) {
    hs::PosedGaussians p = g;
    mutate(p);
    return image_energy(hs::render(p, cam));
  };
  std::vector<double> an, num;
  auto compare = [&](const char* what) {
    EXPECT_LT(hs::testing::relative_error(an, num), tol) << what;
    an.clear();
    num.clear();
  };
  const double h = 1e-6;
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      an.push_back(grads.centers[i][k]);
      const double hc = h * 1e-2;
      num.push_back((loss([&](auto& p) { p.centers[i][k] += hc; }) - loss([&](auto& p) { p.centers[i][k] -= hc; })) /
                    (2 * hc));
    }
  }
  compare("centers");
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      an.push_back(grads.log_scales[i][k]);
      num.push_back((loss([&](auto& p) { p.log_scales[i][k] += h; }) -
                     loss([&](auto& p) { p.log_scales[i][k] -= h; })) / (2 * h));
    }
  }
  compare("log_scales");
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      an.push_back(grads.rotation_tangents[i][k]);
      auto rot = [&](double s) {
        return [=, &i](auto& p) {
          Eigen::Vector3d w = Eigen::Vector3d::Zero();
          w[k] = s;
          p.rotations[i] = hs::so3::quat_multiply(p.rotations[i], hs::so3::quat_exp(w));
        };
      };
      num.push_back((loss(rot(h)) - loss(rot(-h))) / (2 * h));
    }
  }
  compare("rotations");
  for (std::size_t i = 0; i < g.size(); ++i) {
    an.push_back(grads.opacity_logits[i]);
    num.push_back((loss([&](auto& p) { p.opacity_logits[i] += h; }) -
                   loss([&](auto& p) { p.opacity_logits[i] -= h; })) / (2 * h));
  }
  compare("opacity");
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      an.push_back(grads.colors[i][k]);
      num.push_back((loss([&](auto& p) { p.colors[i][k] += h; }) - loss([&](auto& p) { p.colors[i][k] -= h; })) /
                    (2 * h));
    }
  }
  compare("colors");
}

}  // namespace

TEST(Backward, MatchesFiniteDifferencesSmallScenes) {
  hs::Rng rng(21);
  for (int scene = 0; scene < 10; ++scene) {
    SCOPED_TRACE(scene);
    const auto cam = test_camera(16, 16);
    check_gradients(random_scene(rng, 5, cam, 0.8, 1.4, 1.0, 4.0), cam, 1e-3);
  }
}

TEST(Backward, MatchesFiniteDifferencesDenseScene) {
  hs::Rng rng(4);
  const auto cam = test_camera(32, 32);
  check_gradients(random_scene(rng, 40, cam, 0.8, 1.4, 1.0, 6.0), cam, 1e-3);
}

TEST(Backward, DeterministicAcrossThreads) {
  hs::Rng rng(9);
  const auto cam = test_camera(48, 48);
  const auto g = random_scene(rng, 200, cam);
  hs::RasterConfig cfg;
  cfg.threads = 1;
  const auto f1 = hs::render(g, cam, cfg);
  cfg.threads = 8;
  const auto f8 = hs::render(g, cam, cfg);
  hs::Image up(48, 48, 3, 0.7);
  const auto a = hs::render_backward(f1, up);
  const auto b = hs::render_backward(f8, up);
  EXPECT_EQ(a.centers, b.centers);
  EXPECT_EQ(a.log_scales, b.log_scales);
  EXPECT_EQ(a.rotation_tangents, b.rotation_tangents);
  EXPECT_EQ(a.opacity_logits, b.opacity_logits);
  EXPECT_EQ(a.colors, b.colors);
}
