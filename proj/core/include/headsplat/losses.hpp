#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "headsplat/image.hpp"

namespace headsplat {

// A scalar together with its gradient with respect to the first image.
struct LossValue {
  double value = 0.0;
  Image grad;
};

// Mean absolute difference over pixels and channels. Ties get a zero
// subgradient.
LossValue l1_loss(const Image& a, const Image& b);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
};

// Gaussian-window SSIM averaged over valid window positions and channels.
// The gradient is of the SSIM value itself (not 1 - SSIM).
LossValue ssim(const Image& a, const Image& b, const SsimOptions& options = {});

// 10 log10(1 / MSE) in dB; +infinity when the images are equal.
double psnr(const Image& a, const Image& b);

inline bool is_inf_psnr(double db) { return db == std::numeric_limits<double>::infinity(); }

// Callback for the perceptual and adversarial slots: returns a loss and
// fills the gradient with respect to `rendered`.
using ImageLossFn = std::function<double(const Image& target, const Image& rendered, Image& grad)>;

struct LossWeights {
  double l1 = 0.8;
  double perceptual = 0.0;
  double ssim = 0.1;
  double adversarial = 0.0;
  ImageLossFn perceptual_fn;
  ImageLossFn adversarial_fn;

  void validate() const;
};

struct ImagePair {
  const Image* target = nullptr;
  const Image* rendered = nullptr;
};

struct TotalLoss {
  double value = 0.0;
  double l1 = 0.0;    // unweighted sums over pairs
  double ssim = 0.0;  // sum of (1 - SSIM)
  double perceptual = 0.0;
  double adversarial = 0.0;
  std::vector<Image> grads;  // d value / d rendered, one per pair
};

// sum over pairs of l1 * L1 + ssim * (1 - SSIM) + the callback slots.
TotalLoss total_loss(const std::vector<ImagePair>& pairs, const LossWeights& weights);

struct FrameSplit {
  std::vector<std::size_t> conditioning;
  std::vector<std::size_t> reconstruction;
};

// Two disjoint random subsets of sizes S and R drawn from n frames.
FrameSplit few_to_many_split(std::size_t n_frames, std::size_t s, std::size_t r, std::uint64_t seed);

}  // namespace headsplat
