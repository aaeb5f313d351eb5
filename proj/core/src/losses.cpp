#include "headsplat/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "headsplat/random.hpp"

namespace headsplat {

namespace {

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": image shapes differ");
  if (a.empty()) throw std::invalid_argument(std::string(what) + ": empty image");
}

std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(size);
  const double mid = 0.5 * (size - 1);
  for (int i = 0; i < size; ++i) k[i] = std::exp(-0.5 * (i - mid) * (i - mid) / (sigma * sigma));
  const double s = std::accumulate(k.begin(), k.end(), 0.0);
  for (double& v : k) v /= s;
  return k;
}

// Single-channel plane.
struct Plane {
  int w = 0, h = 0;
  std::vector<double> v;
  Plane(int w_, int h_) : w(w_), h(h_), v(static_cast<std::size_t>(w_) * h_, 0.0) {}
  double& at(int x, int y) { return v[static_cast<std::size_t>(y) * w + x]; }
  double at(int x, int y) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

// Separable "valid" correlation: output is (w - K + 1) x (h - K + 1).
Plane filter_valid(const Plane& in, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  Plane tmp(in.w - n + 1, in.h);
  for (int y = 0; y < in.h; ++y) {
    for (int x = 0; x < tmp.w; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[i] * in.at(x + i, y);
      tmp.at(x, y) = s;
    }
  }
  Plane out(tmp.w, in.h - n + 1);
  for (int y = 0; y < out.h; ++y) {
    for (int x = 0; x < out.w; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[i] * tmp.at(x, y + i);
      out.at(x, y) = s;
    }
  }
  return out;
}

// Adjoint of filter_valid: scatters a valid-size map back to full size.
Plane filter_adjoint(const Plane& in, const std::vector<double>& k, int w, int h) {
  const int n = static_cast<int>(k.size());
  Plane tmp(in.w, h);
  for (int y = 0; y < in.h; ++y) {
    for (int x = 0; x < in.w; ++x) {
      const double g = in.at(x, y);
      for (int i = 0; i < n; ++i) tmp.at(x, y + i) += k[i] * g;
    }
  }
  Plane out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < tmp.w; ++x) {
      const double g = tmp.at(x, y);
      for (int i = 0; i < n; ++i) out.at(x + i, y) += k[i] * g;
    }
  }
  return out;
}

Plane channel(const Image& img, int c) {
  Plane p(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) p.at(x, y) = img.at(x, y, c);
  }
  return p;
}

}  // namespace

LossValue l1_loss(const Image& a, const Image& b) {
  require_same_shape(a, b, "l1_loss");
  LossValue out;
  out.grad = Image(a.width, a.height, a.channels);
  const double n = static_cast<double>(a.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += std::abs(d);
    out.grad.data[i] = d > 0.0 ? 1.0 / n : (d < 0.0 ? -1.0 / n : 0.0);
  }
  out.value = s / n;
  return out;
}

LossValue ssim(const Image& a, const Image& b, const SsimOptions& options) {
  require_same_shape(a, b, "ssim");
  if (options.window <= 0 || !(options.sigma > 0.0)) throw std::invalid_argument("ssim: invalid window");
  if (a.width < options.window || a.height < options.window) {
    throw std::invalid_argument("ssim: image is smaller than the window");
  }
  const auto k = gaussian_kernel(options.window, options.sigma);
  const int vw = a.width - options.window + 1, vh = a.height - options.window + 1;
  const double n = static_cast<double>(vw) * vh * a.channels;
  const double c1 = options.c1, c2 = options.c2;

  LossValue out;
  out.grad = Image(a.width, a.height, a.channels);
  // Identical inputs are the maximum; skip the filtering, whose cancellation
  // would leave rounding noise in the gradient.
  if (a.data == b.data) {
    out.value = 1.0;
    return out;
  }
  double total = 0.0;
  for (int c = 0; c < a.channels; ++c) {
    const Plane pa = channel(a, c), pb = channel(b, c);
    Plane aa(a.width, a.height), bb(a.width, a.height), ab(a.width, a.height);
    for (std::size_t i = 0; i < pa.v.size(); ++i) {
      aa.v[i] = pa.v[i] * pa.v[i];
      bb.v[i] = pb.v[i] * pb.v[i];
      ab.v[i] = pa.v[i] * pb.v[i];
    }
    const Plane mu_a = filter_valid(pa, k), mu_b = filter_valid(pb, k);
    const Plane e_aa = filter_valid(aa, k), e_bb = filter_valid(bb, k), e_ab = filter_valid(ab, k);

    Plane g_mu(vw, vh), g_var(vw, vh), g_cov(vw, vh);
    for (std::size_t i = 0; i < mu_a.v.size(); ++i) {
      const double ma = mu_a.v[i], mb = mu_b.v[i];
      const double var_a = e_aa.v[i] - ma * ma;
      const double var_b = e_bb.v[i] - mb * mb;
      const double cov = e_ab.v[i] - ma * mb;
      const double l = 2.0 * ma * mb + c1, m = 2.0 * cov + c2;
      const double p = ma * ma + mb * mb + c1, q = var_a + var_b + c2;
      const double s = l * m / (p * q);
      total += s;
      const double ds_dmu = 2.0 * mb * m / (p * q) - s * 2.0 * ma / p;
      const double ds_dvar = -s / q;
      const double ds_dcov = 2.0 * l / (p * q);
      // Chain through var = E[a^2] - mu_a^2 and cov = E[ab] - mu_a mu_b.
      g_mu.v[i] = (ds_dmu - 2.0 * ma * ds_dvar - mb * ds_dcov) / n;
      g_var.v[i] = ds_dvar / n;
      g_cov.v[i] = ds_dcov / n;
    }
    const Plane back_mu = filter_adjoint(g_mu, k, a.width, a.height);
    const Plane back_var = filter_adjoint(g_var, k, a.width, a.height);
    const Plane back_cov = filter_adjoint(g_cov, k, a.width, a.height);
    for (int y = 0; y < a.height; ++y) {
      for (int x = 0; x < a.width; ++x) {
        out.grad.at(x, y, c) = back_mu.at(x, y) + 2.0 * pa.at(x, y) * back_var.at(x, y) + pb.at(x, y) * back_cov.at(x, y);
      }
    }
  }
  out.value = total / n;
  return out;
}

double psnr(const Image& a, const Image& b) {
  require_same_shape(a, b, "psnr");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  const double mse = s / static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

void LossWeights::validate() const {
  for (double w : {l1, perceptual, ssim, adversarial}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("loss weights must be finite and non-negative");
  }
  if (perceptual > 0.0 && !perceptual_fn) throw std::invalid_argument("perceptual weight set without a loss callback");
  if (adversarial > 0.0 && !adversarial_fn) throw std::invalid_argument("adversarial weight set without a loss callback");
}

TotalLoss total_loss(const std::vector<ImagePair>& pairs, const LossWeights& weights) {
  if (pairs.empty()) throw std::invalid_argument("total_loss: no image pairs");
  weights.validate();
  TotalLoss out;
  for (const auto& pair : pairs) {
    if (!pair.target || !pair.rendered) throw std::invalid_argument("total_loss: null image");
    const Image& target = *pair.target;
    const Image& rendered = *pair.rendered;
    require_same_shape(target, rendered, "total_loss");
    Image grad(rendered.width, rendered.height, rendered.channels);
    if (weights.l1 > 0.0) {
      const auto l1 = l1_loss(rendered, target);
      out.l1 += l1.value;
      out.value += weights.l1 * l1.value;
      for (std::size_t i = 0; i < grad.size(); ++i) grad.data[i] += weights.l1 * l1.grad.data[i];
    }
    if (weights.ssim > 0.0) {
      const auto s = ssim(rendered, target);
      out.ssim += 1.0 - s.value;
      out.value += weights.ssim * (1.0 - s.value);
      for (std::size_t i = 0; i < grad.size(); ++i) grad.data[i] -= weights.ssim * s.grad.data[i];
    }
    auto slot = [&](double w, const ImageLossFn& fn, double& acc) {
      if (w == 0.0 || !fn) return;
      Image g(rendered.width, rendered.height, rendered.channels);
      const double v = fn(target, rendered, g);
      if (!g.same_shape(rendered)) throw std::invalid_argument("total_loss: callback gradient has the wrong shape");
      acc += v;
      out.value += w * v;
      for (std::size_t i = 0; i < grad.size(); ++i) grad.data[i] += w * g.data[i];
    };
    slot(weights.perceptual, weights.perceptual_fn, out.perceptual);
    slot(weights.adversarial, weights.adversarial_fn, out.adversarial);
    out.grads.push_back(std::move(grad));
  }
  return out;
}

FrameSplit few_to_many_split(std::size_t n_frames, std::size_t s, std::size_t r, std::uint64_t seed) {
  if (s == 0) throw std::invalid_argument("few_to_many_split: conditioning set must be non-empty");
  if (r < s) throw std::invalid_argument("few_to_many_split: reconstruction set must be at least as large as conditioning");
  if (s + r > n_frames) throw std::invalid_argument("few_to_many_split: S + R exceeds the frame count");
  std::vector<std::size_t> idx(n_frames);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  // Partial Fisher-Yates: the first S + R slots are a uniform random draw.
  for (std::size_t i = 0; i < s + r; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.index(n_frames - i));
    std::swap(idx[i], idx[j]);
  }
  FrameSplit out;
  out.conditioning.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(s));
  out.reconstruction.assign(idx.begin() + static_cast<std::ptrdiff_t>(s), idx.begin() + static_cast<std::ptrdiff_t>(s + r));
  std::sort(out.conditioning.begin(), out.conditioning.end());
  std::sort(out.reconstruction.begin(), out.reconstruction.end());
  return out;
}

}  // namespace headsplat
