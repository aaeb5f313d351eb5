#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace headsplat {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// A named parameter array and its gradient. `lr_scale` multiplies the base
// learning rate for this array only.
struct ParamBlock {
  std::string name;
  std::span<double> values;
  std::span<const double> grads;
  double lr_scale = 1.0;
};

// Moments for a fixed list of parameter blocks. Moment buffers are sized on
// the first step; later steps must pass blocks of the same sizes in the
// same order.
struct AdamState {
  AdamOptions options;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::int64_t step = 0;

  AdamState() = default;
  explicit AdamState(const AdamOptions& opts) : options(opts) {}
};

// One bias-corrected Adam update in place. Throws DivergedError naming the
// first block with a non-finite gradient; nothing is modified in that case.
void adam_step(std::span<const ParamBlock> blocks, AdamState& state);

}  // namespace headsplat
