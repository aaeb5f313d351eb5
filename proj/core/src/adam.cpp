#include "headsplat/adam.hpp"

#include <cmath>
#include <stdexcept>

#include "headsplat/errors.hpp"

namespace headsplat {

void adam_step(std::span<const ParamBlock> blocks, AdamState& state) {
  const AdamOptions& o = state.options;
  if (state.first_moment.empty()) {
    for (const auto& b : blocks) {
      state.first_moment.emplace_back(b.values.size(), 0.0);
      state.second_moment.emplace_back(b.values.size(), 0.0);
    }
  }
  if (state.first_moment.size() != blocks.size()) throw std::invalid_argument("adam_step: block count changed");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    if (b.values.size() != b.grads.size()) {
      throw std::invalid_argument("adam_step: '" + b.name + "' values and gradients differ in size");
    }
    if (b.values.size() != state.first_moment[i].size()) {
      throw std::invalid_argument("adam_step: '" + b.name + "' changed size between steps");
    }
    for (double g : b.grads) {
      if (!std::isfinite(g)) throw DivergedError(b.name, static_cast<long>(state.step));
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const double lr = o.lr * b.lr_scale;
    for (std::size_t k = 0; k < b.values.size(); ++k) {
      const double g = b.grads[k];
      m[k] = o.beta1 * m[k] + (1.0 - o.beta1) * g;
      v[k] = o.beta2 * v[k] + (1.0 - o.beta2) * g * g;
      b.values[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + o.epsilon);
    }
  }
}

}  // namespace headsplat
