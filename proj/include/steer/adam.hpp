#ifndef STEER_ADAM_HPP_
#define STEER_ADAM_HPP_

#include <cstdint>
#include <vector>

#include "steer/nn.hpp"

namespace steer {

struct AdamState {
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

// Bias-corrected adaptive-moment update of every parameter, then zeroes the
// gradients. Moment buffers are sized on first use.
void adam_step(const nn::ParameterSet& params, AdamState& state);

// Global L2 norm of all gradients.
double grad_norm(const nn::ParameterSet& params);

// Rescales gradients so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(const nn::ParameterSet& params, double max_norm);

}  // namespace steer

#endif  // STEER_ADAM_HPP_
