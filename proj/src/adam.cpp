#include "steer/adam.hpp"

#include <cmath>

#include "steer/errors.hpp"

namespace steer {

void adam_step(const nn::ParameterSet& params, AdamState& state) {
  const auto& items = params.items();
  if (state.first_moment.empty()) {
    for (const auto& p : items) {
      state.first_moment.emplace_back(p.tensor.numel(), 0.0);
      state.second_moment.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != items.size()) {
    throw ContractError("adam_step: optimizer state holds " +
                        std::to_string(state.first_moment.size()) +
                        " buffers for " + std::to_string(items.size()) +
                        " parameters");
  }
  for (const auto& p : items) {
    if (p.tensor.grad().size() != p.tensor.numel()) {
      throw ContractError("adam_step: parameter '" + p.name +
                          "' has no gradient");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < items.size(); ++k) {
    Tensor param = items[k].tensor;
    auto values = param.mutable_data();
    auto grads = param.mutable_grad();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double gi = grads[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      values[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
      grads[i] = 0.0;
    }
  }
}

double grad_norm(const nn::ParameterSet& params) {
  double total = 0.0;
  for (const auto& p : params.items()) {
    for (double gi : p.tensor.grad()) total += gi * gi;
  }
  return std::sqrt(total);
}

double clip_grad_norm(const nn::ParameterSet& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (const auto& p : params.items()) {
      Tensor t = p.tensor;
      for (double& gi : t.mutable_grad()) gi *= factor;
    }
  }
  return norm;
}

}  // namespace steer
