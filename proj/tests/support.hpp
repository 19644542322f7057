#ifndef STEER_TESTS_SUPPORT_HPP_
#define STEER_TESTS_SUPPORT_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "steer/model.hpp"
#include "steer/rng.hpp"
#include "steer/tensor.hpp"
#include "steer/trainer.hpp"

namespace steer::testing {

inline constexpr double kFdStep = 1e-5;

// Denominator floor for the relative error. Entries whose analytic and
// numeric gradients are both below it are compared in absolute terms.
inline constexpr double kRelFloor = 1e-6;

inline double rel_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), kRelFloor});
  return std::abs(analytic - numeric) / scale;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

// Compares the gradient recorded by `loss` (run under a fresh graph) with
// central differences of the value-only `loss`. At most `per_tensor` entries
// of each tensor are probed, chosen by `rng`; 0 probes all of them.
inline GradCheck check_gradients(const std::vector<Tensor>& params,
                                 const std::function<Tensor()>& loss,
                                 Rng& rng, std::size_t per_tensor = 0,
                                 const std::vector<std::string>& names = {}) {
  for (Tensor p : params) p.zero_grad();
  {
    Graph graph;
    GraphScope scope(graph);
    graph.backward(loss());
  }
  GradCheck out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    std::vector<std::size_t> probe(p.numel());
    for (std::size_t i = 0; i < probe.size(); ++i) probe[i] = i;
    if (per_tensor != 0 && probe.size() > per_tensor) {
      for (std::size_t i = 0; i < per_tensor; ++i) {
        std::swap(probe[i], probe[i + rng.below(probe.size() - i)]);
      }
      probe.resize(per_tensor);
    }
    for (std::size_t i : probe) {
      double& v = p.mutable_data()[i];
      const double saved = v;
      v = saved + kFdStep;
      const double up = loss().item();
      v = saved - kFdStep;
      const double down = loss().item();
      v = saved;
      const double numeric = (up - down) / (2.0 * kFdStep);
      const double g = analytic.empty() ? 0.0 : analytic[i];
      const double e = rel_error(g, numeric);
      if (e > out.max_rel_error) {
        out.max_rel_error = e;
        std::ostringstream w;
        w << (k < names.size() ? names[k] : "param " + std::to_string(k)) << "[" << i
          << "] analytic " << g << " numeric " << numeric;
        out.worst = w.str();
      }
      ++out.checked;
    }
  }
  return out;
}

inline std::vector<double> uniform_values(Rng& rng, std::size_t count, double lo = -1.0,
                                          double hi = 1.0) {
  std::vector<double> v(count);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline Tensor random_parameter(Rng& rng, const Shape& shape, double scale = 1.0) {
  return Tensor::parameter(shape, uniform_values(rng, shape_numel(shape), -scale, scale));
}

// Model config over synthetic observation widths.
inline ModelConfig synthetic_config(std::size_t n, std::size_t d, Rng& rng,
                                    Variant variant = Variant::kFull,
                                    ObsMode mode = ObsMode::kGlobalState) {
  ModelConfig c;
  c.n_agents = n;
  c.local_obs_width = 3 + rng.below(3);
  c.global_obs_width = 2 + rng.below(3);
  c.actions.resize(n);
  for (auto& a : c.actions) a = 2 + rng.below(3);
  c.embed_dim = d;
  c.heads = 2;
  c.variant = variant;
  c.obs_mode = mode;
  return c;
}

inline Observation random_observation(const ModelConfig& c, Rng& rng) {
  Observation o;
  for (std::size_t i = 0; i < c.n_agents; ++i) {
    o.local.push_back(uniform_values(rng, c.local_obs_width));
  }
  if (c.obs_mode == ObsMode::kGlobalState) o.global = uniform_values(rng, c.global_obs_width);
  return o;
}

// Minibatch whose stored log-probs and values sit near the model's current
// ones, so some ratios fall inside the clip range and some outside.
inline Minibatch random_minibatch(const SteerModel& model, std::size_t samples, Rng& rng) {
  const ModelConfig& c = model.config();
  Minibatch mb;
  mb.n_agents = c.n_agents;
  for (std::size_t s = 0; s < samples; ++s) {
    mb.observations.push_back(random_observation(c, rng));
    for (std::size_t i = 0; i < c.n_agents; ++i) {
      mb.actions.push_back(rng.below(c.actions[i]));
    }
  }
  const ObsBatch ob = make_obs_batch(c, mb.observations);
  const ParallelOutput out = model.evaluate(ob, mb.actions);
  for (std::size_t k = 0; k < mb.actions.size(); ++k) {
    mb.old_log_probs.push_back(out.log_probs.at(k) + rng.uniform(-0.4, 0.4));
    mb.old_values.push_back(out.values.at(k) + rng.uniform(-0.5, 0.5));
    mb.advantages.push_back(rng.uniform(-1.0, 1.0));
    mb.returns.push_back(out.values.at(k) + rng.uniform(-1.0, 1.0));
  }
  return mb;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace steer::testing

#endif  // STEER_TESTS_SUPPORT_HPP_
