#ifndef STEER_TRAINER_HPP_
#define STEER_TRAINER_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "steer/adam.hpp"
#include "steer/equilibria.hpp"
#include "steer/game.hpp"
#include "steer/model.hpp"
#include "steer/rng.hpp"

namespace steer {

struct TrainConfig {
  std::size_t total_steps = 60'000;
  std::size_t rollout_length = 128;
  std::size_t epochs = 4;
  std::size_t minibatches = 2;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  // An infinite clip disables clipping.
  double clip = 0.2;
  double value_clip = 0.2;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double learning_rate = 5e-4;
  double max_grad_norm = 0.5;
  std::uint64_t seed = 0;
  std::size_t eval_interval = 1;  // updates between greedy evaluations
  std::size_t eval_episodes = 1;

  // Throws ConfigError.
  void validate() const;
};

// Environment cursor carried across rollouts.
struct EnvCursor {
  EnvState state;
  Observation observation;
};

EnvCursor start_env(const GameSpec& spec);

// Flat per-step storage; per-agent fields are [steps x n] row-major.
struct RolloutBatch {
  std::size_t n_agents = 0;
  std::size_t steps = 0;
  std::vector<Observation> observations;
  std::vector<std::size_t> actions;
  std::vector<double> log_probs;
  std::vector<double> values;
  std::vector<double> rewards;
  std::vector<std::uint8_t> dones;
  std::vector<std::uint8_t> terminated;
  // Next-state value for steps whose successor is not the next stored step:
  // horizon truncation and the final step of an unfinished rollout.
  std::vector<double> bootstrap;
  std::vector<double> advantages;
  std::vector<double> returns;
  bool sealed = false;

  std::size_t at(std::size_t t, std::size_t agent) const {
    return t * n_agents + agent;
  }
};

RolloutBatch collect_rollouts(const GameSpec& spec, EnvCursor& env,
                              const SteerModel& model, std::size_t steps,
                              Rng& rng);

// Per-agent advantage recursion over private rewards; seals the batch.
void compute_gae(RolloutBatch& batch, double gamma, double lambda);

// Flattened [m x n] slice of a sealed batch; advantages normalised per agent
// over the slice.
struct Minibatch {
  std::size_t n_agents = 0;
  std::vector<Observation> observations;
  std::vector<std::size_t> actions;
  std::vector<double> old_log_probs;
  std::vector<double> old_values;
  std::vector<double> advantages;
  std::vector<double> returns;
};

Minibatch make_minibatch(const RolloutBatch& batch,
                         std::span<const std::size_t> steps);

struct LossTerms {
  Tensor loss;       // -objective + value_coef * value_loss
  Tensor objective;  // clipped surrogate + entropy bonus
  Tensor value_loss;
  Tensor entropy;
  Tensor ratio;      // per (sample, agent)
};

// Records into the active graph when one is set.
LossTerms ppo_loss(const SteerModel& model, const Minibatch& batch,
                   const TrainConfig& config);

struct UpdateReport {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;  // before clipping, averaged over minibatches
  // Largest |ratio - 1| in the first minibatch of the first epoch.
  double first_ratio_deviation = 0.0;
  // Value loss of each epoch, averaged over its minibatches.
  std::vector<double> epoch_value_losses;
};

UpdateReport ppo_update(SteerModel& model, AdamState& optimizer,
                        const RolloutBatch& batch, const TrainConfig& config,
                        Rng& rng);

struct EvalResult {
  std::vector<double> returns;  // per agent, mean over episodes
  bool se_match = false;        // every episode matched
  std::vector<JointAction> trajectory;  // of the last episode
};

EvalResult evaluate_greedy(const GameSpec& spec, const SteerModel& model,
                           const equilibria::EquilibriumReport& oracle,
                           std::size_t episodes);

struct MetricsRow {
  std::size_t step = 0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;
  std::optional<EvalResult> eval;
};

struct TrainResult {
  SteerModel model;
  std::vector<MetricsRow> metrics;
  EvalResult final_eval;
};

// Called after every update; used for progress output.
using UpdateHook = std::function<void(const MetricsRow&)>;

TrainResult train(const GameSpec& spec, const ModelConfig& model_config,
                  const TrainConfig& config, const UpdateHook& hook = {});

std::string metrics_csv(const std::vector<MetricsRow>& rows,
                        std::size_t n_agents);
void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<MetricsRow>& rows,
                       std::size_t n_agents);

}  // namespace steer

#endif  // STEER_TRAINER_HPP_
