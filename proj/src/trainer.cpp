#include "steer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "steer/errors.hpp"
#include "steer/ops.hpp"
#include "steer/tensor.hpp"

namespace steer {

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("train: " + what); };
  if (total_steps == 0) fail("total steps must be positive");
  if (rollout_length == 0) fail("rollout length must be positive");
  if (epochs == 0) fail("epochs must be positive");
  if (minibatches == 0 || minibatches > rollout_length) {
    fail("minibatch count must be in [1, rollout length]");
  }
  if (!(gamma >= 0.0 && gamma <= 1.0)) fail("gamma must be in [0,1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) fail("GAE lambda must be in [0,1]");
  auto clip_ok = [](double c) { return std::isinf(c) ? c > 0 : c > 0.0 && c < 1.0; };
  if (!clip_ok(clip)) fail("clip must be in (0,1)");
  if (!clip_ok(value_clip)) fail("value clip must be in (0,1)");
  if (!(entropy_coef >= 0.0)) fail("entropy coefficient must be non-negative");
  if (!(learning_rate > 0.0)) fail("learning rate must be positive");
  if (!(max_grad_norm > 0.0)) fail("max grad norm must be positive");
  if (eval_interval == 0) fail("eval interval must be positive");
  if (eval_episodes == 0) fail("eval episode count must be positive");
}

EnvCursor start_env(const GameSpec& spec) {
  ResetResult r = reset(spec);
  return {r.state, std::move(r.observation)};
}

RolloutBatch collect_rollouts(const GameSpec& spec, EnvCursor& env,
                              const SteerModel& model, std::size_t steps,
                              Rng& rng) {
  const std::size_t n = spec.n_agents;
  if (model.config().n_agents != n) {
    throw ContractError("collect_rollouts: model has " +
                        std::to_string(model.config().n_agents) +
                        " agents, game has " + std::to_string(n));
  }
  RolloutBatch batch;
  batch.n_agents = n;
  batch.steps = steps;
  batch.observations.reserve(steps);
  batch.actions.resize(steps * n);
  batch.log_probs.resize(steps * n);
  batch.values.resize(steps * n);
  batch.rewards.resize(steps * n);
  batch.dones.resize(steps);
  batch.terminated.resize(steps);
  batch.bootstrap.assign(steps * n, 0.0);
  DecisionCache cache;  // parameters are fixed for the whole rollout

  for (std::size_t t = 0; t < steps; ++t) {
    const DecisionOutput out = model.act(env.observation, rng, ActMode::kSample, &cache);
    batch.observations.push_back(env.observation);
    StepResult next = step(spec, env.state, out.actions);
    for (std::size_t i = 0; i < n; ++i) {
      batch.actions[batch.at(t, i)] = out.actions[i];
      batch.log_probs[batch.at(t, i)] = out.log_probs[i];
      batch.values[batch.at(t, i)] = out.values[i];
      batch.rewards[batch.at(t, i)] = next.rewards[i];
    }
    batch.dones[t] = next.done;
    batch.terminated[t] = next.terminated;
    const bool truncated = next.done && !next.terminated;
    const bool last = t + 1 == steps;
    if (truncated || (last && !next.done)) {
      // Value of the successor under a freshly sampled leader prefix.
      const DecisionOutput boot = model.act(next.observation, rng, ActMode::kSample, &cache);
      for (std::size_t i = 0; i < n; ++i) batch.bootstrap[batch.at(t, i)] = boot.values[i];
    }
    if (next.done) {
      env = start_env(spec);
    } else {
      env.state = next.state;
      env.observation = std::move(next.observation);
    }
  }
  return batch;
}

void compute_gae(RolloutBatch& batch, double gamma, double lambda) {
  const std::size_t n = batch.n_agents, steps = batch.steps;
  if (batch.values.size() != steps * n || batch.rewards.size() != steps * n) {
    throw ContractError("compute_gae: batch is missing values or rewards");
  }
  batch.advantages.assign(steps * n, 0.0);
  batch.returns.assign(steps * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double running = 0.0;
    for (std::size_t k = steps; k-- > 0;) {
      const std::size_t idx = batch.at(k, i);
      double next_value;
      bool cut;  // no recursion through the successor
      if (batch.dones[k]) {
        next_value = batch.terminated[k] ? 0.0 : batch.bootstrap[idx];
        cut = true;
      } else if (k + 1 == steps) {
        next_value = batch.bootstrap[idx];
        cut = true;
      } else {
        next_value = batch.values[batch.at(k + 1, i)];
        cut = false;
      }
      const double delta =
          batch.rewards[idx] + gamma * next_value - batch.values[idx];
      running = delta + (cut ? 0.0 : gamma * lambda * running);
      batch.advantages[idx] = running;
      batch.returns[idx] = running + batch.values[idx];
    }
  }
  batch.sealed = true;
}

namespace {

bool finite(double v) { return std::isfinite(v); }

[[noreturn]] void numerical_abort(const std::string& what, std::size_t epoch,
                                  std::size_t minibatch, double policy,
                                  double value, double entropy) {
  std::ostringstream os;
  os << "non-finite " << what << " in update (epoch " << epoch << ", minibatch "
     << minibatch << "): policy_objective=" << policy << " value_loss=" << value
     << " entropy=" << entropy;
  throw NumericalError(os.str());
}

std::vector<std::size_t> permutation(std::size_t size, Rng& rng) {
  std::vector<std::size_t> p(size);
  std::iota(p.begin(), p.end(), 0);
  for (std::size_t k = size; k > 1; --k) {
    std::swap(p[k - 1], p[rng.below(k)]);
  }
  return p;
}

}  // namespace

Minibatch make_minibatch(const RolloutBatch& batch,
                         std::span<const std::size_t> steps) {
  const std::size_t n = batch.n_agents, m = steps.size();
  Minibatch mb;
  mb.n_agents = n;
  mb.observations.reserve(m);
  mb.actions.resize(m * n);
  mb.old_log_probs.resize(m * n);
  mb.old_values.resize(m * n);
  mb.advantages.resize(m * n);
  mb.returns.resize(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    const std::size_t t = steps[r];
    mb.observations.push_back(batch.observations[t]);
    for (std::size_t i = 0; i < n; ++i) {
      mb.actions[r * n + i] = batch.actions[batch.at(t, i)];
      mb.old_log_probs[r * n + i] = batch.log_probs[batch.at(t, i)];
      mb.old_values[r * n + i] = batch.values[batch.at(t, i)];
      mb.advantages[r * n + i] = batch.advantages[batch.at(t, i)];
      mb.returns[r * n + i] = batch.returns[batch.at(t, i)];
    }
  }
  std::vector<double>& adv = mb.advantages;
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t r = 0; r < m; ++r) mean += adv[r * n + i];
    mean /= static_cast<double>(m);
    for (std::size_t r = 0; r < m; ++r) {
      const double d = adv[r * n + i] - mean;
      var += d * d;
    }
    const double sd = std::max(std::sqrt(var / static_cast<double>(m)), 1e-8);
    for (std::size_t r = 0; r < m; ++r) adv[r * n + i] = (adv[r * n + i] - mean) / sd;
  }
  return mb;
}

LossTerms ppo_loss(const SteerModel& model, const Minibatch& mb,
                   const TrainConfig& config) {
  const ObsBatch ob = make_obs_batch(model.config(), mb.observations);
  const ParallelOutput out = model.evaluate(ob, mb.actions);
  const Shape shape{mb.actions.size()};
  const Tensor old_logp = Tensor::from(shape, mb.old_log_probs);
  const Tensor adv = Tensor::from(shape, mb.advantages);
  const Tensor old_v = Tensor::from(shape, mb.old_values);
  const Tensor ret = Tensor::from(shape, mb.returns);

  LossTerms t;
  t.ratio = ops::exp(ops::sub(out.log_probs, old_logp));
  const Tensor surrogate = ops::minimum(
      ops::mul(t.ratio, adv),
      ops::mul(ops::clamp(t.ratio, 1.0 - config.clip, 1.0 + config.clip), adv));
  t.entropy = ops::mean(out.entropies);
  t.objective = ops::add(ops::mean(surrogate), ops::scale(t.entropy, config.entropy_coef));
  const Tensor v_clipped = ops::add(
      old_v, ops::clamp(ops::sub(out.values, old_v), -config.value_clip,
                        config.value_clip));
  t.value_loss = ops::mean(ops::maximum(ops::square(ops::sub(out.values, ret)),
                                        ops::square(ops::sub(v_clipped, ret))));
  t.loss = ops::add(ops::scale(t.objective, -1.0),
                    ops::scale(t.value_loss, config.value_coef));
  return t;
}

UpdateReport ppo_update(SteerModel& model, AdamState& optimizer,
                        const RolloutBatch& batch, const TrainConfig& config,
                        Rng& rng) {
  if (!batch.sealed) throw ContractError("ppo_update: advantages not computed");
  const std::size_t n = batch.n_agents, steps = batch.steps;
  const nn::ParameterSet& params = model.parameters();
  optimizer.learning_rate = config.learning_rate;

  UpdateReport report;
  std::size_t passes = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const std::vector<std::size_t> order = permutation(steps, rng);
    double epoch_value = 0.0;
    for (std::size_t mb = 0; mb < config.minibatches; ++mb) {
      const std::size_t begin = mb * steps / config.minibatches;
      const std::size_t end = (mb + 1) * steps / config.minibatches;
      const std::size_t m = end - begin;

      const Minibatch mbatch = make_minibatch(
          batch, std::span<const std::size_t>(order).subspan(begin, m));
      Graph graph;
      GraphScope scope(graph);
      const LossTerms terms = ppo_loss(model, mbatch, config);
      const Tensor& loss = terms.loss;
      const Tensor& objective = terms.objective;
      const Tensor& value_loss = terms.value_loss;
      const Tensor& entropy = terms.entropy;
      const Tensor& ratio = terms.ratio;

      if (!finite(loss.item())) {
        numerical_abort("loss", epoch, mb, objective.item(), value_loss.item(),
                        entropy.item());
      }
      graph.backward(loss);
      const double norm = clip_grad_norm(params, config.max_grad_norm);
      if (!finite(norm)) {
        numerical_abort("gradient norm", epoch, mb, objective.item(),
                        value_loss.item(), entropy.item());
      }
      adam_step(params, optimizer);

      std::size_t clipped = 0;
      double deviation = 0.0;
      for (double r : ratio.data()) {
        deviation = std::max(deviation, std::abs(r - 1.0));
        if (std::abs(r - 1.0) > config.clip) ++clipped;
      }
      if (epoch == 0 && mb == 0) report.first_ratio_deviation = deviation;
      report.policy_loss += -objective.item();
      report.value_loss += value_loss.item();
      report.entropy += entropy.item();
      report.clip_fraction +=
          static_cast<double>(clipped) / static_cast<double>(m * n);
      report.grad_norm += norm;
      epoch_value += value_loss.item();
      ++passes;
    }
    report.epoch_value_losses.push_back(epoch_value /
                                        static_cast<double>(config.minibatches));
  }
  const double p = static_cast<double>(passes);
  report.policy_loss /= p;
  report.value_loss /= p;
  report.entropy /= p;
  report.clip_fraction /= p;
  report.grad_norm /= p;
  return report;
}

EvalResult evaluate_greedy(const GameSpec& spec, const SteerModel& model,
                           const equilibria::EquilibriumReport& oracle,
                           std::size_t episodes) {
  EvalResult result;
  result.returns.assign(spec.n_agents, 0.0);
  result.se_match = true;
  Rng unused(0);
  DecisionCache cache;
  for (std::size_t e = 0; e < episodes; ++e) {
    EnvCursor env = start_env(spec);
    std::vector<JointAction> trajectory;
    double discount = 1.0;
    while (!env.state.done) {
      const DecisionOutput out = model.act(env.observation, unused, ActMode::kGreedy, &cache);
      StepResult next = step(spec, env.state, out.actions);
      for (std::size_t i = 0; i < spec.n_agents; ++i) {
        result.returns[i] += discount * next.rewards[i];
      }
      discount *= spec.gamma;
      trajectory.push_back(out.actions);
      env.state = next.state;
      env.observation = std::move(next.observation);
    }
    result.se_match = result.se_match && equilibria::matches_se(spec, oracle, trajectory);
    result.trajectory = std::move(trajectory);
  }
  for (double& r : result.returns) r /= static_cast<double>(episodes);
  return result;
}

TrainResult train(const GameSpec& spec, const ModelConfig& model_config,
                  const TrainConfig& config, const UpdateHook& hook) {
  config.validate();
  model_config.validate();
  if (model_config.n_agents != spec.n_agents ||
      model_config.actions != spec.actions) {
    throw ConfigError("train: model config does not match game '" + spec.name + "'");
  }
  const equilibria::EquilibriumReport oracle =
      equilibria::solve_stages(spec, model_config.decision_order());

  // Independent streams for initialisation and for sampling/shuffling.
  Rng seeder(config.seed);
  const std::uint64_t init_seed = seeder.next();
  Rng rng(seeder.next());

  TrainResult result{SteerModel(model_config, init_seed), {}, {}};
  AdamState optimizer;
  optimizer.learning_rate = config.learning_rate;
  EnvCursor env = start_env(spec);

  const std::size_t updates = config.total_steps / config.rollout_length;
  result.metrics.reserve(updates);
  for (std::size_t u = 0; u < updates; ++u) {
    RolloutBatch batch =
        collect_rollouts(spec, env, result.model, config.rollout_length, rng);
    compute_gae(batch, config.gamma, config.gae_lambda);
    const UpdateReport report = ppo_update(result.model, optimizer, batch, config, rng);

    MetricsRow row;
    row.step = (u + 1) * config.rollout_length;
    row.policy_loss = report.policy_loss;
    row.value_loss = report.value_loss;
    row.entropy = report.entropy;
    row.clip_fraction = report.clip_fraction;
    row.grad_norm = report.grad_norm;
    const bool last = u + 1 == updates;
    if (last || (u + 1) % config.eval_interval == 0) {
      row.eval = evaluate_greedy(spec, result.model, oracle, config.eval_episodes);
    }
    if (hook) hook(row);
    result.metrics.push_back(std::move(row));
  }
  result.final_eval = result.metrics.empty()
                          ? evaluate_greedy(spec, result.model, oracle,
                                            config.eval_episodes)
                          : *result.metrics.back().eval;
  return result;
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string metrics_csv(const std::vector<MetricsRow>& rows, std::size_t n_agents) {
  std::string out = "step,policy_loss,value_loss,entropy,clip_fraction,grad_norm";
  for (std::size_t i = 0; i < n_agents; ++i) {
    out += ",eval_return_mean_" + std::to_string(i + 1);
  }
  out += ",se_match\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + ',' + num(r.policy_loss) + ',' +
           num(r.value_loss) + ',' + num(r.entropy) + ',' +
           num(r.clip_fraction) + ',' + num(r.grad_norm);
    for (std::size_t i = 0; i < n_agents; ++i) {
      out += ',';
      if (r.eval) out += num(r.eval->returns[i]);
    }
    out += ',';
    if (r.eval) out += r.eval->se_match ? '1' : '0';
    out += '\n';
  }
  return out;
}

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<MetricsRow>& rows, std::size_t n_agents) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write metrics '" + path.string() + "'");
  os << metrics_csv(rows, n_agents);
  if (!os) throw std::runtime_error("failed writing metrics '" + path.string() + "'");
}

}  // namespace steer
