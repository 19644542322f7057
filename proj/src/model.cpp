#include "steer/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>
#include <set>

#include <nlohmann/json.hpp>

#include "steer/errors.hpp"
#include "steer/ops.hpp"

namespace steer {

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kItbMlp: return "itb-mlp";
    case Variant::kOtbGru: return "otb-gru";
    case Variant::kItbOnly: return "itb-only";
    case Variant::kOtbOnly: return "otb-only";
  }
  return "?";
}

Variant parse_variant(std::string_view text) {
  for (Variant v : {Variant::kFull, Variant::kItbMlp, Variant::kOtbGru,
                    Variant::kItbOnly, Variant::kOtbOnly}) {
    if (text == variant_name(v)) return v;
  }
  throw ConfigError("unknown model variant '" + std::string(text) +
                    "' (expected full, itb-mlp, otb-gru, itb-only or otb-only)");
}

std::size_t ModelConfig::max_actions() const {
  return actions.empty() ? 0 : *std::max_element(actions.begin(), actions.end());
}

std::vector<std::size_t> ModelConfig::decision_order() const {
  if (!priority.empty()) return priority;
  std::vector<std::size_t> order(n_agents);
  for (std::size_t i = 0; i < n_agents; ++i) order[i] = i;
  return order;
}

void ModelConfig::validate() const {
  if (n_agents == 0) throw ConfigError("model: need at least one agent");
  if (actions.size() != n_agents) {
    throw ConfigError("model: " + std::to_string(actions.size()) +
                      " action counts for " + std::to_string(n_agents) +
                      " agents");
  }
  for (std::size_t a : actions) {
    if (a == 0) throw ConfigError("model: empty action space");
  }
  if (local_obs_width == 0) throw ConfigError("model: zero observation width");
  if (obs_mode == ObsMode::kGlobalState && global_obs_width == 0) {
    throw ConfigError("model: global-state mode needs a global width");
  }
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
    throw ConfigError("model: embed dim " + std::to_string(embed_dim) +
                      " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (inner_depth == 0 || outer_depth == 0) {
    throw ConfigError("model: block depths must be at least 1");
  }
  if (!priority.empty()) {
    std::vector<std::size_t> sorted = priority;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted.size() != n_agents || sorted[i] != i) {
        throw ConfigError("model: priority is not a permutation of agents");
      }
    }
  }
}

ModelConfig config_for(const GameSpec& spec, Variant variant) {
  ModelConfig config;
  config.n_agents = spec.n_agents;
  config.local_obs_width = spec.local_obs_width();
  config.global_obs_width = spec.global_obs_width();
  config.actions = spec.actions;
  config.variant = variant;
  config.obs_mode = spec.obs_mode;
  config.priority = spec.priority;
  return config;
}

namespace {

std::size_t block_count(std::size_t d) {
  return nn::TransformerBlock::parameter_count(d);
}

bool uses_outer(Variant v) { return v != Variant::kItbOnly; }
bool uses_outer_attention(Variant v) {
  return v == Variant::kFull || v == Variant::kItbMlp || v == Variant::kOtbOnly;
}
bool uses_inner_attention(Variant v) { return v != Variant::kItbMlp; }

std::set<std::size_t> head_sizes(const ModelConfig& c) {
  return {c.actions.begin(), c.actions.end()};
}

constexpr double kActorOutGain = 0.01;
// Action embeddings start at unit scale, as token tables usually do.
constexpr double kActionEmbedBound = 1.0;

}  // namespace

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.embed_dim, n = c.n_agents;
  std::size_t total = 0;
  total += c.obs_mode == ObsMode::kGlobalState
               ? nn::Linear::parameter_count(c.global_obs_width, d)
               : d;
  total += nn::Linear::parameter_count(c.local_obs_width, d);
  total += (n + 1) * d;
  total += uses_inner_attention(c.variant)
               ? c.inner_depth * block_count(d)
               : nn::Mlp::parameter_count(d, 4 * d, d);
  total += nn::Mlp::parameter_count(d, d, d);
  if (uses_outer(c.variant)) {
    total += c.max_actions() * d + nn::Mlp::parameter_count(d, d, d);
    total += uses_outer_attention(c.variant)
                 ? n * d + c.outer_depth * block_count(d)
                 : nn::GruCell::parameter_count(d, d);
    total += nn::Mlp::parameter_count(d, d, d);
  }
  total += nn::Mlp::parameter_count(d, d, 1);
  for (std::size_t a : head_sizes(c)) total += nn::Mlp::parameter_count(d, d, a);
  return total;
}

ObsBatch make_obs_batch(const ModelConfig& config,
                        std::span<const Observation> observations) {
  ObsBatch batch;
  batch.batch = observations.size();
  const std::size_t n = config.n_agents, lw = config.local_obs_width;
  std::vector<double> local;
  local.reserve(batch.batch * n * lw);
  std::vector<double> global;
  const bool with_global = config.obs_mode == ObsMode::kGlobalState;
  for (const auto& obs : observations) {
    if (obs.local.size() != n) {
      throw ConfigError("observation has " + std::to_string(obs.local.size()) +
                        " agents, model expects " + std::to_string(n));
    }
    for (const auto& row : obs.local) {
      if (row.size() != lw) {
        throw ConfigError("observation width " + std::to_string(row.size()) +
                          " does not match model width " + std::to_string(lw));
      }
      local.insert(local.end(), row.begin(), row.end());
    }
    if (with_global) {
      if (!obs.global || obs.global->size() != config.global_obs_width) {
        throw ConfigError("global-state model needs a global observation of width " +
                          std::to_string(config.global_obs_width));
      }
      global.insert(global.end(), obs.global->begin(), obs.global->end());
    }
  }
  batch.local = Tensor::from({batch.batch * n, lw}, std::move(local));
  if (with_global) {
    batch.global = Tensor::from({batch.batch, config.global_obs_width},
                                std::move(global));
  }
  return batch;
}

SteerModel::SteerModel(const ModelConfig& config, std::uint64_t init_seed)
    : config_(config) {
  config_.validate();
  n_ = config_.n_agents;
  d_ = config_.embed_dim;
  order_ = config_.decision_order();
  level_of_.assign(n_, 0);
  for (std::size_t l = 0; l < n_; ++l) level_of_[order_[l]] = l;

  Rng rng(init_seed);
  const double pos_bound = 1.0 / std::sqrt(static_cast<double>(d_));
  auto table = [&](std::size_t rows) {
    std::vector<double> v(rows * d_);
    for (double& x : v) x = rng.uniform(-pos_bound, pos_bound);
    return Tensor::parameter({rows, d_}, std::move(v));
  };
  const Variant v = config_.variant;

  if (config_.obs_mode == ObsMode::kGlobalState) {
    global_embed_ = nn::Linear(config_.global_obs_width, d_, rng);
    global_embed_.collect(params_, "inner.state_embed");
  } else {
    class_token_ = table(1);
    params_.add("inner.class_token", class_token_);
  }
  local_embed_ = nn::Linear(config_.local_obs_width, d_, rng);
  local_embed_.collect(params_, "inner.obs_embed");
  inner_pos_ = table(n_ + 1);
  params_.add("inner.pos", inner_pos_);
  if (uses_inner_attention(v)) {
    for (std::size_t j = 0; j < config_.inner_depth; ++j) {
      inner_blocks_.emplace_back(d_, config_.heads, rng);
      inner_blocks_.back().collect(params_, "inner.block" + std::to_string(j));
    }
  } else {
    inner_token_mlp_ = nn::Mlp(d_, 4 * d_, d_, rng);
    inner_token_mlp_.collect(params_, "inner.token_mlp");
  }
  inner_out_ = nn::Mlp(d_, d_, d_, rng);
  inner_out_.collect(params_, "inner.out");

  if (uses_outer(v)) {
    std::vector<double> embed(config_.max_actions() * d_);
    for (double& x : embed) x = rng.uniform(-kActionEmbedBound, kActionEmbedBound);
    action_embed_ = Tensor::parameter({config_.max_actions(), d_}, std::move(embed));
    params_.add("outer.action_embed", action_embed_);
    outer_in_ = nn::Mlp(d_, d_, d_, rng);
    outer_in_.collect(params_, "outer.in");
    if (uses_outer_attention(v)) {
      outer_pos_ = table(n_);
      params_.add("outer.pos", outer_pos_);
      for (std::size_t j = 0; j < config_.outer_depth; ++j) {
        outer_blocks_.emplace_back(d_, config_.heads, rng);
        outer_blocks_.back().collect(params_, "outer.block" + std::to_string(j));
      }
    } else {
      outer_gru_ = nn::GruCell(d_, d_, rng);
      outer_gru_.collect(params_, "outer.gru");
    }
    outer_out_ = nn::Mlp(d_, d_, d_, rng);
    outer_out_.collect(params_, "outer.out");
  }

  critic_ = nn::Mlp(d_, d_, 1, rng);
  critic_.collect(params_, "critic");
  for (std::size_t a : head_sizes(config_)) {
    auto [it, _] = actors_.emplace(a, nn::Mlp(d_, d_, a, rng, kActorOutGain));
    it->second.collect(params_, "actor" + std::to_string(a));
  }
}

bool SteerModel::has_outer() const { return uses_outer(config_.variant); }
bool SteerModel::has_inner_attention() const {
  return uses_inner_attention(config_.variant);
}

SteerModel::Encoded SteerModel::encode(const ObsBatch& obs) const {
  const std::size_t batch = obs.batch;
  if (obs.local.rows() != batch * n_ ||
      obs.local.cols() != config_.local_obs_width) {
    throw ConfigError("encode: local observations " +
                      shape_str(obs.local.shape()) + " do not match the model");
  }
  Tensor state;
  if (config_.obs_mode == ObsMode::kGlobalState) {
    if (!obs.global.defined()) {
      throw ConfigError("encode: global-state model given no global state");
    }
    state = global_embed_(obs.global);
  } else {
    std::vector<std::size_t> zeros(batch, 0);
    state = ops::gather_rows(class_token_, zeros);
  }
  Tensor agents = local_embed_(obs.local);
  const std::size_t tokens = n_ + 1;
  std::vector<std::size_t> order(batch * tokens), pos(batch * tokens);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < tokens; ++t) {
      order[b * tokens + t] = t == 0 ? b : batch + b * n_ + (t - 1);
      pos[b * tokens + t] = t;
    }
  }
  const Tensor parts[] = {state, agents};
  Tensor x = ops::gather_rows(ops::concat_rows(parts), order);
  x = ops::add(x, ops::gather_rows(inner_pos_, pos));
  if (has_inner_attention()) {
    for (const auto& block : inner_blocks_) x = block(x, batch, tokens, false);
  } else {
    x = inner_token_mlp_(x);
  }
  return {inner_out_(x), batch};
}

Tensor SteerModel::outer(const Encoded& enc, std::span<const std::size_t> prefix,
                         std::size_t len) const {
  if (!has_outer()) return {};
  const std::size_t batch = enc.batch;
  if (len == 0 || len > n_ || prefix.size() != batch * (len - 1)) {
    throw ContractError("outer: prefix of " + std::to_string(prefix.size()) +
                        " actions for batch " + std::to_string(batch) +
                        " and length " + std::to_string(len));
  }
  std::vector<std::size_t> state_rows(batch);
  for (std::size_t b = 0; b < batch; ++b) state_rows[b] = state_row(b);
  std::vector<std::size_t> order(batch * len);
  std::vector<Tensor> parts{ops::gather_rows(enc.tokens, state_rows)};
  if (len > 1) parts.push_back(ops::gather_rows(action_embed_, prefix));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len; ++t) {
      order[b * len + t] = t == 0 ? b : batch + b * (len - 1) + (t - 1);
    }
  }
  Tensor z = outer_in_(ops::gather_rows(ops::concat_rows(parts), order));

  if (uses_outer_attention(config_.variant)) {
    std::vector<std::size_t> pos(batch * len);
    for (std::size_t r = 0; r < pos.size(); ++r) pos[r] = r % len;
    z = ops::add(z, ops::gather_rows(outer_pos_, pos));
    for (const auto& block : outer_blocks_) z = block(z, batch, len, true);
  } else {
    // Left-to-right scan; hidden states collected step-major.
    Tensor h = Tensor::zeros({batch, d_});
    std::vector<Tensor> hidden;
    std::vector<std::size_t> rows(batch);
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t b = 0; b < batch; ++b) rows[b] = b * len + t;
      h = outer_gru_(ops::gather_rows(z, rows), h);
      hidden.push_back(h);
    }
    std::vector<std::size_t> back(batch * len);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < len; ++t) back[b * len + t] = t * batch + b;
    }
    z = ops::gather_rows(ops::concat_rows(hidden), back);
  }
  return outer_out_(z);
}

Tensor SteerModel::subgame(const Encoded& enc, const Tensor& outer_out,
                           std::size_t len, std::span<const std::size_t> samples,
                           std::span<const std::size_t> levels) const {
  const std::size_t m = samples.size();
  std::vector<std::size_t> inner_rows(m), outer_rows(m);
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t b = samples[k], l = levels[k];
    if (config_.alignment == Alignment::kOwnToken) {
      inner_rows[k] = agent_row(b, order_[l]);
    } else {
      inner_rows[k] = l == 0 ? state_row(b) : agent_row(b, l - 1);
    }
    outer_rows[k] = b * len + l;
  }
  switch (config_.variant) {
    case Variant::kItbOnly:
      return ops::gather_rows(enc.tokens, inner_rows);
    case Variant::kOtbOnly:
      return ops::gather_rows(outer_out, outer_rows);
    default:
      return ops::add(ops::gather_rows(enc.tokens, inner_rows),
                      ops::gather_rows(outer_out, outer_rows));
  }
}

Tensor SteerModel::critic(const Tensor& embedding) const {
  return critic_(embedding);
}

Tensor SteerModel::actor(const Tensor& embedding, std::size_t action_count) const {
  const auto it = actors_.find(action_count);
  if (it == actors_.end()) {
    throw ConfigError("no actor head for " + std::to_string(action_count) +
                      " actions");
  }
  return it->second(embedding);
}

AgentHeads SteerModel::heads_at(const Observation& obs,
                                std::span<const std::size_t> leader_actions) const {
  const std::size_t level = leader_actions.size();
  if (level >= n_) throw ContractError("heads_at: prefix longer than n-1");
  const ObsBatch batch = make_obs_batch(config_, std::span(&obs, 1));
  const Encoded enc = encode(batch);
  const Tensor y = outer(enc, leader_actions, level + 1);
  const std::size_t sample = 0;
  const Tensor s = subgame(enc, y, level + 1, std::span(&sample, 1),
                           std::span(&level, 1));
  AgentHeads out;
  out.embedding.assign(s.data().begin(), s.data().end());
  out.value = critic(s).item();
  const Tensor logits = actor(s, config_.actions[order_[level]]);
  out.logits.assign(logits.data().begin(), logits.data().end());
  return out;
}

namespace {

std::vector<double> obs_key(const Observation& obs) {
  std::vector<double> key;
  for (const auto& row : obs.local) key.insert(key.end(), row.begin(), row.end());
  if (obs.global) key.insert(key.end(), obs.global->begin(), obs.global->end());
  return key;
}

}  // namespace

DecisionOutput SteerModel::act(const Observation& obs, Rng& rng, ActMode mode,
                               DecisionCache* cache) const {
  const ObsBatch batch = make_obs_batch(config_, std::span(&obs, 1));
  std::optional<Encoded> enc;
  std::vector<double> key;
  if (cache) key = obs_key(obs);
  DecisionOutput out;
  out.actions.assign(n_, 0);
  out.log_probs.assign(n_, 0.0);
  out.values.assign(n_, 0.0);
  out.entropies.assign(n_, 0.0);
  std::vector<std::size_t> prefix;
  const std::size_t sample = 0;
  for (std::size_t level = 0; level < n_; ++level) {
    const std::size_t agent = order_[level];
    DecisionCache::Entry computed;
    const DecisionCache::Entry* entry = nullptr;
    if (cache) {
      if (level > 0) key.push_back(static_cast<double>(prefix.back()));
      const auto it = cache->entries.find(key);
      if (it != cache->entries.end()) entry = &it->second;
    }
    if (!entry) {
      if (!enc) enc = encode(batch);
      const Tensor y = outer(*enc, prefix, level + 1);
      const Tensor s = subgame(*enc, y, level + 1, std::span(&sample, 1),
                               std::span(&level, 1));
      const Tensor logp = ops::log_softmax(actor(s, config_.actions[agent]));
      computed.log_probs.assign(logp.data().begin(), logp.data().end());
      computed.value = critic(s).item();
      entry = cache ? &cache->entries.emplace(key, std::move(computed)).first->second
                    : &computed;
    }
    const auto& lp = entry->log_probs;
    std::size_t choice = 0;
    if (mode == ActMode::kGreedy) {
      for (std::size_t a = 1; a < lp.size(); ++a) {
        if (lp[a] > lp[choice]) choice = a;
      }
    } else {
      std::vector<double> probs(lp.size());
      for (std::size_t a = 0; a < lp.size(); ++a) probs[a] = std::exp(lp[a]);
      choice = rng.categorical(probs);
    }
    double entropy = 0.0;
    for (double v : lp) entropy -= std::exp(v) * v;
    out.actions[agent] = choice;
    out.log_probs[agent] = lp[choice];
    out.values[agent] = entry->value;
    out.entropies[agent] = entropy;
    prefix.push_back(choice);
  }
  return out;
}

ParallelOutput SteerModel::evaluate(const ObsBatch& obs,
                                    std::span<const std::size_t> joint) const {
  const std::size_t batch = obs.batch;
  if (joint.size() != batch * n_) {
    throw ContractError("evaluate: " + std::to_string(joint.size()) +
                        " actions for batch " + std::to_string(batch) + " of " +
                        std::to_string(n_) + " agents");
  }
  for (std::size_t r = 0; r < joint.size(); ++r) {
    if (joint[r] >= config_.actions[r % n_]) {
      throw ContractError("evaluate: action " + std::to_string(joint[r]) +
                          " out of range for agent " + std::to_string(r % n_));
    }
  }
  // Unique observations, then unique (observation, leader prefix) keys.
  const std::size_t lw = config_.local_obs_width;
  const std::size_t gw =
      config_.obs_mode == ObsMode::kGlobalState ? config_.global_obs_width : 0;
  const auto local = obs.local.data();
  std::map<std::vector<double>, std::size_t> obs_ids;
  std::vector<std::size_t> obs_of(batch), first_of_obs;
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<double> key(local.begin() + b * n_ * lw,
                            local.begin() + (b + 1) * n_ * lw);
    if (gw) {
      const auto global = obs.global.data();
      key.insert(key.end(), global.begin() + b * gw, global.begin() + (b + 1) * gw);
    }
    const auto [it, fresh] = obs_ids.emplace(std::move(key), first_of_obs.size());
    if (fresh) first_of_obs.push_back(b);
    obs_of[b] = it->second;
  }
  std::map<std::vector<std::size_t>, std::size_t> key_ids;
  std::vector<std::size_t> key_of(batch), key_obs, prefix;
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<std::size_t> key{obs_of[b]};
    for (std::size_t l = 0; l + 1 < n_; ++l) key.push_back(joint[b * n_ + order_[l]]);
    const auto [it, fresh] = key_ids.emplace(key, key_obs.size());
    if (fresh) {
      key_obs.push_back(obs_of[b]);
      prefix.insert(prefix.end(), key.begin() + 1, key.end());
    }
    key_of[b] = it->second;
  }

  ObsBatch unique_obs;
  unique_obs.batch = first_of_obs.size();
  std::vector<std::size_t> local_rows;
  for (std::size_t b : first_of_obs) {
    for (std::size_t i = 0; i < n_; ++i) local_rows.push_back(b * n_ + i);
  }
  unique_obs.local = ops::gather_rows(obs.local, local_rows);
  if (gw) unique_obs.global = ops::gather_rows(obs.global, first_of_obs);
  const Encoded unique_enc = encode(unique_obs);

  std::vector<std::size_t> token_rows;
  for (std::size_t u : key_obs) {
    for (std::size_t t = 0; t <= n_; ++t) token_rows.push_back(u * (n_ + 1) + t);
  }
  const Encoded enc{ops::gather_rows(unique_enc.tokens, token_rows), key_obs.size()};
  const Tensor y = outer(enc, prefix, n_);

  // Rows in (sample, level) order.
  std::vector<std::size_t> samples(batch * n_), levels(batch * n_);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t l = 0; l < n_; ++l) {
      samples[b * n_ + l] = key_of[b];
      levels[b * n_ + l] = l;
    }
  }
  const Tensor s = subgame(enc, y, n_, samples, levels);

  // Row of (b, level) for output position (b, agent).
  std::vector<std::size_t> to_agent(batch * n_);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < n_; ++i) to_agent[b * n_ + i] = b * n_ + level_of_[i];
  }
  ParallelOutput out;
  out.values = ops::reshape(ops::gather_rows(critic(s), to_agent), {batch * n_});

  std::vector<Tensor> logp_parts, ent_parts;
  std::vector<std::size_t> position(batch * n_);
  std::size_t offset = 0;
  for (const auto& [count, head] : actors_) {
    std::vector<std::size_t> rows, actions;
    for (std::size_t r = 0; r < batch * n_; ++r) {
      const std::size_t agent = order_[levels[r]];
      if (config_.actions[agent] != count) continue;
      position[r] = offset + rows.size();
      rows.push_back(r);
      actions.push_back(joint[(r / n_) * n_ + agent]);
    }
    if (rows.empty()) continue;
    const Tensor logp = ops::log_softmax(head(ops::gather_rows(s, rows)));
    logp_parts.push_back(ops::reshape(ops::pick(logp, actions), {rows.size(), 1}));
    ent_parts.push_back(ops::reshape(ops::row_entropy(logp), {rows.size(), 1}));
    offset += rows.size();
  }
  std::vector<std::size_t> gather(batch * n_);
  for (std::size_t k = 0; k < gather.size(); ++k) gather[k] = position[to_agent[k]];
  out.log_probs = ops::reshape(
      ops::gather_rows(ops::concat_rows(logp_parts), gather), {batch * n_});
  out.entropies = ops::reshape(
      ops::gather_rows(ops::concat_rows(ent_parts), gather), {batch * n_});
  return out;
}

namespace {

constexpr char kCheckpointMagic[8] = {'S', 'T', 'E', 'E', 'R', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_agents", c.n_agents},
          {"local_obs_width", c.local_obs_width},
          {"global_obs_width", c.global_obs_width},
          {"actions", c.actions},
          {"embed_dim", c.embed_dim},
          {"inner_depth", c.inner_depth},
          {"outer_depth", c.outer_depth},
          {"heads", c.heads},
          {"variant", variant_name(c.variant)},
          {"obs_mode", obs_mode_name(c.obs_mode)},
          {"alignment", c.alignment == Alignment::kOwnToken ? "own-token" : "slice"},
          {"priority", c.priority}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_agents = j.at("n_agents");
  c.local_obs_width = j.at("local_obs_width");
  c.global_obs_width = j.at("global_obs_width");
  c.actions = j.at("actions").get<std::vector<std::size_t>>();
  c.embed_dim = j.at("embed_dim");
  c.inner_depth = j.at("inner_depth");
  c.outer_depth = j.at("outer_depth");
  c.heads = j.at("heads");
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.obs_mode = parse_obs_mode(j.at("obs_mode").get<std::string>());
  c.alignment = j.at("alignment") == "slice" ? Alignment::kSlice : Alignment::kOwnToken;
  c.priority = j.at("priority").get<std::vector<std::size_t>>();
  return c;
}

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

// Layout: magic, u32 version, u64 config length, config JSON, u64 tensor
// count, then per tensor: u32 name length, name, u32 rank, u64 dims, f64 data.
void SteerModel::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint '" + path.string() + "'");
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  write_pod(os, kCheckpointVersion);
  const std::string cfg = config_to_json(config_).dump();
  write_pod(os, static_cast<std::uint64_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  write_pod(os, static_cast<std::uint64_t>(params_.size()));
  for (const auto& p : params_.items()) {
    write_pod(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_pod(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t dim : p.tensor.shape()) write_pod(os, static_cast<std::uint64_t>(dim));
    const auto data = p.tensor.data();
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint '" + path.string() + "'");
}

SteerModel SteerModel::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  char magic[sizeof(kCheckpointMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("'" + path.string() + "' is not a checkpoint");
  }
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  std::string cfg(read_pod<std::uint64_t>(is), '\0');
  is.read(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  SteerModel model(config_from_json(nlohmann::json::parse(cfg)), 0);
  const auto count = read_pod<std::uint64_t>(is);
  if (count != model.params_.size()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(count) +
                             " tensors, model has " +
                             std::to_string(model.params_.size()));
  }
  for (const auto& p : model.params_.items()) {
    std::string name(read_pod<std::uint32_t>(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    if (name != p.name) {
      throw std::runtime_error("checkpoint tensor '" + name + "' where '" +
                               p.name + "' was expected");
    }
    Shape shape(read_pod<std::uint32_t>(is));
    for (auto& dim : shape) dim = read_pod<std::uint64_t>(is);
    if (shape != p.tensor.shape()) {
      throw std::runtime_error("checkpoint tensor '" + name + "' has shape " +
                               shape_str(shape) + ", expected " +
                               shape_str(p.tensor.shape()));
    }
    Tensor t = p.tensor;
    auto data = t.mutable_data();
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
  }
  return model;
}

SteerModel build_variant(const ModelConfig& config, std::uint64_t init_seed) {
  return SteerModel(config, init_seed);
}

}  // namespace steer
