#ifndef STEER_MODEL_HPP_
#define STEER_MODEL_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "steer/game.hpp"
#include "steer/nn.hpp"
#include "steer/rng.hpp"
#include "steer/tensor.hpp"

namespace steer {

enum class Variant { kFull, kItbMlp, kOtbGru, kItbOnly, kOtbOnly };

const char* variant_name(Variant v);
// Accepts full, itb-mlp, otb-gru, itb-only, otb-only. Throws ConfigError.
Variant parse_variant(std::string_view text);

// How agent i's sub-game embedding is assembled from the two blocks.
enum class Alignment {
  // x^i + Y_outer[i-1]: the agent's own inner token plus the causal summary
  // of the state and its leaders' actions.
  kOwnToken,
  // Y_inner[i-1] + Y_outer[i-1]: element-wise slice of the two outputs, so
  // the first agent reads the state token and agent i reads x^(i-1).
  kSlice,
};

struct ModelConfig {
  std::size_t n_agents = 2;
  std::size_t local_obs_width = 0;
  std::size_t global_obs_width = 0;  // used in GlobalState mode only
  std::vector<std::size_t> actions;
  std::size_t embed_dim = 64;
  std::size_t inner_depth = 2;
  std::size_t outer_depth = 2;
  std::size_t heads = 4;
  Variant variant = Variant::kFull;
  ObsMode obs_mode = ObsMode::kGlobalState;
  Alignment alignment = Alignment::kOwnToken;
  // Decision order; empty means agent-id order.
  std::vector<std::size_t> priority;

  std::size_t max_actions() const;
  std::vector<std::size_t> decision_order() const;
  // Throws ConfigError on any inconsistency.
  void validate() const;
};

// Config whose input widths and action spaces match the game.
ModelConfig config_for(const GameSpec& spec, Variant variant = Variant::kFull);

// Number of trainable scalars implied by a config.
std::size_t parameter_count(const ModelConfig& config);

// Observations of a batch laid out for the network.
struct ObsBatch {
  std::size_t batch = 0;
  Tensor global;  // [batch x global width], undefined in LocalOnly mode
  Tensor local;   // [batch*n x local width], sample-major
};

ObsBatch make_obs_batch(const ModelConfig& config,
                        std::span<const Observation> observations);

// Result of one autoregressive decision, indexed by agent id.
struct DecisionOutput {
  std::vector<std::size_t> actions;
  std::vector<double> log_probs;
  std::vector<double> values;
  std::vector<double> entropies;
};

// Differentiable outputs of a teacher-forced pass, [batch*n] sample-major
// and agent-id order within a sample.
struct ParallelOutput {
  Tensor log_probs;
  Tensor entropies;
  Tensor values;
};

// Head inputs for one agent at one decision step; exposed for tests.
struct AgentHeads {
  std::vector<double> logits;
  double value = 0.0;
  std::vector<double> embedding;  // sub-game state embedding
};

enum class ActMode { kSample, kGreedy };

// Head outputs memoised by (observation, leader prefix). Only valid while
// the parameters it was filled under are unchanged.
struct DecisionCache {
  struct Entry {
    std::vector<double> log_probs;
    double value = 0.0;
  };
  std::map<std::vector<double>, Entry> entries;
};

class SteerModel {
 public:
  // Parameters are drawn from `init_seed`.
  SteerModel(const ModelConfig& config, std::uint64_t init_seed);

  const ModelConfig& config() const { return config_; }
  const nn::ParameterSet& parameters() const { return params_; }

  // Inner block: state token and agent-specific embeddings.
  struct Encoded {
    Tensor tokens;  // [batch*(n+1) x d]: s0, x^1..x^n per sample
    std::size_t batch = 0;
  };
  Encoded encode(const ObsBatch& obs) const;
  // Row indices into Encoded::tokens.
  std::size_t state_row(std::size_t b) const { return b * (n_ + 1); }
  std::size_t agent_row(std::size_t b, std::size_t agent) const {
    return b * (n_ + 1) + 1 + agent;
  }

  // Outer block over [s0, a^(h1), .., a^(h(len-1))] for every sample.
  // `prefix` holds batch*(len-1) actions in decision order. Returns
  // [batch*len x d]. Undefined for variants without an outer path.
  Tensor outer(const Encoded& enc, std::span<const std::size_t> prefix,
               std::size_t len) const;

  // Sub-game embedding rows for (sample, decision level) pairs.
  Tensor subgame(const Encoded& enc, const Tensor& outer_out, std::size_t len,
                 std::span<const std::size_t> samples,
                 std::span<const std::size_t> levels) const;

  Tensor critic(const Tensor& embedding) const;
  // Logits of the head serving `action_count` actions.
  Tensor actor(const Tensor& embedding, std::size_t action_count) const;

  // Decides one joint action for a single observation: n sequential outer
  // passes, agent h^i seeing the actions of h^1..h^(i-1).
  DecisionOutput act(const Observation& obs, Rng& rng, ActMode mode,
                     DecisionCache* cache = nullptr) const;

  // Logits and value of the agent at `level` given its leaders' actions
  // (in decision order). Used to probe prefix dependence.
  AgentHeads heads_at(const Observation& obs,
                      std::span<const std::size_t> leader_actions) const;

  // One teacher-forced pass over stored joint actions (agent-id order,
  // batch*n entries). Records into the active graph when one is set.
  // Samples sharing an observation and leader prefix share trunk rows.
  ParallelOutput evaluate(const ObsBatch& obs,
                          std::span<const std::size_t> joint_actions) const;

  void save(const std::filesystem::path& path) const;
  static SteerModel load(const std::filesystem::path& path);

 private:
  bool has_outer() const;
  bool has_inner_attention() const;

  ModelConfig config_;
  std::size_t n_ = 0;
  std::size_t d_ = 0;
  std::vector<std::size_t> order_;  // decision level -> agent id
  std::vector<std::size_t> level_of_;  // agent id -> decision level

  nn::Linear global_embed_;
  Tensor class_token_;
  nn::Linear local_embed_;
  Tensor inner_pos_;
  std::vector<nn::TransformerBlock> inner_blocks_;
  nn::Mlp inner_token_mlp_;  // ItbMlp replacement for the blocks
  nn::Mlp inner_out_;
  Tensor action_embed_;  // [max actions x d]
  nn::Mlp outer_in_;
  Tensor outer_pos_;
  std::vector<nn::TransformerBlock> outer_blocks_;
  nn::GruCell outer_gru_;
  nn::Mlp outer_out_;
  nn::Mlp critic_;
  std::map<std::size_t, nn::Mlp> actors_;  // keyed by action count

  nn::ParameterSet params_;
};

SteerModel build_variant(const ModelConfig& config, std::uint64_t init_seed);

}  // namespace steer

#endif  // STEER_MODEL_HPP_
