#ifndef STEER_GAME_HPP_
#define STEER_GAME_HPP_

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace steer {

// Stage-state id of the absorbing end of an episode.
inline constexpr int kTerminal = -1;

enum class ObsMode { kGlobalState, kLocalOnly };

const char* obs_mode_name(ObsMode mode);
ObsMode parse_obs_mode(std::string_view text);

using JointAction = std::vector<std::size_t>;

// "a1,a3" style, 1-based as in game documents.
std::string joint_str(std::span<const std::size_t> joint);

struct Outcome {
  int next = kTerminal;
  std::vector<double> rewards;
};

// Property asserted by a game document and checked by the equilibrium
// oracle when the game is loaded.
struct Claim {
  enum class Kind {
    kUniqueSe,
    kNeSetEquals,
    kSeParetoDominatesSomeNe,
    kSeHighestAveragePayoff,
  };
  Kind kind;
  int state = -1;  // stage state the claim is about; -1 means initial
  std::vector<JointAction> joints;  // kNeSetEquals only
  std::string text;                 // source line, for reports
};

// Deterministic, finite-horizon sequential Markov game over a finite set of
// stage states. Immutable after load.
struct GameSpec {
  std::string name;
  std::size_t n_agents = 0;
  std::vector<std::size_t> actions;  // per agent
  std::vector<std::string> states;
  std::size_t initial_state = 0;
  std::size_t horizon = 1;
  ObsMode obs_mode = ObsMode::kGlobalState;
  double gamma = 0.99;
  // Default decision order, 0-based agent ids.
  std::vector<std::size_t> priority;
  // table[state][joint_index(joint)]
  std::vector<std::vector<Outcome>> table;
  std::vector<Claim> claims;

  std::size_t joint_count() const;
  // Mixed-radix index with agent 0 most significant.
  std::size_t joint_index(std::span<const std::size_t> joint) const;
  JointAction joint_at(std::size_t index) const;
  const Outcome& outcome(std::size_t state,
                         std::span<const std::size_t> joint) const;
  int state_index(std::string_view state_name) const;
  std::size_t max_actions() const;

  std::size_t global_obs_width() const { return states.size(); }
  std::size_t local_obs_width() const { return states.size() + n_agents; }
};

// Parses a game document. Throws ParseError (with line) on malformed text
// and ValidationError naming the offending (state, joint action) when the
// table is incomplete or inconsistent.
GameSpec load_spec(std::string_view document);
GameSpec load_spec_file(const std::filesystem::path& path);

bool is_fully_cooperative(const GameSpec& spec);

struct EnvState {
  int stage = 0;  // kTerminal once the episode reached an absorbing end
  std::size_t step = 0;
  bool done = false;
};

// Per-agent one-hot(stage) ++ one-hot(agent id); the global vector is
// one-hot(stage) and is present in GlobalState mode only.
struct Observation {
  std::vector<std::vector<double>> local;
  std::optional<std::vector<double>> global;
};

struct StepResult {
  EnvState state;
  Observation observation;
  std::vector<double> rewards;
  bool done = false;
  // done because the transition reached TERMINAL (as opposed to the horizon
  // cutting the episode short).
  bool terminated = false;
};

Observation observe(const GameSpec& spec, const EnvState& state);

struct ResetResult {
  EnvState state;
  Observation observation;
};

ResetResult reset(const GameSpec& spec);

// Throws ContractError on step-after-done or an out-of-range action.
StepResult step(const GameSpec& spec, const EnvState& state,
                std::span<const std::size_t> joint);

}  // namespace steer

#endif  // STEER_GAME_HPP_
