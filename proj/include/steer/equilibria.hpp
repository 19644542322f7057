#ifndef STEER_EQUILIBRIA_HPP_
#define STEER_EQUILIBRIA_HPP_

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "steer/game.hpp"

// Exact pure-strategy equilibrium oracle for GameSpec instances.
namespace steer::equilibria {

// How a follower resolves exact ties in its own payoff. kStrong favours the
// higher-priority agents lexicographically, kWeak works against them. Both
// then fall back to the lowest action index.
enum class TieConvention { kStrong, kWeak };

const char* convention_name(TieConvention convention);

// Refuse games whose stage-action trees exceed this many leaves in total.
inline constexpr std::size_t kMaxTreeLeaves = 1'000'000;

// Per-agent value of continuing from each stage state; indexed by state id.
// TERMINAL continues with zero.
using Continuation = std::vector<std::vector<double>>;

Continuation zero_continuation(const GameSpec& spec);

// r^i(s, a) + gamma * continuation[next]^i
std::vector<double> joint_q(const GameSpec& spec, std::size_t state,
                            std::span<const std::size_t> joint,
                            const Continuation& continuation);

// Joint actions where no agent strictly gains by a unilateral deviation.
std::vector<JointAction> enumerate_pure_ne(const GameSpec& spec,
                                           std::size_t state,
                                           const Continuation& continuation);

// NE whose worst payoff over all unilateral deviations of other agents is
// largest. Several are returned on exact ties.
std::vector<JointAction> deviation_safe_ne(const GameSpec& spec,
                                           std::size_t state,
                                           const Continuation& continuation);

struct StageSolution {
  JointAction joint;           // agent-id order
  std::vector<double> values;  // per-agent Q of `joint`
  // Every joint action reachable by choosing, at each level, any action tied
  // with the chosen one under the full tie-breaking key except action index.
  std::vector<JointAction> equivalent_joints;
  // (prefix of actions in priority order) -> action of the next agent
  std::map<std::vector<std::size_t>, std::size_t> policy;
};

// Backward induction over the depth-n action tree in priority order.
StageSolution stackelberg_stage(const GameSpec& spec, std::size_t state,
                                std::span<const std::size_t> priority,
                                const Continuation& continuation,
                                TieConvention convention = TieConvention::kStrong);

struct PathStep {
  std::size_t state;
  std::size_t remaining;  // steps left including this one
  JointAction joint;
  std::vector<double> stage_values;  // per-agent Q at this step
};

struct EquilibriumReport {
  std::vector<std::size_t> priority;
  TieConvention convention = TieConvention::kStrong;
  // nodes[remaining - 1][state]
  std::vector<std::vector<StageSolution>> nodes;
  std::vector<PathStep> se_path;
  std::vector<double> se_values;
  // Pure NE at each step of se_path, with SE continuation values.
  std::vector<std::vector<JointAction>> pure_ne;

  const StageSolution& node(std::size_t state, std::size_t remaining) const {
    return nodes[remaining - 1][state];
  }
};

// Per-node continuation built from the solutions one step further out.
Continuation continuation_at(const GameSpec& spec,
                             const EquilibriumReport& report,
                             std::size_t remaining);

// Backward induction over (state, remaining horizon) nodes. Throws
// ValidationError if the trees exceed kMaxTreeLeaves.
EquilibriumReport solve_stages(const GameSpec& spec,
                               std::span<const std::size_t> priority,
                               TieConvention convention = TieConvention::kStrong);
inline EquilibriumReport solve_stages(const GameSpec& spec) {
  return solve_stages(spec, spec.priority);
}

// True when every joint action of `trajectory`, played from reset, is one of
// the equivalent SE joint actions of the node it is played at.
bool matches_se(const GameSpec& spec, const EquilibriumReport& report,
                std::span<const JointAction> trajectory);

struct ClaimResult {
  std::string claim;
  bool pass = false;
  std::string witness;
};

std::vector<ClaimResult> validate_claims(const GameSpec& spec,
                                         std::span<const Claim> claims);
inline std::vector<ClaimResult> validate_claims(const GameSpec& spec) {
  return validate_claims(spec, spec.claims);
}

// Structured-text rendering, stable across runs.
std::string format_report(const GameSpec& spec, const EquilibriumReport& report,
                          std::span<const ClaimResult> claims);

// Loads a document and throws ValidationError if any embedded claim fails.
GameSpec load_validated(const std::string& path);

}  // namespace steer::equilibria

#endif  // STEER_EQUILIBRIA_HPP_
