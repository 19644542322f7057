#include "steer/equilibria.hpp"

#include <algorithm>
#include <charconv>
#include <limits>
#include <set>
#include <sstream>

#include "steer/errors.hpp"

namespace steer::equilibria {

namespace {

std::string num(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

std::string values_str(std::span<const double> v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ' ';
    out += num(v[i]);
  }
  return out;
}

struct Subtree {
  std::vector<double> values;
  JointAction joint;
  std::vector<JointAction> equivalent;
};

class TreeSolver {
 public:
  TreeSolver(const GameSpec& spec, std::size_t state,
             std::span<const std::size_t> priority,
             const Continuation& continuation, TieConvention convention,
             StageSolution& out)
      : spec_(spec),
        state_(state),
        priority_(priority),
        continuation_(continuation),
        convention_(convention),
        out_(out) {}

  Subtree solve(std::vector<std::size_t>& prefix) {
    const std::size_t level = prefix.size();
    if (level == spec_.n_agents) {
      Subtree leaf;
      leaf.joint.assign(spec_.n_agents, 0);
      for (std::size_t m = 0; m < level; ++m) leaf.joint[priority_[m]] = prefix[m];
      leaf.values = joint_q(spec_, state_, leaf.joint, continuation_);
      leaf.equivalent.push_back(leaf.joint);
      return leaf;
    }
    const std::size_t agent = priority_[level];
    Subtree best;
    std::size_t best_action = 0;
    for (std::size_t a = 0; a < spec_.actions[agent]; ++a) {
      prefix.push_back(a);
      Subtree child = solve(prefix);
      prefix.pop_back();
      if (a == 0) {
        best = std::move(child);
        continue;
      }
      const int c = compare(child.values, best.values, level);
      if (c > 0) {
        best = std::move(child);
        best_action = a;
      } else if (c == 0) {
        best.equivalent.insert(best.equivalent.end(), child.equivalent.begin(),
                               child.equivalent.end());
      }
    }
    out_.policy[prefix] = best_action;
    return best;
  }

 private:
  // +1 when u is preferred by the agent at `level`, -1 when w is, 0 on an
  // exact tie of the whole key.
  int compare(const std::vector<double>& u, const std::vector<double>& w,
              std::size_t level) const {
    const std::size_t own = priority_[level];
    if (u[own] != w[own]) return u[own] > w[own] ? 1 : -1;
    for (std::size_t m = 0; m < level; ++m) {
      const std::size_t id = priority_[m];
      if (u[id] == w[id]) continue;
      const bool higher = u[id] > w[id];
      if (convention_ == TieConvention::kStrong) return higher ? 1 : -1;
      return higher ? -1 : 1;
    }
    return 0;
  }

  const GameSpec& spec_;
  std::size_t state_;
  std::span<const std::size_t> priority_;
  const Continuation& continuation_;
  TieConvention convention_;
  StageSolution& out_;
};

void check_priority(const GameSpec& spec, std::span<const std::size_t> priority) {
  std::vector<std::size_t> sorted(priority.begin(), priority.end());
  std::sort(sorted.begin(), sorted.end());
  bool ok = sorted.size() == spec.n_agents;
  for (std::size_t i = 0; ok && i < sorted.size(); ++i) ok = sorted[i] == i;
  if (!ok) {
    throw ConfigError("priority must be a permutation of the " +
                      std::to_string(spec.n_agents) + " agents");
  }
}

}  // namespace

const char* convention_name(TieConvention convention) {
  return convention == TieConvention::kStrong ? "strong" : "weak";
}

Continuation zero_continuation(const GameSpec& spec) {
  return Continuation(spec.states.size(),
                      std::vector<double>(spec.n_agents, 0.0));
}

std::vector<double> joint_q(const GameSpec& spec, std::size_t state,
                            std::span<const std::size_t> joint,
                            const Continuation& continuation) {
  const Outcome& out = spec.outcome(state, joint);
  std::vector<double> q = out.rewards;
  if (out.next != kTerminal) {
    const auto& cont = continuation[static_cast<std::size_t>(out.next)];
    for (std::size_t i = 0; i < q.size(); ++i) q[i] += spec.gamma * cont[i];
  }
  return q;
}

std::vector<JointAction> enumerate_pure_ne(const GameSpec& spec,
                                           std::size_t state,
                                           const Continuation& continuation) {
  std::vector<JointAction> result;
  for (std::size_t idx = 0; idx < spec.joint_count(); ++idx) {
    JointAction joint = spec.joint_at(idx);
    const auto q = joint_q(spec, state, joint, continuation);
    bool stable = true;
    for (std::size_t i = 0; stable && i < spec.n_agents; ++i) {
      JointAction deviation = joint;
      for (std::size_t a = 0; a < spec.actions[i]; ++a) {
        if (a == joint[i]) continue;
        deviation[i] = a;
        if (joint_q(spec, state, deviation, continuation)[i] > q[i]) {
          stable = false;
          break;
        }
      }
    }
    if (stable) result.push_back(std::move(joint));
  }
  return result;
}

std::vector<JointAction> deviation_safe_ne(const GameSpec& spec,
                                           std::size_t state,
                                           const Continuation& continuation) {
  std::vector<JointAction> best;
  double best_floor = 0.0;
  for (const auto& ne : enumerate_pure_ne(spec, state, continuation)) {
    double floor = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < spec.n_agents; ++j) {
      JointAction deviation = ne;
      for (std::size_t a = 0; a < spec.actions[j]; ++a) {
        deviation[j] = a;
        const auto q = joint_q(spec, state, deviation, continuation);
        for (std::size_t i = 0; i < spec.n_agents; ++i) {
          if (i != j || a == ne[j]) floor = std::min(floor, q[i]);
        }
      }
    }
    if (best.empty() || floor > best_floor) {
      best = {ne};
      best_floor = floor;
    } else if (floor == best_floor) {
      best.push_back(ne);
    }
  }
  return best;
}

StageSolution stackelberg_stage(const GameSpec& spec, std::size_t state,
                                std::span<const std::size_t> priority,
                                const Continuation& continuation,
                                TieConvention convention) {
  check_priority(spec, priority);
  StageSolution solution;
  TreeSolver solver(spec, state, priority, continuation, convention, solution);
  std::vector<std::size_t> prefix;
  Subtree root = solver.solve(prefix);
  solution.joint = std::move(root.joint);
  solution.values = std::move(root.values);
  std::set<JointAction> unique(root.equivalent.begin(), root.equivalent.end());
  solution.equivalent_joints.assign(unique.begin(), unique.end());
  return solution;
}

Continuation continuation_at(const GameSpec& spec,
                             const EquilibriumReport& report,
                             std::size_t remaining) {
  Continuation cont = zero_continuation(spec);
  if (remaining <= 1) return cont;
  for (std::size_t s = 0; s < spec.states.size(); ++s) {
    cont[s] = report.node(s, remaining - 1).values;
  }
  return cont;
}

EquilibriumReport solve_stages(const GameSpec& spec,
                               std::span<const std::size_t> priority,
                               TieConvention convention) {
  check_priority(spec, priority);
  const double leaves = static_cast<double>(spec.joint_count()) *
                        static_cast<double>(spec.states.size()) *
                        static_cast<double>(spec.horizon);
  if (leaves > static_cast<double>(kMaxTreeLeaves)) {
    throw ValidationError("game '" + spec.name + "' has " + num(leaves) +
                          " stage-action-tree leaves, above the limit of " +
                          std::to_string(kMaxTreeLeaves));
  }
  EquilibriumReport report;
  report.priority.assign(priority.begin(), priority.end());
  report.convention = convention;
  for (std::size_t remaining = 1; remaining <= spec.horizon; ++remaining) {
    const Continuation cont = continuation_at(spec, report, remaining);
    std::vector<StageSolution> layer;
    layer.reserve(spec.states.size());
    for (std::size_t s = 0; s < spec.states.size(); ++s) {
      layer.push_back(stackelberg_stage(spec, s, priority, cont, convention));
    }
    report.nodes.push_back(std::move(layer));
  }

  std::size_t state = spec.initial_state;
  for (std::size_t remaining = spec.horizon; remaining >= 1; --remaining) {
    const StageSolution& node = report.node(state, remaining);
    report.se_path.push_back({state, remaining, node.joint, node.values});
    report.pure_ne.push_back(
        enumerate_pure_ne(spec, state, continuation_at(spec, report, remaining)));
    const int next = spec.outcome(state, node.joint).next;
    if (next == kTerminal) break;
    state = static_cast<std::size_t>(next);
  }
  report.se_values = report.node(spec.initial_state, spec.horizon).values;
  return report;
}

bool matches_se(const GameSpec& spec, const EquilibriumReport& report,
                std::span<const JointAction> trajectory) {
  EnvState env = reset(spec).state;
  for (const auto& joint : trajectory) {
    if (env.done) return false;
    const std::size_t remaining = spec.horizon - env.step;
    const auto& eq = report.node(static_cast<std::size_t>(env.stage), remaining)
                         .equivalent_joints;
    if (std::find(eq.begin(), eq.end(), joint) == eq.end()) return false;
    env = step(spec, env, joint).state;
  }
  return env.done;
}

namespace {

// Node at which a claim about `state` is evaluated: where the SE path
// visits it, else with the full horizon remaining.
std::pair<std::size_t, std::size_t> claim_node(const GameSpec& spec,
                                               const EquilibriumReport& report,
                                               int state) {
  const std::size_t s =
      state < 0 ? spec.initial_state : static_cast<std::size_t>(state);
  for (const auto& step : report.se_path) {
    if (step.state == s) return {s, step.remaining};
  }
  return {s, spec.horizon};
}

std::string joints_str(std::span<const JointAction> joints) {
  std::string out = "{";
  for (std::size_t i = 0; i < joints.size(); ++i) {
    if (i) out += ' ';
    out += '(' + joint_str(joints[i]) + ')';
  }
  return out + "}";
}

}  // namespace

std::vector<ClaimResult> validate_claims(const GameSpec& spec,
                                         std::span<const Claim> claims) {
  std::vector<ClaimResult> results;
  if (claims.empty()) return results;
  const EquilibriumReport strong = solve_stages(spec, spec.priority);
  for (const Claim& claim : claims) {
    ClaimResult r;
    r.claim = claim.text;
    const auto [s, remaining] = claim_node(spec, strong, claim.state);
    const Continuation cont = continuation_at(spec, strong, remaining);
    const StageSolution& node = strong.node(s, remaining);
    switch (claim.kind) {
      case Claim::Kind::kUniqueSe: {
        const EquilibriumReport weak =
            solve_stages(spec, spec.priority, TieConvention::kWeak);
        bool unique = weak.se_path.size() == strong.se_path.size();
        std::string detail;
        for (std::size_t t = 0; t < strong.se_path.size(); ++t) {
          const auto& step = strong.se_path[t];
          const auto& eq = strong.node(step.state, step.remaining).equivalent_joints;
          if (eq.size() != 1) {
            unique = false;
            detail += " tie at " + spec.states[step.state] + ": " + joints_str(eq);
          }
          if (unique && weak.se_path[t].joint != step.joint) {
            unique = false;
            detail += " weak convention plays " + joint_str(weak.se_path[t].joint) +
                      " at " + spec.states[step.state];
          }
        }
        std::string path;
        for (const auto& step : strong.se_path) {
          path += (path.empty() ? "" : " ") + spec.states[step.state] + ":(" +
                  joint_str(step.joint) + ")";
        }
        r.pass = unique;
        r.witness = "se path " + path + detail;
        break;
      }
      case Claim::Kind::kNeSetEquals: {
        auto ne = enumerate_pure_ne(spec, s, cont);
        auto expected = claim.joints;
        std::sort(ne.begin(), ne.end());
        std::sort(expected.begin(), expected.end());
        r.pass = ne == expected;
        r.witness = "pure NE at " + spec.states[s] + " = " + joints_str(ne);
        break;
      }
      case Claim::Kind::kSeParetoDominatesSomeNe: {
        const auto ne = enumerate_pure_ne(spec, s, cont);
        std::vector<JointAction> dominated;
        for (const auto& joint : ne) {
          const auto q = joint_q(spec, s, joint, cont);
          bool weakly = true, strictly = false;
          for (std::size_t i = 0; i < spec.n_agents; ++i) {
            weakly = weakly && node.values[i] >= q[i];
            strictly = strictly || node.values[i] > q[i];
          }
          if (weakly && strictly) dominated.push_back(joint);
        }
        r.pass = !dominated.empty();
        r.witness = "SE (" + joint_str(node.joint) + ") values " +
                    values_str(node.values) + " dominate " +
                    joints_str(dominated);
        break;
      }
      case Claim::Kind::kSeHighestAveragePayoff: {
        auto average = [&](const std::vector<double>& q) {
          double total = 0.0;
          for (double v : q) total += v;
          return total / static_cast<double>(q.size());
        };
        const double se_avg = average(node.values);
        bool highest = true;
        std::string rival;
        for (std::size_t idx = 0; idx < spec.joint_count(); ++idx) {
          const JointAction joint = spec.joint_at(idx);
          if (joint == node.joint) continue;
          const double avg = average(joint_q(spec, s, joint, cont));
          if (avg >= se_avg) {
            highest = false;
            rival += " (" + joint_str(joint) + ")=" + num(avg);
          }
        }
        r.pass = highest;
        r.witness = "SE (" + joint_str(node.joint) + ") average " + num(se_avg) +
                    (highest ? " is strictly highest" : "; rivals" + rival);
        break;
      }
    }
    results.push_back(std::move(r));
  }
  return results;
}

std::string format_report(const GameSpec& spec, const EquilibriumReport& report,
                          std::span<const ClaimResult> claims) {
  std::ostringstream os;
  os << "game: " << spec.name << '\n';
  os << "agents: " << spec.n_agents << '\n';
  os << "priority:";
  for (std::size_t p : report.priority) os << ' ' << p + 1;
  os << '\n';
  os << "tie_convention: " << convention_name(report.convention) << '\n';
  os << "fully_cooperative: "
     << (is_fully_cooperative(spec) ? "true" : "false") << '\n';
  os << "se_values: " << values_str(report.se_values) << '\n';
  os << "se_path:\n";
  for (std::size_t t = 0; t < report.se_path.size(); ++t) {
    const auto& step = report.se_path[t];
    const auto& node = report.node(step.state, step.remaining);
    os << "  - step: " << t << '\n';
    os << "    state: " << spec.states[step.state] << '\n';
    os << "    joint: (" << joint_str(step.joint) << ")\n";
    os << "    stage_values: " << values_str(step.stage_values) << '\n';
    os << "    equivalent_se: " << joints_str(node.equivalent_joints) << '\n';
    os << "    pure_ne: " << joints_str(report.pure_ne[t]) << '\n';
    os << "    follower_policy:\n";
    for (const auto& [prefix, action] : node.policy) {
      if (prefix.empty()) continue;
      os << "      (";
      for (std::size_t m = 0; m < prefix.size(); ++m) {
        if (m) os << ',';
        os << "a" << prefix[m] + 1;
      }
      os << ") -> agent " << report.priority[prefix.size()] + 1 << " plays a"
         << action + 1 << '\n';
    }
  }
  os << "claims:\n";
  for (const auto& c : claims) {
    os << "  - " << (c.pass ? "PASS " : "FAIL ") << c.claim << '\n';
    os << "    witness: " << c.witness << '\n';
  }
  return os.str();
}

GameSpec load_validated(const std::string& path) {
  GameSpec spec = load_spec_file(path);
  for (const auto& r : validate_claims(spec)) {
    if (!r.pass) {
      throw ValidationError("game '" + spec.name + "': claim '" + r.claim +
                            "' fails: " + r.witness);
    }
  }
  return spec;
}

}  // namespace steer::equilibria
