#include "steer/game.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "steer/errors.hpp"

namespace steer {

const char* obs_mode_name(ObsMode mode) {
  return mode == ObsMode::kGlobalState ? "global" : "local";
}

ObsMode parse_obs_mode(std::string_view text) {
  if (text == "global") return ObsMode::kGlobalState;
  if (text == "local") return ObsMode::kLocalOnly;
  throw ConfigError("unknown observation mode '" + std::string(text) +
                    "' (expected global or local)");
}

std::string joint_str(std::span<const std::size_t> joint) {
  std::string out;
  for (std::size_t i = 0; i < joint.size(); ++i) {
    if (i) out += ',';
    out += 'a' + std::to_string(joint[i] + 1);
  }
  return out;
}

std::size_t GameSpec::joint_count() const {
  std::size_t n = 1;
  for (std::size_t a : actions) n *= a;
  return n;
}

std::size_t GameSpec::joint_index(std::span<const std::size_t> joint) const {
  std::size_t index = 0;
  for (std::size_t i = 0; i < n_agents; ++i) index = index * actions[i] + joint[i];
  return index;
}

JointAction GameSpec::joint_at(std::size_t index) const {
  JointAction joint(n_agents);
  for (std::size_t i = n_agents; i-- > 0;) {
    joint[i] = index % actions[i];
    index /= actions[i];
  }
  return joint;
}

const Outcome& GameSpec::outcome(std::size_t state,
                                 std::span<const std::size_t> joint) const {
  return table[state][joint_index(joint)];
}

int GameSpec::state_index(std::string_view state_name) const {
  for (std::size_t i = 0; i < states.size(); ++i) {
    if (states[i] == state_name) return static_cast<int>(i);
  }
  return kTerminal - 1;
}

std::size_t GameSpec::max_actions() const {
  return actions.empty() ? 0 : *std::max_element(actions.begin(), actions.end());
}

namespace {

std::vector<std::string> split_ws(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream is{std::string(text)};
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& tok, int line) {
  double v = 0.0;
  const auto* end = tok.data() + tok.size();
  auto [p, ec] = std::from_chars(tok.data(), end, v);
  if (ec != std::errc() || p != end) {
    throw ParseError("expected a number, got '" + tok + "'", line);
  }
  return v;
}

std::size_t parse_count(const std::string& tok, int line) {
  std::size_t v = 0;
  const auto* end = tok.data() + tok.size();
  auto [p, ec] = std::from_chars(tok.data(), end, v);
  if (ec != std::errc() || p != end) {
    throw ParseError("expected a non-negative integer, got '" + tok + "'", line);
  }
  return v;
}

// "a3" -> 2
std::size_t parse_action(const std::string& tok, int line) {
  if (tok.size() < 2 || tok[0] != 'a') {
    throw ParseError("expected an action like a1, got '" + tok + "'", line);
  }
  const std::size_t v = parse_count(tok.substr(1), line);
  if (v == 0) throw ParseError("actions are numbered from a1", line);
  return v - 1;
}

JointAction parse_joint_csv(const std::string& tok, int line) {
  JointAction joint;
  std::size_t start = 0;
  while (start <= tok.size()) {
    const auto comma = tok.find(',', start);
    const auto piece = tok.substr(start, comma == std::string::npos
                                             ? std::string::npos
                                             : comma - start);
    joint.push_back(parse_action(piece, line));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return joint;
}

struct PendingRow {
  bool wildcard = false;
  JointAction joint;
  std::string next;
  std::vector<double> rewards;
  int line = 0;
};

struct PendingClaim {
  Claim claim;
  std::string state_name;
  int line = 0;
};

}  // namespace

GameSpec load_spec(std::string_view document) {
  GameSpec spec;
  std::set<std::string> seen_keys;
  std::map<std::string, std::vector<PendingRow>> tables;
  std::vector<std::string> table_order;
  std::vector<PendingClaim> claims;
  std::string initial_name;
  std::vector<std::size_t> priority_one_based;
  int priority_line = 0;
  std::string current_table;
  int current_table_line = 0;

  std::istringstream is{std::string(document)};
  std::string raw;
  int line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;

    if (!current_table.empty()) {
      if (line == "end") {
        current_table.clear();
        continue;
      }
      const auto arrow = line.find("->");
      const auto colon = line.find(':');
      if (arrow == std::string_view::npos || colon == std::string_view::npos ||
          colon < arrow) {
        throw ParseError("expected '<joint> -> <next> : <rewards>'", line_no);
      }
      PendingRow row;
      row.line = line_no;
      const auto lhs = split_ws(line.substr(0, arrow));
      const auto mid = split_ws(line.substr(arrow + 2, colon - arrow - 2));
      const auto rhs = split_ws(line.substr(colon + 1));
      if (mid.size() != 1) {
        throw ParseError("expected exactly one next state", line_no);
      }
      row.next = mid[0];
      if (lhs.size() == 1 && lhs[0] == "*") {
        row.wildcard = true;
      } else {
        if (lhs.empty()) throw ParseError("missing joint action", line_no);
        for (const auto& tok : lhs) row.joint.push_back(parse_action(tok, line_no));
      }
      for (const auto& tok : rhs) row.rewards.push_back(parse_double(tok, line_no));
      tables[current_table].push_back(std::move(row));
      continue;
    }

    if (line.starts_with("table")) {
      const auto toks = split_ws(line);
      if (toks.size() != 2 || toks[0] != "table") {
        throw ParseError("expected 'table <state>'", line_no);
      }
      if (tables.count(toks[1])) {
        throw ParseError("duplicate table for state '" + toks[1] + "'", line_no);
      }
      current_table = toks[1];
      current_table_line = line_no;
      tables[current_table];
      table_order.push_back(current_table);
      continue;
    }

    const auto colon = line.find(':');
    if (colon == std::string_view::npos) {
      throw ParseError("expected 'key: value'", line_no);
    }
    const std::string key{trim(line.substr(0, colon))};
    const std::string value{trim(line.substr(colon + 1))};
    const auto toks = split_ws(value);
    if (key != "claim" && !seen_keys.insert(key).second) {
      throw ParseError("duplicate key '" + key + "'", line_no);
    }
    auto single = [&]() -> const std::string& {
      if (toks.size() != 1) {
        throw ParseError("key '" + key + "' takes one value", line_no);
      }
      return toks[0];
    };
    if (key == "name") {
      spec.name = single();
    } else if (key == "agents") {
      spec.n_agents = parse_count(single(), line_no);
    } else if (key == "actions") {
      for (const auto& tok : toks) spec.actions.push_back(parse_count(tok, line_no));
    } else if (key == "gamma") {
      spec.gamma = parse_double(single(), line_no);
    } else if (key == "horizon") {
      spec.horizon = parse_count(single(), line_no);
    } else if (key == "obs_mode") {
      try {
        spec.obs_mode = parse_obs_mode(single());
      } catch (const ConfigError& e) {
        throw ParseError(e.what(), line_no);
      }
    } else if (key == "states") {
      spec.states = toks;
    } else if (key == "initial") {
      initial_name = single();
    } else if (key == "priority") {
      for (const auto& tok : toks) {
        priority_one_based.push_back(parse_count(tok, line_no));
      }
      priority_line = line_no;
    } else if (key == "claim") {
      if (toks.empty()) throw ParseError("empty claim", line_no);
      PendingClaim pc;
      pc.line = line_no;
      pc.claim.text = value;
      const std::string& kind = toks[0];
      std::size_t next = 1;
      if (kind == "unique-se") {
        pc.claim.kind = Claim::Kind::kUniqueSe;
      } else if (kind == "ne-set-equals") {
        pc.claim.kind = Claim::Kind::kNeSetEquals;
        if (toks.size() < 2) {
          throw ParseError("ne-set-equals needs a state", line_no);
        }
        pc.state_name = toks[1];
        for (std::size_t i = 2; i < toks.size(); ++i) {
          pc.claim.joints.push_back(parse_joint_csv(toks[i], line_no));
        }
        next = toks.size();
      } else if (kind == "se-pareto-dominates-some-ne") {
        pc.claim.kind = Claim::Kind::kSeParetoDominatesSomeNe;
      } else if (kind == "se-highest-average-payoff") {
        pc.claim.kind = Claim::Kind::kSeHighestAveragePayoff;
      } else {
        throw ParseError("unknown claim '" + kind + "'", line_no);
      }
      if (next < toks.size()) {
        if (toks.size() - next != 1) {
          throw ParseError("claim takes at most one state", line_no);
        }
        pc.state_name = toks[next];
      }
      claims.push_back(std::move(pc));
    } else {
      throw ParseError("unknown key '" + key + "'", line_no);
    }
  }
  if (!current_table.empty()) {
    throw ParseError("table '" + current_table + "' is missing 'end'",
                     current_table_line);
  }

  // Semantic validation.
  if (spec.name.empty()) throw ValidationError("missing 'name'");
  if (spec.n_agents == 0) throw ValidationError("'agents' must be at least 1");
  if (spec.actions.size() != spec.n_agents) {
    throw ValidationError("'actions' lists " +
                          std::to_string(spec.actions.size()) +
                          " counts for " + std::to_string(spec.n_agents) +
                          " agents");
  }
  for (std::size_t a : spec.actions) {
    if (a == 0) throw ValidationError("every agent needs at least one action");
  }
  if (spec.horizon == 0) throw ValidationError("'horizon' must be at least 1");
  if (!(spec.gamma >= 0.0 && spec.gamma <= 1.0)) {
    throw ValidationError("'gamma' must lie in [0, 1]");
  }
  if (spec.states.empty()) throw ValidationError("missing 'states'");
  {
    std::set<std::string> unique(spec.states.begin(), spec.states.end());
    if (unique.size() != spec.states.size()) {
      throw ValidationError("duplicate state names in 'states'");
    }
    if (unique.count("TERMINAL")) {
      throw ValidationError("'TERMINAL' is reserved");
    }
  }
  const int initial = initial_name.empty() ? 0 : spec.state_index(initial_name);
  if (initial < 0) {
    throw ValidationError("initial state '" + initial_name + "' is not declared");
  }
  spec.initial_state = static_cast<std::size_t>(initial);

  if (priority_one_based.empty()) {
    for (std::size_t i = 0; i < spec.n_agents; ++i) spec.priority.push_back(i);
  } else {
    std::vector<std::size_t> sorted = priority_one_based;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted[i] != i + 1 || sorted.size() != spec.n_agents) {
        throw ParseError("'priority' must be a permutation of 1.." +
                             std::to_string(spec.n_agents),
                         priority_line);
      }
    }
    for (std::size_t p : priority_one_based) spec.priority.push_back(p - 1);
  }

  const std::size_t joints = spec.joint_count();
  spec.table.assign(spec.states.size(), std::vector<Outcome>(joints));
  for (const auto& name : table_order) {
    if (spec.state_index(name) < 0) {
      throw ValidationError("table for undeclared state '" + name + "'");
    }
  }
  for (std::size_t s = 0; s < spec.states.size(); ++s) {
    const auto it = tables.find(spec.states[s]);
    std::vector<bool> filled(joints, false);
    const PendingRow* fallback = nullptr;
    auto resolve = [&](const PendingRow& row) {
      Outcome out;
      if (row.next == "TERMINAL") {
        out.next = kTerminal;
      } else {
        out.next = spec.state_index(row.next);
        if (out.next < 0) {
          throw ValidationError("line " + std::to_string(row.line) +
                                ": unknown next state '" + row.next + "'");
        }
      }
      if (row.rewards.size() != spec.n_agents) {
        throw ValidationError("line " + std::to_string(row.line) + ": " +
                              std::to_string(row.rewards.size()) +
                              " rewards for " + std::to_string(spec.n_agents) +
                              " agents");
      }
      out.rewards = row.rewards;
      return out;
    };
    if (it != tables.end()) {
      for (const auto& row : it->second) {
        if (row.wildcard) {
          if (fallback) {
            throw ValidationError("line " + std::to_string(row.line) +
                                  ": second '*' row for state '" +
                                  spec.states[s] + "'");
          }
          fallback = &row;
          continue;
        }
        if (row.joint.size() != spec.n_agents) {
          throw ValidationError("line " + std::to_string(row.line) +
                                ": joint action has " +
                                std::to_string(row.joint.size()) +
                                " entries for " +
                                std::to_string(spec.n_agents) + " agents");
        }
        for (std::size_t i = 0; i < spec.n_agents; ++i) {
          if (row.joint[i] >= spec.actions[i]) {
            throw ValidationError("line " + std::to_string(row.line) +
                                  ": action a" + std::to_string(row.joint[i] + 1) +
                                  " out of range for agent " +
                                  std::to_string(i + 1));
          }
        }
        const std::size_t idx = spec.joint_index(row.joint);
        if (filled[idx]) {
          throw ValidationError("duplicate entry for (" + spec.states[s] + ", " +
                                joint_str(row.joint) + ")");
        }
        filled[idx] = true;
        spec.table[s][idx] = resolve(row);
      }
    }
    for (std::size_t idx = 0; idx < joints; ++idx) {
      if (filled[idx]) continue;
      if (!fallback) {
        throw ValidationError("missing transition for (" + spec.states[s] +
                              ", " + joint_str(spec.joint_at(idx)) + ")");
      }
      spec.table[s][idx] = resolve(*fallback);
    }
  }

  for (auto& pc : claims) {
    if (!pc.state_name.empty()) {
      pc.claim.state = spec.state_index(pc.state_name);
      if (pc.claim.state < 0) {
        throw ParseError("claim refers to unknown state '" + pc.state_name + "'",
                         pc.line);
      }
    }
    for (const auto& joint : pc.claim.joints) {
      bool ok = joint.size() == spec.n_agents;
      for (std::size_t i = 0; ok && i < joint.size(); ++i) {
        ok = joint[i] < spec.actions[i];
      }
      if (!ok) {
        throw ParseError("claim joint action " + joint_str(joint) +
                             " does not fit the game",
                         pc.line);
      }
    }
    spec.claims.push_back(std::move(pc.claim));
  }
  return spec;
}

GameSpec load_spec_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open game document '" + path.string() + "'");
  }
  std::stringstream buffer;
  buffer << in.rdbuf();
  return load_spec(buffer.str());
}

bool is_fully_cooperative(const GameSpec& spec) {
  for (const auto& row : spec.table) {
    for (const auto& out : row) {
      for (double r : out.rewards) {
        if (r != out.rewards.front()) return false;
      }
    }
  }
  return true;
}

Observation observe(const GameSpec& spec, const EnvState& state) {
  const std::size_t ns = spec.states.size();
  Observation obs;
  obs.local.assign(spec.n_agents, std::vector<double>(spec.local_obs_width(), 0.0));
  for (std::size_t i = 0; i < spec.n_agents; ++i) {
    if (state.stage >= 0) obs.local[i][static_cast<std::size_t>(state.stage)] = 1.0;
    obs.local[i][ns + i] = 1.0;
  }
  if (spec.obs_mode == ObsMode::kGlobalState) {
    std::vector<double> global(ns, 0.0);
    if (state.stage >= 0) global[static_cast<std::size_t>(state.stage)] = 1.0;
    obs.global = std::move(global);
  }
  return obs;
}

ResetResult reset(const GameSpec& spec) {
  EnvState state;
  state.stage = static_cast<int>(spec.initial_state);
  return {state, observe(spec, state)};
}

StepResult step(const GameSpec& spec, const EnvState& state,
                std::span<const std::size_t> joint) {
  if (state.done) throw ContractError("step: episode is already done");
  if (joint.size() != spec.n_agents) {
    throw ContractError("step: " + std::to_string(joint.size()) +
                        " actions for " + std::to_string(spec.n_agents) +
                        " agents");
  }
  for (std::size_t i = 0; i < spec.n_agents; ++i) {
    if (joint[i] >= spec.actions[i]) {
      throw ContractError("step: action " + std::to_string(joint[i]) +
                          " out of range for agent " + std::to_string(i));
    }
  }
  const Outcome& out = spec.outcome(static_cast<std::size_t>(state.stage), joint);
  StepResult result;
  result.rewards = out.rewards;
  result.state.stage = out.next;
  result.state.step = state.step + 1;
  result.terminated = out.next == kTerminal;
  result.done = result.terminated || result.state.step >= spec.horizon;
  result.state.done = result.done;
  result.observation = observe(spec, result.state);
  return result;
}

}  // namespace steer
