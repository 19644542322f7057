// Acceptance suite: one PASS/FAIL line per criterion on stdout.
//
//   acceptance [--only 1,4,...] [--runs DIR]
//
// Training sweeps are written under DIR and reused by later criteria (and
// later invocations) when they were produced by this same executable.
// Exit status: 0 all selected criteria pass, 1 some fail, 2 runtime error.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "steer/equilibria.hpp"
#include "steer/game.hpp"
#include "steer/harness.hpp"
#include "steer/model.hpp"
#include "steer/trainer.hpp"
#include "support.hpp"

namespace {

using namespace steer;
namespace eq = steer::equilibria;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

constexpr std::size_t kSeeds = 20;

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string game_path(const std::string& name) {
  return std::string(STEER_SOURCE_DIR) + "/games/" + name;
}

GameSpec game(const std::string& name) { return load_spec_file(game_path(name)); }

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

std::string joints_str(const std::set<JointAction>& joints) {
  std::string out = "{";
  for (const auto& j : joints) out += (out.size() > 1 ? " (" : "(") + joint_str(j) + ")";
  return out + "}";
}

// ---------------------------------------------------------------------------
// Sweep cache

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Identifies this build, so cached sweeps from another build are discarded.
std::string build_id() {
  static const std::string id = [] {
    std::ifstream in("/proc/self/exe", std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return fmt("%016llx", static_cast<unsigned long long>(fnv1a(ss.str())));
  }();
  return id;
}

struct SweepOutcome {
  std::size_t converged = 0;
  std::size_t seeds = 0;
  double wall_seconds = 0.0;
  bool cached = false;

  std::string str() const { return fmt("%zu/%zu", converged, seeds); }
};

fs::path g_runs = "acceptance_runs";

SweepOutcome sweep(const std::string& game_name, Variant variant, ObsMode mode) {
  const std::string name = game_name + "-" + variant_name(variant) + "-" + obs_mode_name(mode);
  const fs::path dir = g_runs / name;
  const fs::path id_file = dir / "build_id";
  if (fs::exists(id_file) && fs::exists(dir / "result") &&
      steer::testing::read_file(id_file) == build_id()) {
    const auto doc = nlohmann::json::parse(steer::testing::read_file(dir / "result"));
    SweepOutcome o;
    o.converged = doc["converged"].get<std::size_t>();
    o.seeds = doc["seed_count"].get<std::size_t>();
    o.wall_seconds = doc["wall_seconds"].get<double>();
    o.cached = true;
    std::fprintf(stderr, "  %s: %s (cached)\n", name.c_str(), o.str().c_str());
    return o;
  }
  fs::remove_all(dir);

  harness::ExperimentConfig c;
  c.game_path = game_path(game_name);
  c.variant = variant;
  c.obs_mode = mode;
  for (std::size_t s = 0; s < kSeeds; ++s) c.seeds.push_back(s);
  c.out = dir;
  c.write_checkpoints = false;
  std::fprintf(stderr, "  %s: running %zu seeds\n", name.c_str(), kSeeds);
  const harness::SweepResult r = harness::run_sweep(c, [&](const harness::SeedResult& s) {
    std::fprintf(stderr, "    %s seed %llu: %s (%.1fs)\n", name.c_str(),
                 static_cast<unsigned long long>(s.seed),
                 !s.completed ? s.error.c_str() : s.se_match ? "SE" : "miss", s.wall_seconds);
  });
  if (r.completed != r.seeds.size()) {
    throw std::runtime_error(name + ": " + std::to_string(r.seeds.size() - r.completed) +
                             " seeds did not complete");
  }
  std::ofstream(id_file) << build_id();
  SweepOutcome o;
  o.converged = r.converged;
  o.seeds = r.seeds.size();
  o.wall_seconds = r.wall_seconds;
  std::fprintf(stderr, "  %s: %s in %.0fs\n", name.c_str(), o.str().c_str(), o.wall_seconds);
  return o;
}

// ---------------------------------------------------------------------------
// 1. Loss gradient against central differences.

Verdict gradient_integrity() {
  const auto start = Clock::now();
  const Variant variants[] = {Variant::kFull, Variant::kItbMlp, Variant::kOtbGru,
                              Variant::kItbOnly, Variant::kOtbOnly};
  Rng rng(2024);
  double worst = 0.0;
  std::string worst_where;
  std::size_t checked = 0;
  constexpr std::size_t kConfigs = 24;
  for (std::size_t k = 0; k < kConfigs; ++k) {
    const std::size_t n = 1 + k % 3;
    const std::size_t d = (k / 3) % 2 ? 16 : 8;
    const ObsMode mode = (k / 6) % 2 ? ObsMode::kLocalOnly : ObsMode::kGlobalState;
    const ModelConfig c = steer::testing::synthetic_config(n, d, rng, variants[k % 5], mode);
    const SteerModel model(c, 1000 + k);
    const Minibatch mb = steer::testing::random_minibatch(model, 4, rng);
    TrainConfig tc;
    std::vector<Tensor> params;
    std::vector<std::string> names;
    for (const auto& p : model.parameters().items()) {
      params.push_back(p.tensor);
      names.push_back(p.name);
    }
    const auto g = steer::testing::check_gradients(
        params, [&] { return ppo_loss(model, mb, tc).loss; }, rng, 8, names);
    checked += g.checked;
    if (g.max_rel_error > worst) {
      worst = g.max_rel_error;
      worst_where = fmt("config %zu (n=%zu d=%zu %s): %s", k, n, d, variant_name(c.variant),
                        g.worst.c_str());
    }
  }
  const double elapsed = seconds_since(start);
  Verdict v;
  v.pass = worst < 1e-4 && elapsed < 120.0;
  v.detail = fmt("%zu configs, %zu entries, max rel error %.2e (limit 1e-4), %.1fs (limit 120s)",
                 kConfigs, checked, worst, elapsed);
  if (!v.pass) v.detail += "; worst " + worst_where;
  return v;
}

// ---------------------------------------------------------------------------
// 2. Autoregressive decisions against the teacher-forced pass.

Verdict ar_tf_equivalence() {
  const auto start = Clock::now();
  const Variant variants[] = {Variant::kFull, Variant::kItbMlp, Variant::kOtbGru,
                              Variant::kOtbOnly};
  constexpr std::size_t kDraws = 1000;
  constexpr std::size_t kPerModel = 20;
  Rng rng(77);
  double worst_lp = 0.0, worst_v = 0.0;
  std::string per_variant;
  for (Variant variant : variants) {
    std::size_t draws = 0;
    for (std::size_t m = 0; draws < kDraws; ++m) {
      const ModelConfig c = steer::testing::synthetic_config(
          1 + rng.below(3), m % 2 ? 16 : 8, rng, variant,
          m % 3 == 0 ? ObsMode::kLocalOnly : ObsMode::kGlobalState);
      const SteerModel model(c, 5000 + m);
      std::vector<Observation> obs;
      std::vector<DecisionOutput> decided;
      std::vector<std::size_t> joint;
      for (std::size_t s = 0; s < kPerModel; ++s) {
        obs.push_back(steer::testing::random_observation(c, rng));
        decided.push_back(model.act(obs.back(), rng, ActMode::kSample));
        joint.insert(joint.end(), decided.back().actions.begin(), decided.back().actions.end());
      }
      const ParallelOutput par = model.evaluate(make_obs_batch(c, obs), joint);
      for (std::size_t s = 0; s < kPerModel; ++s) {
        for (std::size_t i = 0; i < c.n_agents; ++i) {
          const std::size_t r = s * c.n_agents + i;
          worst_lp = std::max(worst_lp, std::abs(par.log_probs.at(r) - decided[s].log_probs[i]));
          worst_v = std::max(worst_v, std::abs(par.values.at(r) - decided[s].values[i]));
        }
      }
      draws += kPerModel;
    }
    per_variant += fmt("%s%s %zu", per_variant.empty() ? "" : ", ", variant_name(variant), draws);
  }
  const double elapsed = seconds_since(start);
  Verdict v;
  v.pass = worst_lp <= 1e-10 && worst_v <= 1e-10 && elapsed < 60.0;
  v.detail = fmt("draws per variant: %s; max |dlogp| %.1e, max |dV| %.1e (limit 1e-10), "
                 "%.1fs (limit 60s)",
                 per_variant.c_str(), worst_lp, worst_v, elapsed);
  return v;
}

// ---------------------------------------------------------------------------
// 3. Oracle against exhaustive enumeration.

double reward(const GameSpec& spec, std::size_t state, const JointAction& j, std::size_t i) {
  return spec.outcome(state, j).rewards[i];
}

std::set<JointAction> brute_ne(const GameSpec& spec, std::size_t state) {
  std::set<JointAction> out;
  for (std::size_t a = 0; a < spec.actions[0]; ++a) {
    for (std::size_t b = 0; b < spec.actions[1]; ++b) {
      const JointAction j{a, b};
      bool stable = true;
      for (std::size_t x = 0; x < spec.actions[0]; ++x) {
        if (reward(spec, state, {x, b}, 0) > reward(spec, state, j, 0)) stable = false;
      }
      for (std::size_t y = 0; y < spec.actions[1]; ++y) {
        if (reward(spec, state, {a, y}, 1) > reward(spec, state, j, 1)) stable = false;
      }
      if (stable) out.insert(j);
    }
  }
  return out;
}

// Leader (agent 0) commits, follower best-responds, follower ties broken in
// the leader's favour. Returns every optimal joint and the leader's value.
std::pair<std::set<JointAction>, double> brute_se(const GameSpec& spec, std::size_t state) {
  std::set<JointAction> best;
  double best_value = -1e300;
  for (std::size_t a = 0; a < spec.actions[0]; ++a) {
    double follower_best = -1e300;
    for (std::size_t b = 0; b < spec.actions[1]; ++b) {
      follower_best = std::max(follower_best, reward(spec, state, {a, b}, 1));
    }
    for (std::size_t b = 0; b < spec.actions[1]; ++b) {
      if (reward(spec, state, {a, b}, 1) != follower_best) continue;
      const double v = reward(spec, state, {a, b}, 0);
      if (v > best_value) {
        best_value = v;
        best.clear();
      }
      if (v == best_value) best.insert({a, b});
    }
  }
  return {best, best_value};
}

// NE maximising the worst payoff any agent sees when the other deviates.
std::set<JointAction> brute_safe_ne(const GameSpec& spec, std::size_t state) {
  std::set<JointAction> best;
  double best_score = -1e300;
  for (const JointAction& j : brute_ne(spec, state)) {
    double score = 1e300;
    for (std::size_t y = 0; y < spec.actions[1]; ++y) {
      score = std::min(score, reward(spec, state, {j[0], y}, 0));
    }
    for (std::size_t x = 0; x < spec.actions[0]; ++x) {
      score = std::min(score, reward(spec, state, {x, j[1]}, 1));
    }
    if (score > best_score) {
      best_score = score;
      best.clear();
    }
    if (score == best_score) best.insert(j);
  }
  return best;
}

Verdict oracle_correctness() {
  const auto start = Clock::now();
  std::vector<std::string> failures;
  const auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };

  const GameSpec coord = game("coordination");
  const std::size_t final = coord.state_index("final");
  const auto zero = eq::zero_continuation(coord);
  const std::set<JointAction> want_ne{{0, 2}, {1, 1}, {2, 0}};
  const auto ne = eq::enumerate_pure_ne(coord, final, zero);
  expect(std::set<JointAction>(ne.begin(), ne.end()) == want_ne,
         "coordination NE " + joints_str({ne.begin(), ne.end()}));
  expect(brute_ne(coord, final) == want_ne, "coordination enumeration NE");
  const auto sol = eq::stackelberg_stage(coord, final, coord.priority, zero);
  expect(sol.joint == JointAction{0, 2}, "coordination SE (" + joint_str(sol.joint) + ")");
  expect(sol.equivalent_joints == std::vector<JointAction>{{0, 2}},
         "coordination SE not unique");
  expect(brute_se(coord, final).first == std::set<JointAction>{{0, 2}},
         "coordination enumeration SE " + joints_str(brute_se(coord, final).first));

  for (const char* name : {"penalty_k0", "penalty_k-100", "penalty_k-1000"}) {
    const GameSpec spec = game(name);
    const auto z = eq::zero_continuation(spec);
    const auto se = eq::stackelberg_stage(spec, 0, spec.priority, z);
    const auto [brute, value] = brute_se(spec, 0);
    expect(se.joint == JointAction{0, 0}, std::string(name) + " SE (" + joint_str(se.joint) + ")");
    expect(se.values == std::vector<double>{10.0, 10.0}, std::string(name) + " SE value");
    expect(value == 10.0 && brute.count({0, 0}) == 1, std::string(name) + " enumeration SE");
    if (reward(spec, 0, {0, 2}, 0) < 0.0) {
      const auto safe = eq::deviation_safe_ne(spec, 0, z);
      expect(safe == std::vector<JointAction>{{1, 1}},
             std::string(name) + " deviation-safe NE " + joints_str({safe.begin(), safe.end()}));
      expect(brute_safe_ne(spec, 0) == std::set<JointAction>{{1, 1}},
             std::string(name) + " enumeration deviation-safe NE");
    }
  }
  const double elapsed = seconds_since(start);
  Verdict v;
  v.pass = failures.empty() && elapsed < 1.0;
  if (failures.empty()) {
    v.detail = fmt("coordination NE {(a1,a3) (a2,a2) (a3,a1)}, unique SE (a1,a3); "
                   "penalty k=0,-100,-1000 SE (a1,a1) value 10; k<0 safe NE (a2,a2); %.3fs",
                   elapsed);
  } else {
    for (const auto& f : failures) v.detail += (v.detail.empty() ? "" : "; ") + f;
  }
  return v;
}

// ---------------------------------------------------------------------------
// 4-8. Convergence sweeps.

std::string need(const SweepOutcome& o, std::size_t at_least) {
  return fmt("%s (need >= %zu)", o.str().c_str(), at_least);
}

Verdict penalty_k0(ObsMode mode) {
  const SweepOutcome o = sweep("penalty_k0", Variant::kFull, mode);
  Verdict v;
  v.pass = o.converged >= 18 && o.wall_seconds < 15 * 60.0;
  v.detail = fmt("%s: penalty k=0 %s, %.0fs (limit 900s)", obs_mode_name(mode),
                 need(o, 18).c_str(), o.wall_seconds);
  return v;
}

Verdict penalty_negative() {
  const SweepOutcome k100 = sweep("penalty_k-100", Variant::kFull, ObsMode::kGlobalState);
  const SweepOutcome k1000 = sweep("penalty_k-1000", Variant::kFull, ObsMode::kGlobalState);
  const SweepOutcome k10000 = sweep("penalty_k-10000", Variant::kFull, ObsMode::kGlobalState);
  Verdict v;
  v.pass = k100.converged >= 16 && k1000.converged >= 10 && k10000.converged >= 8;
  v.detail = "k=-100 " + need(k100, 16) + ", k=-1000 " + need(k1000, 10) + ", k=-10000 " +
             need(k10000, 8);
  return v;
}

Verdict multi_step(ObsMode mode) {
  const SweepOutcome mixing = sweep("mixing", Variant::kFull, mode);
  const SweepOutcome coord = sweep("coordination", Variant::kFull, mode);
  const SweepOutcome coop = sweep("cooperation", Variant::kFull, mode);
  const double wall = mixing.wall_seconds + coord.wall_seconds + coop.wall_seconds;
  Verdict v;
  v.pass = mixing.converged >= 18 && coord.converged >= 14 && coop.converged >= 14 &&
           wall < 3600.0;
  v.detail = fmt("%s: mixing %s, coordination %s, cooperation %s, %.0fs (limit 3600s)",
                 obs_mode_name(mode), need(mixing, 18).c_str(), need(coord, 14).c_str(),
                 need(coop, 14).c_str(), wall);
  return v;
}

Verdict ablation_direction() {
  const SweepOutcome pen_full = sweep("penalty_k-100", Variant::kFull, ObsMode::kGlobalState);
  const SweepOutcome pen_itb = sweep("penalty_k-100", Variant::kItbOnly, ObsMode::kGlobalState);
  const SweepOutcome co_full = sweep("coordination", Variant::kFull, ObsMode::kGlobalState);
  std::map<Variant, SweepOutcome> co;
  for (Variant var : {Variant::kItbOnly, Variant::kItbMlp, Variant::kOtbGru, Variant::kOtbOnly}) {
    co[var] = sweep("coordination", var, ObsMode::kGlobalState);
  }
  std::vector<std::string> failures;
  if (!(pen_full.converged > pen_itb.converged)) failures.push_back("penalty full <= itb-only");
  if (!(co_full.converged > co[Variant::kItbOnly].converged)) {
    failures.push_back("coordination full <= itb-only");
  }
  for (Variant var : {Variant::kItbMlp, Variant::kOtbGru, Variant::kOtbOnly}) {
    if (co_full.converged < co[var].converged) {
      failures.push_back(std::string("coordination full < ") + variant_name(var));
    }
  }
  if (!(2 * pen_itb.converged < pen_itb.seeds)) failures.push_back("penalty itb-only >= 50%");
  Verdict v;
  v.pass = failures.empty();
  v.detail = fmt("penalty k=-100 full %s vs itb-only %s; coordination full %s, itb-only %s, "
                 "itb-mlp %s, otb-gru %s, otb-only %s",
                 pen_full.str().c_str(), pen_itb.str().c_str(), co_full.str().c_str(),
                 co[Variant::kItbOnly].str().c_str(), co[Variant::kItbMlp].str().c_str(),
                 co[Variant::kOtbGru].str().c_str(), co[Variant::kOtbOnly].str().c_str());
  for (const auto& f : failures) v.detail += "; " + f;
  return v;
}

Verdict observation_modes() {
  std::vector<Verdict> parts;
  for (ObsMode mode : {ObsMode::kGlobalState, ObsMode::kLocalOnly}) {
    parts.push_back(penalty_k0(mode));
    parts.push_back(multi_step(mode));
  }
  Verdict v;
  v.pass = std::all_of(parts.begin(), parts.end(), [](const Verdict& p) { return p.pass; });
  for (const auto& p : parts) v.detail += (v.detail.empty() ? "" : "; ") + p.detail;
  return v;
}

// ---------------------------------------------------------------------------
// 9. Manifest re-runs.

Verdict manifest_determinism() {
  const fs::path root = g_runs / "determinism";
  fs::remove_all(root);
  std::vector<std::string> mismatches;
  std::size_t compared = 0;
  const auto check = [&](harness::ExperimentConfig c, const std::string& label) {
    c.out = root / (label + "-first");
    harness::run_sweep(c);
    harness::ExperimentConfig again = harness::config_from_manifest(c.out / "manifest");
    again.out = root / (label + "-again");
    again.workers = 1;
    harness::run_sweep(again);
    for (std::uint64_t seed : c.seeds) {
      for (const char* file : {"metrics.csv", "checkpoint"}) {
        const std::string rel = "seed_" + std::to_string(seed) + "/" + file;
        ++compared;
        if (steer::testing::read_file(c.out / rel) !=
            steer::testing::read_file(again.out / rel)) {
          mismatches.push_back(label + "/" + rel);
        }
      }
    }
    auto strip = [](nlohmann::json doc) {
      doc.erase("wall_seconds");
      for (auto& s : doc["seeds"]) s.erase("wall_seconds");
      return doc;
    };
    ++compared;
    if (strip(nlohmann::json::parse(steer::testing::read_file(c.out / "result"))) !=
        strip(nlohmann::json::parse(steer::testing::read_file(again.out / "result")))) {
      mismatches.push_back(label + "/result");
    }
  };

  harness::ExperimentConfig coord;
  coord.game_path = game_path("coordination");
  coord.obs_mode = ObsMode::kLocalOnly;
  coord.seeds = {3, 11, 17};
  check(coord, "coordination-local");

  harness::ExperimentConfig pen;
  pen.game_path = game_path("penalty_k-1000");
  pen.variant = Variant::kOtbGru;
  pen.seeds = {0, 5};
  pen.train.total_steps = 20'000;
  check(pen, "penalty-otb-gru");

  Verdict v;
  v.pass = mismatches.empty();
  v.detail = fmt("%zu files compared across two manifest re-runs, %zu differ", compared,
                 mismatches.size());
  for (const auto& m : mismatches) v.detail += "; " + m;
  return v;
}

struct Criterion {
  int id;
  const char* title;
  std::function<Verdict()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string runs = g_runs.string();
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',');
  app.add_option("--runs", runs, "Directory for training sweeps")->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  g_runs = runs;

  const std::vector<Criterion> criteria = {
      {1, "loss gradient vs finite differences", gradient_integrity},
      {2, "autoregressive vs teacher-forced", ar_tf_equivalence},
      {3, "oracle equilibria", oracle_correctness},
      {4, "penalty k=0 convergence", [] { return penalty_k0(ObsMode::kGlobalState); }},
      {5, "penalty k<0 convergence", penalty_negative},
      {6, "multi-step games convergence", [] { return multi_step(ObsMode::kGlobalState); }},
      {7, "ablation ordering", ablation_direction},
      {8, "both observation modes", observation_modes},
      {9, "manifest re-run determinism", manifest_determinism},
  };

  bool all = true;
  try {
    fs::create_directories(g_runs);
    for (const auto& c : criteria) {
      if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
      std::fprintf(stderr, "criterion %d: %s\n", c.id, c.title);
      const Verdict v = c.run();
      std::printf("%s %d %s: %s\n", v.pass ? "PASS" : "FAIL", c.id, c.title, v.detail.c_str());
      std::fflush(stdout);
      all = all && v.pass;
    }
  } catch (const std::exception& e) {
    std::printf("ERROR %s\n", e.what());
    return 2;
  }
  return all ? 0 : 1;
}
