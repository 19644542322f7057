// steer: train, sweep, ablate, oracle, eval and plot from the command line.
// Exit status: 0 success, 1 usage or validation failure, 2 runtime failure.

#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "steer/equilibria.hpp"
#include "steer/errors.hpp"
#include "steer/harness.hpp"

namespace {

using namespace steer;
namespace fs = std::filesystem;

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kRuntime = 2;

// Flags shared by train, sweep and ablate.
struct RunFlags {
  std::string game;
  std::string variant = "full";
  std::string seeds = "20";
  std::size_t steps = 60'000;
  std::string obs_mode;
  std::string priority;
  std::string out;
  std::string manifest;
  double lr = 5e-4;
  double clip = 0.2;
  double entropy_coef = 0.01;
  double gamma = -1.0;
  double gae_lambda = 0.95;
  std::size_t embed_dim = 64;
  std::size_t workers = 0;
  bool no_checkpoints = false;
  bool quiet = false;
};

void add_run_flags(CLI::App* app, RunFlags& f, bool multi_seed) {
  app->add_option("--game,game", f.game, "Game document path");
  app->add_option("--variant", f.variant,
                  "Model variant: full, itb-mlp, otb-gru, itb-only, otb-only")
      ->capture_default_str();
  if (multi_seed) {
    app->add_option("--seeds", f.seeds,
                    "Seed count N (seeds 0..N-1) or a comma list such as 3,7,9")
        ->capture_default_str();
    app->add_option("--workers", f.workers, "Concurrent runs (0 = one per core)")
        ->capture_default_str();
  } else {
    f.seeds = "0";
    app->add_option("--seed", f.seeds, "Training seed")->capture_default_str();
  }
  app->add_option("--steps", f.steps, "Environment steps per run")->capture_default_str();
  app->add_option("--obs-mode", f.obs_mode, "Override observation mode: global or local");
  app->add_option("--priority", f.priority,
                  "Decision order as a 1-based permutation, e.g. 2,1");
  app->add_option("--out", f.out, "Output directory");
  app->add_option("--lr", f.lr, "Adam learning rate")->capture_default_str();
  app->add_option("--clip", f.clip, "PPO clip ratio (policy and value)")
      ->capture_default_str();
  app->add_option("--entropy-coef", f.entropy_coef, "Entropy bonus coefficient")
      ->capture_default_str();
  app->add_option("--gamma", f.gamma, "Discount (default: the game's)");
  app->add_option("--gae-lambda", f.gae_lambda, "GAE lambda")->capture_default_str();
  app->add_option("--embed-dim", f.embed_dim, "Model width d")->capture_default_str();
  app->add_flag("--no-checkpoints", f.no_checkpoints, "Skip writing checkpoints");
  app->add_flag("--quiet", f.quiet, "No per-seed progress lines");
}

std::vector<std::size_t> parse_index_list(const std::string& text, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError(std::string("bad ") + what + " '" + text + "'");
    }
  }
  if (out.empty()) throw ConfigError(std::string("empty ") + what);
  return out;
}

harness::ExperimentConfig build_config(const RunFlags& f, bool multi_seed) {
  harness::ExperimentConfig c;
  if (!f.manifest.empty()) {
    c = harness::config_from_manifest(f.manifest);
  } else {
    if (f.game.empty()) throw ConfigError("--game is required");
    c.game_path = f.game;
    c.variant = parse_variant(f.variant);
    if (!f.obs_mode.empty()) c.obs_mode = parse_obs_mode(f.obs_mode);
    if (!f.priority.empty()) {
      for (std::size_t p : parse_index_list(f.priority, "priority")) {
        if (p == 0) throw ConfigError("--priority is 1-based");
        c.priority.push_back(p - 1);
      }
    }
    const auto seeds = parse_index_list(f.seeds, "seed list");
    if (multi_seed && seeds.size() == 1 && f.seeds.find(',') == std::string::npos) {
      if (seeds[0] == 0) throw ConfigError("--seeds must be at least 1");
      for (std::size_t s = 0; s < seeds[0]; ++s) c.seeds.push_back(s);
    } else {
      c.seeds.assign(seeds.begin(), seeds.end());
    }
    c.train.total_steps = f.steps;
    c.train.learning_rate = f.lr;
    c.train.clip = f.clip;
    c.train.value_clip = f.clip;
    c.train.entropy_coef = f.entropy_coef;
    c.train.gae_lambda = f.gae_lambda;
    if (f.gamma >= 0.0) {
      c.train.gamma = f.gamma;
      c.gamma_from_game = false;
    }
    c.embed_dim = f.embed_dim;
    c.write_checkpoints = !f.no_checkpoints;
  }
  if (f.out.empty()) throw ConfigError("--out is required");
  c.out = f.out;
  c.workers = f.workers;
  return c;
}

void print_seed(const harness::SeedResult& r) {
  if (!r.completed) {
    std::fprintf(stderr, "seed %llu: FAILED %s\n",
                 static_cast<unsigned long long>(r.seed), r.error.c_str());
    return;
  }
  std::fprintf(stderr, "seed %llu: se_match=%d returns=",
               static_cast<unsigned long long>(r.seed), r.se_match ? 1 : 0);
  for (std::size_t i = 0; i < r.returns.size(); ++i) {
    std::fprintf(stderr, "%s%.4f", i ? "," : "", r.returns[i]);
  }
  std::fprintf(stderr, " (%.1fs)\n", r.wall_seconds);
}

void print_summary(const harness::SweepResult& r) {
  std::printf("%s/%s/%s: converged %zu/%zu (%.1f%%)%s\n", r.game.c_str(),
              variant_name(r.variant), obs_mode_name(r.obs_mode), r.converged,
              r.seeds.size(), 100.0 * r.convergence,
              r.warning ? " [warning: some seeds failed]" : "");
}

int run_oracle(const std::string& path, const std::string& priority,
               const std::string& convention) {
  GameSpec spec = load_spec_file(path);
  const auto claims = equilibria::validate_claims(spec);
  std::vector<std::size_t> order = spec.priority;
  if (!priority.empty()) {
    order.clear();
    for (std::size_t p : parse_index_list(priority, "priority")) {
      if (p == 0) throw ConfigError("--priority is 1-based");
      order.push_back(p - 1);
    }
  }
  equilibria::TieConvention tie = equilibria::TieConvention::kStrong;
  if (convention == "weak") {
    tie = equilibria::TieConvention::kWeak;
  } else if (convention != "strong") {
    throw ConfigError("--convention must be strong or weak");
  }
  const auto report = equilibria::solve_stages(spec, order, tie);
  std::cout << equilibria::format_report(spec, report, claims);
  for (const auto& c : claims) {
    if (!c.pass) return kInvalid;
  }
  return kOk;
}

int run_eval(const std::string& checkpoint, const std::string& game) {
  GameSpec spec = equilibria::load_validated(game);
  if (!fs::is_regular_file(checkpoint)) {
    throw ConfigError("checkpoint '" + checkpoint + "' not found");
  }
  const SteerModel model = SteerModel::load(checkpoint);
  spec.obs_mode = model.config().obs_mode;
  const auto oracle = equilibria::solve_stages(spec, model.config().decision_order());
  const EvalResult r = evaluate_greedy(spec, model, oracle, 1);
  std::printf("trajectory:");
  for (const auto& j : r.trajectory) std::printf(" (%s)", joint_str(j).c_str());
  std::printf("\nreturns:");
  for (double v : r.returns) std::printf(" %.6f", v);
  std::printf("\nse_match: %s\n", r.se_match ? "true" : "false");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Leader-follower transformer policies on multi-agent games"};
  app.require_subcommand(1);

  RunFlags train_flags, sweep_flags, ablate_flags;
  auto* train = app.add_subcommand("train", "Train one seed");
  add_run_flags(train, train_flags, false);
  auto* sweep = app.add_subcommand("sweep", "Train many seeds and aggregate");
  add_run_flags(sweep, sweep_flags, true);
  sweep->add_option("--manifest", sweep_flags.manifest,
                    "Re-run exactly the experiment recorded in a manifest");
  auto* ablate = app.add_subcommand("ablate", "Sweep every model variant");
  add_run_flags(ablate, ablate_flags, true);
  std::string variants = "full,itb-mlp,otb-gru,itb-only,otb-only";
  ablate->add_option("--variants", variants, "Comma list of variants")
      ->capture_default_str();

  auto* oracle = app.add_subcommand("oracle", "Print the equilibrium report of a game");
  std::string oracle_game, oracle_priority, convention = "strong";
  oracle->add_option("game", oracle_game, "Game document path")->required();
  oracle->add_option("--priority", oracle_priority, "1-based decision order");
  oracle->add_option("--convention", convention, "Tie convention: strong or weak")
      ->capture_default_str();

  auto* eval = app.add_subcommand("eval", "Greedy rollout of a checkpoint");
  std::string eval_checkpoint, eval_game;
  eval->add_option("--checkpoint", eval_checkpoint, "Checkpoint file")->required();
  eval->add_option("--game", eval_game, "Game document path")->required();

  auto* plot = app.add_subcommand("plot", "Write learning-curve data for a sweep");
  std::string plot_dir;
  plot->add_option("dir", plot_dir, "Sweep output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInvalid;
  }

  try {
    if (*train || *sweep) {
      const bool multi = sweep->parsed();
      RunFlags& f = multi ? sweep_flags : train_flags;
      harness::ExperimentConfig config = build_config(f, multi);
      const auto hook = f.quiet ? harness::SeedHook{} : harness::SeedHook{print_seed};
      const auto result = harness::run_sweep(config, hook);
      print_summary(result);
      return result.completed == result.seeds.size() ? kOk : kRuntime;
    }
    if (*ablate) {
      harness::ExperimentConfig config = build_config(ablate_flags, true);
      std::vector<Variant> list;
      std::stringstream ss(variants);
      std::string tok;
      while (std::getline(ss, tok, ',')) list.push_back(parse_variant(tok));
      const auto hook =
          ablate_flags.quiet ? harness::SeedHook{} : harness::SeedHook{print_seed};
      bool complete = true;
      for (const auto& r : harness::ablate(config, list, hook)) {
        print_summary(r);
        complete = complete && r.completed == r.seeds.size();
      }
      return complete ? kOk : kRuntime;
    }
    if (*oracle) return run_oracle(oracle_game, oracle_priority, convention);
    if (*eval) return run_eval(eval_checkpoint, eval_game);
    if (*plot) {
      if (!fs::is_directory(plot_dir)) {
        std::fprintf(stderr, "error: '%s' is not a directory\n", plot_dir.c_str());
        return kInvalid;
      }
      try {
        std::printf("%s\n", harness::emit_plot_data(plot_dir).string().c_str());
      } catch (const std::runtime_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kInvalid;
      }
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInvalid;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInvalid;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInvalid;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kOk;
}
