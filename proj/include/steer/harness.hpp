#ifndef STEER_HARNESS_HPP_
#define STEER_HARNESS_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steer/game.hpp"
#include "steer/model.hpp"
#include "steer/trainer.hpp"

namespace steer::harness {

// Version string recorded in manifests.
const char* code_version();

struct ExperimentConfig {
  std::filesystem::path game_path;
  // Document text; filled from game_path when empty. Manifests embed it so a
  // re-run does not depend on the file still being there.
  std::string game_document;
  Variant variant = Variant::kFull;
  std::optional<ObsMode> obs_mode;        // overrides the document
  std::vector<std::size_t> priority;      // 0-based; empty keeps the document's
  TrainConfig train;
  bool gamma_from_game = true;            // train.gamma taken from the document
  std::size_t embed_dim = 64;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path out;
  std::size_t workers = 0;                // 0 = hardware concurrency
  bool write_checkpoints = true;

  // Throws ConfigError.
  void validate() const;
};

// Game with the experiment's overrides applied. Throws ParseError,
// ValidationError (including failed claims) or ConfigError.
GameSpec load_game(ExperimentConfig& config);
ModelConfig model_config(const ExperimentConfig& config, const GameSpec& spec);

struct SeedResult {
  std::uint64_t seed = 0;
  bool completed = false;
  std::string error;
  bool se_match = false;
  std::vector<double> returns;
  double wall_seconds = 0.0;
};

struct SweepResult {
  std::string game;
  Variant variant = Variant::kFull;
  ObsMode obs_mode = ObsMode::kGlobalState;
  std::vector<SeedResult> seeds;  // in seed-list order
  std::size_t completed = 0;
  std::size_t converged = 0;
  double convergence = 0.0;  // converged / seeds.size()
  // Per agent, over completed seeds; 95% normal-approximation CI.
  std::vector<double> return_mean, return_ci_low, return_ci_high;
  bool warning = false;  // some seed did not complete
  double wall_seconds = 0.0;
};

struct Interval {
  double mean = 0.0, low = 0.0, high = 0.0;
};
// mean +- 1.96 * s / sqrt(n), s the sample standard deviation (0 when n < 2).
Interval normal_ci(const std::vector<double>& values);

using SeedHook = std::function<void(const SeedResult&)>;

// One isolated run per seed, fanned out over a worker pool. Writes
// <out>/manifest, <out>/result, <out>/seed_<k>/metrics.csv and checkpoint.
SweepResult run_sweep(ExperimentConfig config, const SeedHook& hook = {});

// Runs one training seed; exposed for the determinism checks.
SeedResult run_seed(const GameSpec& spec, const ModelConfig& model,
                    const TrainConfig& train, std::uint64_t seed,
                    const std::filesystem::path& seed_dir, bool checkpoint);

nlohmann::json manifest_json(const ExperimentConfig& config, const GameSpec& spec);
ExperimentConfig config_from_manifest(const std::filesystem::path& path);
nlohmann::json result_json(const SweepResult& result);

// Hash of the oracle's report text for the game as configured.
std::string oracle_hash(const GameSpec& spec);

// Sweeps `variants` into <out>/<variant>/.
std::vector<SweepResult> ablate(const ExperimentConfig& config,
                                const std::vector<Variant>& variants,
                                const SeedHook& hook = {});

// Reads <dir>/seed_*/metrics.csv and writes <dir>/curve.csv with columns
// step, mean, ci_low, ci_high, se_match_rate: the per-seed greedy return
// (averaged over agents) summarised across seeds at every eval point.
// Throws std::runtime_error when no metrics are found.
std::filesystem::path emit_plot_data(const std::filesystem::path& dir);

}  // namespace steer::harness

#endif  // STEER_HARNESS_HPP_
