#include "steer/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "steer/equilibria.hpp"
#include "steer/errors.hpp"

#ifndef STEER_CODE_VERSION
#define STEER_CODE_VERSION "unknown"
#endif

namespace steer::harness {

namespace fs = std::filesystem;
using nlohmann::json;

const char* code_version() { return STEER_CODE_VERSION; }

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("need at least one seed");
  if (out.empty()) throw ConfigError("no output directory given");
  if (game_document.empty() && game_path.empty()) {
    throw ConfigError("no game document given");
  }
  train.validate();
}

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os << text;
  if (!os) throw std::runtime_error("failed writing '" + path.string() + "'");
}

std::string fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

GameSpec load_game(ExperimentConfig& config) {
  if (config.game_document.empty()) {
    if (!fs::is_regular_file(config.game_path)) {
      throw ConfigError("game document '" + config.game_path.string() +
                        "' not found");
    }
    config.game_document = read_file(config.game_path);
  }
  GameSpec spec = load_spec(config.game_document);
  for (const auto& r : equilibria::validate_claims(spec)) {
    if (!r.pass) {
      throw ValidationError("game '" + spec.name + "': claim '" + r.claim +
                            "' fails: " + r.witness);
    }
  }
  if (config.obs_mode) spec.obs_mode = *config.obs_mode;
  if (!config.priority.empty()) {
    std::vector<std::size_t> sorted = config.priority;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted.size() != spec.n_agents || sorted[i] != i) {
        throw ConfigError("priority must be a permutation of 1.." +
                          std::to_string(spec.n_agents));
      }
    }
    spec.priority = config.priority;
  }
  if (config.gamma_from_game) config.train.gamma = spec.gamma;
  return spec;
}

ModelConfig model_config(const ExperimentConfig& config, const GameSpec& spec) {
  ModelConfig mc = config_for(spec, config.variant);
  mc.embed_dim = config.embed_dim;
  return mc;
}

Interval normal_ci(const std::vector<double>& values) {
  Interval ci;
  if (values.empty()) return ci;
  const double n = static_cast<double>(values.size());
  for (double v : values) ci.mean += v;
  ci.mean /= n;
  double half = 0.0;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - ci.mean) * (v - ci.mean);
    half = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  ci.low = ci.mean - half;
  ci.high = ci.mean + half;
  return ci;
}

SeedResult run_seed(const GameSpec& spec, const ModelConfig& model,
                    const TrainConfig& train, std::uint64_t seed,
                    const fs::path& seed_dir, bool checkpoint) {
  SeedResult r;
  r.seed = seed;
  const auto start = std::chrono::steady_clock::now();
  try {
    TrainConfig tc = train;
    tc.seed = seed;
    TrainResult result = steer::train(spec, model, tc);
    fs::create_directories(seed_dir);
    write_metrics_csv(seed_dir / "metrics.csv", result.metrics, spec.n_agents);
    if (checkpoint) result.model.save(seed_dir / "checkpoint");
    r.completed = true;
    r.se_match = result.final_eval.se_match;
    r.returns = result.final_eval.returns;
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  r.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

namespace {

json train_json(const TrainConfig& t) {
  auto clip = [](double c) { return std::isinf(c) ? json("inf") : json(c); };
  return {{"total_steps", t.total_steps},     {"rollout_length", t.rollout_length},
          {"epochs", t.epochs},               {"minibatches", t.minibatches},
          {"gamma", t.gamma},                 {"gae_lambda", t.gae_lambda},
          {"clip", clip(t.clip)},             {"value_clip", clip(t.value_clip)},
          {"entropy_coef", t.entropy_coef},   {"value_coef", t.value_coef},
          {"learning_rate", t.learning_rate}, {"max_grad_norm", t.max_grad_norm},
          {"eval_interval", t.eval_interval}, {"eval_episodes", t.eval_episodes}};
}

TrainConfig train_from_json(const json& j) {
  auto clip = [](const json& v) {
    return v.is_string() ? std::numeric_limits<double>::infinity() : v.get<double>();
  };
  TrainConfig t;
  t.total_steps = j.at("total_steps");
  t.rollout_length = j.at("rollout_length");
  t.epochs = j.at("epochs");
  t.minibatches = j.at("minibatches");
  t.gamma = j.at("gamma");
  t.gae_lambda = j.at("gae_lambda");
  t.clip = clip(j.at("clip"));
  t.value_clip = clip(j.at("value_clip"));
  t.entropy_coef = j.at("entropy_coef");
  t.value_coef = j.at("value_coef");
  t.learning_rate = j.at("learning_rate");
  t.max_grad_norm = j.at("max_grad_norm");
  t.eval_interval = j.at("eval_interval");
  t.eval_episodes = j.at("eval_episodes");
  return t;
}

}  // namespace

std::string oracle_hash(const GameSpec& spec) {
  const auto report = equilibria::solve_stages(spec);
  const auto claims = equilibria::validate_claims(spec);
  return fnv1a(equilibria::format_report(spec, report, claims));
}

json manifest_json(const ExperimentConfig& config, const GameSpec& spec) {
  std::vector<std::size_t> priority;
  for (std::size_t p : spec.priority) priority.push_back(p + 1);
  const ModelConfig mc = model_config(config, spec);
  return {{"code_version", code_version()},
          {"game",
           {{"name", spec.name},
            {"path", config.game_path.string()},
            {"document", config.game_document},
            {"document_hash", fnv1a(config.game_document)}}},
          {"oracle_report_hash", oracle_hash(spec)},
          {"variant", variant_name(config.variant)},
          {"obs_mode", obs_mode_name(spec.obs_mode)},
          {"priority", priority},
          {"model",
           {{"embed_dim", mc.embed_dim},
            {"inner_depth", mc.inner_depth},
            {"outer_depth", mc.outer_depth},
            {"heads", mc.heads},
            {"parameters", parameter_count(mc)}}},
          {"train", train_json(config.train)},
          {"seeds", config.seeds},
          {"write_checkpoints", config.write_checkpoints}};
}

ExperimentConfig config_from_manifest(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("manifest '" + path.string() + "': " + e.what());
  }
  try {
    ExperimentConfig c;
    c.game_path = j.at("game").at("path").get<std::string>();
    c.game_document = j.at("game").at("document").get<std::string>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.obs_mode = parse_obs_mode(j.at("obs_mode").get<std::string>());
    for (std::size_t p : j.at("priority").get<std::vector<std::size_t>>()) {
      if (p == 0) throw ConfigError("manifest priority is 1-based");
      c.priority.push_back(p - 1);
    }
    c.train = train_from_json(j.at("train"));
    c.gamma_from_game = false;
    c.embed_dim = j.at("model").at("embed_dim");
    c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.write_checkpoints = j.at("write_checkpoints");
    return c;
  } catch (const json::exception& e) {
    throw ConfigError("manifest '" + path.string() + "': " + e.what());
  }
}

json result_json(const SweepResult& r) {
  json seeds = json::array();
  for (const auto& s : r.seeds) {
    json e = {{"seed", s.seed},
              {"completed", s.completed},
              {"se_match", s.se_match},
              {"returns", s.returns},
              {"wall_seconds", s.wall_seconds}};
    if (!s.error.empty()) e["error"] = s.error;
    seeds.push_back(std::move(e));
  }
  return {{"game", r.game},
          {"variant", variant_name(r.variant)},
          {"obs_mode", obs_mode_name(r.obs_mode)},
          {"seed_count", r.seeds.size()},
          {"completed", r.completed},
          {"converged", r.converged},
          {"convergence", r.convergence},
          {"return_mean", r.return_mean},
          {"return_ci_low", r.return_ci_low},
          {"return_ci_high", r.return_ci_high},
          {"ci", "95% normal approximation: mean +- 1.96*s/sqrt(n) over completed seeds"},
          {"warning", r.warning},
          {"wall_seconds", r.wall_seconds},
          {"seeds", seeds}};
}

SweepResult run_sweep(ExperimentConfig config, const SeedHook& hook) {
  const GameSpec spec = load_game(config);
  config.validate();
  const ModelConfig mc = model_config(config, spec);
  mc.validate();
  fs::create_directories(config.out);
  write_file(config.out / "manifest", manifest_json(config, spec).dump(2) + "\n");

  const auto start = std::chrono::steady_clock::now();
  SweepResult result;
  result.game = spec.name;
  result.variant = config.variant;
  result.obs_mode = spec.obs_mode;
  result.seeds.resize(config.seeds.size());

  std::size_t workers = config.workers;
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, config.seeds.size());
  std::atomic<std::size_t> next{0};
  std::mutex hook_mutex;
  auto work = [&] {
    for (std::size_t k = next++; k < config.seeds.size(); k = next++) {
      const std::uint64_t seed = config.seeds[k];
      SeedResult r = run_seed(spec, mc, config.train, seed,
                              config.out / ("seed_" + std::to_string(seed)),
                              config.write_checkpoints);
      if (hook) {
        std::lock_guard lock(hook_mutex);
        hook(r);
      }
      result.seeds[k] = std::move(r);  // each worker owns distinct slots
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }

  std::vector<std::vector<double>> per_agent(spec.n_agents);
  for (const auto& s : result.seeds) {
    if (!s.completed) {
      result.warning = true;
      continue;
    }
    ++result.completed;
    if (s.se_match) ++result.converged;
    for (std::size_t i = 0; i < spec.n_agents; ++i) per_agent[i].push_back(s.returns[i]);
  }
  result.convergence =
      static_cast<double>(result.converged) / static_cast<double>(result.seeds.size());
  for (const auto& values : per_agent) {
    const Interval ci = normal_ci(values);
    result.return_mean.push_back(ci.mean);
    result.return_ci_low.push_back(ci.low);
    result.return_ci_high.push_back(ci.high);
  }
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_file(config.out / "result", result_json(result).dump(2) + "\n");
  return result;
}

std::vector<SweepResult> ablate(const ExperimentConfig& config,
                                const std::vector<Variant>& variants,
                                const SeedHook& hook) {
  std::vector<SweepResult> results;
  for (Variant v : variants) {
    ExperimentConfig c = config;
    c.variant = v;
    c.out = config.out / variant_name(v);
    results.push_back(run_sweep(c, hook));
  }
  return results;
}

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

fs::path emit_plot_data(const fs::path& dir) {
  std::vector<fs::path> files;
  if (fs::is_directory(dir)) {
    for (const auto& entry : fs::directory_iterator(dir)) {
      const auto name = entry.path().filename().string();
      if (entry.is_directory() && name.starts_with("seed_") &&
          fs::is_regular_file(entry.path() / "metrics.csv")) {
        files.push_back(entry.path() / "metrics.csv");
      }
    }
  }
  if (files.empty()) {
    throw std::runtime_error("no seed_*/metrics.csv under '" + dir.string() + "'");
  }
  std::sort(files.begin(), files.end());

  // step -> per-seed (mean return over agents, se_match)
  std::map<std::size_t, std::vector<std::pair<double, double>>> points;
  for (const auto& file : files) {
    std::ifstream in(file);
    std::string line;
    std::getline(in, line);
    const auto header = split(line, ',');
    std::vector<std::size_t> return_cols;
    std::size_t match_col = header.size();
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (header[c].starts_with("eval_return_mean")) return_cols.push_back(c);
      if (header[c] == "se_match") match_col = c;
    }
    if (return_cols.empty() || match_col == header.size()) {
      throw std::runtime_error("'" + file.string() + "' is not a metrics file");
    }
    while (std::getline(in, line)) {
      const auto cells = split(line, ',');
      if (cells.size() != header.size() || cells[match_col].empty()) continue;
      double total = 0.0;
      for (std::size_t c : return_cols) total += std::stod(cells[c]);
      points[std::stoull(cells[0])].emplace_back(
          total / static_cast<double>(return_cols.size()), std::stod(cells[match_col]));
    }
  }
  std::string out = "step,mean,ci_low,ci_high,se_match_rate\n";
  for (const auto& [step, values] : points) {
    std::vector<double> returns;
    double matches = 0.0;
    for (const auto& [ret, match] : values) {
      returns.push_back(ret);
      matches += match;
    }
    const Interval ci = normal_ci(returns);
    out += std::to_string(step) + ',' + num(ci.mean) + ',' + num(ci.low) + ',' +
           num(ci.high) + ',' + num(matches / static_cast<double>(values.size())) + '\n';
  }
  const fs::path curve = dir / "curve.csv";
  write_file(curve, out);
  return curve;
}

}  // namespace steer::harness
