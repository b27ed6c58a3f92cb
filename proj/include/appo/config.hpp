#pragma once

// Run configuration: JSON config file plus programmatic overrides. The CLI
// parses flags into RunnerOptions; the config file fills whatever the flags
// left untouched.

#include <fstream>
#include <optional>
#include <string>

#include "json.hpp"

#include "appo/orchestrator.hpp"
#include "appo/population.hpp"

namespace appo {

struct BenchOptions {
  std::string mode = "both";  // pure_sim | full_pipeline | both
  double window_s = 60.0;
  double warmup_s = 5.0;
  std::string csv;  // optional bench CSV output
};

struct EvalOptions {
  std::string ckpt_a;
  std::string ckpt_b;          // or:
  int vs_scripted = 0;         // difficulty 1..5
  bool vs_random = false;
  int matches = 100;
  std::uint64_t seed = 1;
};

struct RunnerOptions {
  PipelineConfig pipeline;
  PopulationConfig pbt;
  BenchOptions bench;
  EvalOptions eval;

  std::int64_t frames = 1'000'000;  // training frame budget
  std::string metrics_csv;
  std::string pbt_csv;
  std::string checkpoint_dir;
  std::int64_t save_every = 0;  // frames; 0 disables periodic saves
  std::string load_checkpoint;
  std::string dump_trajectories;  // directory; empty disables
};

// Documented config keys (see README): discount, advantage.source,
// vtrace.rho_bar, vtrace.c_bar, ppo.clip, loss.value_coef,
// loss.entropy_coef, run.*, adam.*, env.*, pbt.*, os_hints.
inline void apply_config_json(RunnerOptions& opt, const nlohmann::json& j) {
  using nlohmann::json;
  auto get = [](const json& o, const char* k) -> std::optional<json> {
    if (o.contains(k)) return o.at(k);
    return std::nullopt;
  };

  if (auto v = get(j, "discount")) opt.pipeline.gamma = v->get<double>();
  if (auto v = get(j, "os_hints")) opt.pipeline.os_hints = v->get<std::string>();

  if (auto v = get(j, "vtrace")) {
    if (auto x = get(*v, "rho_bar")) opt.pipeline.rho_bar = x->get<double>();
    if (auto x = get(*v, "c_bar")) opt.pipeline.c_bar = x->get<double>();
  }
  if (auto v = get(j, "ppo")) {
    if (auto x = get(*v, "clip")) {
      const double c = x->get<double>();
      if (!(c > 1.0)) throw ConfigError("ppo.clip must exceed 1");
      opt.pipeline.loss.clip.ratio_high = c;
      opt.pipeline.loss.clip.ratio_low = 1.0 / c;
    }
  }
  if (auto v = get(j, "loss")) {
    if (auto x = get(*v, "value_coef")) opt.pipeline.loss.value_coef = x->get<double>();
    if (auto x = get(*v, "entropy_coef")) opt.pipeline.loss.entropy_coef = x->get<double>();
  }
  if (auto v = get(j, "advantage")) {
    if (auto x = get(*v, "source")) {
      const std::string s = x->get<std::string>();
      if (s == "vtrace")
        opt.pipeline.advantage_source = AdvantageSource::VTrace;
      else if (s == "nstep")
        opt.pipeline.advantage_source = AdvantageSource::NStep;
      else
        throw ConfigError("advantage.source must be vtrace or nstep");
    }
    if (auto x = get(*v, "normalize")) opt.pipeline.normalize_advantage = x->get<bool>();
  }
  if (auto v = get(j, "adam")) {
    if (auto x = get(*v, "lr")) opt.pipeline.adam.lr = x->get<double>();
    if (auto x = get(*v, "beta1")) opt.pipeline.adam.beta1 = x->get<double>();
    if (auto x = get(*v, "beta2")) opt.pipeline.adam.beta2 = x->get<double>();
    if (auto x = get(*v, "eps")) opt.pipeline.adam.eps = x->get<double>();
    if (auto x = get(*v, "grad_clip")) opt.pipeline.adam.grad_clip = x->get<double>();
  }
  if (auto v = get(j, "run")) {
    if (auto x = get(*v, "n_workers")) opt.pipeline.n_workers = x->get<int>();
    if (auto x = get(*v, "k")) opt.pipeline.k = x->get<int>();
    if (auto x = get(*v, "T")) opt.pipeline.T = x->get<int>();
    if (auto x = get(*v, "batch")) opt.pipeline.n_batch = x->get<int>();
    if (auto x = get(*v, "policy_workers")) opt.pipeline.policy_workers = x->get<int>();
    if (auto x = get(*v, "seed")) opt.pipeline.seed = x->get<std::uint64_t>();
    if (auto x = get(*v, "frames")) opt.frames = x->get<std::int64_t>();
    if (auto x = get(*v, "frameskip")) opt.pipeline.frameskip = x->get<int>();
    if (auto x = get(*v, "trunk_hidden")) opt.pipeline.trunk_hidden = x->get<int>();
    if (auto x = get(*v, "hidden_dim")) opt.pipeline.hidden_dim = x->get<int>();
    if (auto x = get(*v, "pool_slots")) opt.pipeline.pool_slots = x->get<std::uint32_t>();
    if (auto x = get(*v, "deterministic")) opt.pipeline.deterministic = x->get<bool>();
    if (auto x = get(*v, "population")) opt.pipeline.population = x->get<std::uint32_t>();
  }
  if (auto v = get(j, "env")) {
    if (auto x = get(*v, "name")) opt.pipeline.env_name = x->get<std::string>();
    if (auto x = get(*v, "t_env_ms")) opt.pipeline.env_opt.t_env_ms = x->get<double>();
    if (auto x = get(*v, "obs_dim")) opt.pipeline.env_opt.synthetic_obs_dim = x->get<int>();
    if (auto x = get(*v, "episode_len")) opt.pipeline.env_opt.episode_len = x->get<int>();
    if (auto g = get(*v, "gridbattle")) {
      GridBattleConfig& gb = opt.pipeline.env_opt.grid;
      if (auto x = get(*g, "grid")) gb.grid = x->get<int>();
      if (auto x = get(*g, "bot_difficulty")) gb.bot_difficulty = x->get<int>();
      if (auto x = get(*g, "attack_range")) gb.attack_range = x->get<int>();
      if (auto x = get(*g, "w_tag")) gb.w_tag = x->get<double>();
      if (auto x = get(*g, "w_pickup")) gb.w_pickup = x->get<double>();
      if (auto x = get(*g, "w_death")) gb.w_death = x->get<double>();
    }
  }
  if (auto v = get(j, "pbt")) {
    if (auto x = get(*v, "period")) opt.pbt.pbt_period = x->get<std::int64_t>();
    if (auto x = get(*v, "mutate_fraction")) opt.pbt.mutate_fraction = x->get<double>();
    if (auto x = get(*v, "mutation_rate")) opt.pbt.mutation_rate = x->get<double>();
    if (auto x = get(*v, "mutation_factor")) opt.pbt.mutation_factor = x->get<double>();
    if (auto x = get(*v, "replace_fraction")) opt.pbt.replace_fraction = x->get<double>();
    if (auto x = get(*v, "exchange_threshold")) opt.pbt.exchange_threshold = x->get<double>();
  }
}

inline void load_config_file(RunnerOptions& opt, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  apply_config_json(opt, j);
}

}  // namespace appo
