// Command-line front end: `appo bench|train|eval`. All Adam/loss/V-trace
// hyperparameters are exposed as flags with the standard defaults; a JSON
// config file can set anything the flags cover, and explicit flags win
// because the file is applied before parsing.

#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "appo/runner.hpp"

using namespace appo;

namespace {

std::string config_arg;  // consumed by the pre-scan
double clip_arg = 0.0;
std::string advantage_arg;

void add_common_flags(CLI::App* cmd, RunnerOptions& opt) {
  cmd->add_option("--config", config_arg, "JSON config file (flags override it)");
  cmd->add_option("--env", opt.pipeline.env_name,
                  "environment: synthetic | gridbattle | gridbattle-duel");
  cmd->add_option("--seed", opt.pipeline.seed, "run seed");
  cmd->add_option("--workers", opt.pipeline.n_workers, "rollout workers");
  cmd->add_option("-k,--envs-per-worker", opt.pipeline.k, "envs per rollout worker (even)");
  cmd->add_option("-T,--rollout", opt.pipeline.T, "rollout length in samples");
  cmd->add_option("--batch", opt.pipeline.n_batch, "minibatch size in samples");
  cmd->add_option("--policy-workers", opt.pipeline.policy_workers, "policy workers per policy");
  cmd->add_option("--frameskip", opt.pipeline.frameskip, "action repeat (0 = env default)");
  cmd->add_option("--gamma", opt.pipeline.gamma, "discount (0 = env default)");
  cmd->add_option("--lr", opt.pipeline.adam.lr, "learning rate");
  cmd->add_option("--adam-beta1", opt.pipeline.adam.beta1, "Adam beta1");
  cmd->add_option("--adam-beta2", opt.pipeline.adam.beta2, "Adam beta2");
  cmd->add_option("--adam-eps", opt.pipeline.adam.eps, "Adam epsilon");
  cmd->add_option("--grad-clip", opt.pipeline.adam.grad_clip, "gradient norm clip");
  cmd->add_option("--entropy-coef", opt.pipeline.loss.entropy_coef, "entropy bonus coefficient");
  cmd->add_option("--value-coef", opt.pipeline.loss.value_coef, "critic loss coefficient");
  cmd->add_option("--rho-bar", opt.pipeline.rho_bar, "V-trace rho clip");
  cmd->add_option("--c-bar", opt.pipeline.c_bar, "V-trace c clip");
  cmd->add_option("--clip", clip_arg, "PPO clip c: ratio range [1/c, c]");
  cmd->add_option("--hidden", opt.pipeline.trunk_hidden, "MLP trunk width");
  cmd->add_option("--pool-slots", opt.pipeline.pool_slots,
                  "trajectory pool size (0 = sizing formula)");
  cmd->add_flag("--deterministic", opt.pipeline.deterministic,
                "single-threaded deterministic schedule");
  cmd->add_option("--t-env-ms", opt.pipeline.env_opt.t_env_ms,
                  "synthetic env per-step cost, ms");
  cmd->add_option("--episode-len", opt.pipeline.env_opt.episode_len,
                  "episode length override, raw frames");
  cmd->add_option("--bot-difficulty", opt.pipeline.env_opt.grid.bot_difficulty,
                  "gridbattle scripted opponent strength 1..5");
  cmd->add_option("--advantage-source", advantage_arg,
                  "policy-gradient advantage: vtrace | nstep");
  cmd->add_flag("--normalize-advantage", opt.pipeline.normalize_advantage,
                "standardize advantages per minibatch");
  cmd->add_option("--os-hints", opt.pipeline.os_hints,
                  "reserved CPU affinity/priority hints (accepted, not applied)");
}

void apply_deferred_flags(RunnerOptions& opt) {
  if (clip_arg != 0.0) {
    if (clip_arg <= 1.0) throw ConfigError("--clip must exceed 1");
    opt.pipeline.loss.clip.ratio_high = clip_arg;
    opt.pipeline.loss.clip.ratio_low = 1.0 / clip_arg;
  }
  if (!advantage_arg.empty()) {
    if (advantage_arg == "vtrace")
      opt.pipeline.advantage_source = AdvantageSource::VTrace;
    else if (advantage_arg == "nstep")
      opt.pipeline.advantage_source = AdvantageSource::NStep;
    else
      throw ConfigError("--advantage-source must be vtrace or nstep");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"appo: asynchronous PPO training system with V-trace correction"};
  app.require_subcommand(1);

  RunnerOptions opt;

  // the config file must be applied before flag parsing so flags override it
  try {
    for (int i = 1; i < argc; ++i) {
      const std::string a = argv[i];
      if (a == "--config" && i + 1 < argc) load_config_file(opt, argv[i + 1]);
      else if (a.rfind("--config=", 0) == 0) load_config_file(opt, a.substr(9));
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  auto* bench = app.add_subcommand("bench", "measure sampling/training throughput");
  add_common_flags(bench, opt);
  bench->add_option("--mode", opt.bench.mode, "pure_sim | full_pipeline | both");
  bench->add_option("--window", opt.bench.window_s, "measurement window, seconds");
  bench->add_option("--warmup", opt.bench.warmup_s, "warmup excluded from measurement, seconds");
  bench->add_option("--sim-inference-ms", opt.pipeline.sim_inference_ms,
                    "simulated per-sample inference latency");
  bench->add_flag("--single-buffered", opt.pipeline.single_buffered,
                  "disable double buffering (baseline)");
  bench->add_option("--bench-csv", opt.bench.csv, "append bench reports to this CSV");

  auto* train = app.add_subcommand("train", "run the APPO training loop");
  add_common_flags(train, opt);
  train->add_option("--frames", opt.frames, "environment-frame budget");
  train->add_option("--population", opt.pipeline.population, "number of policies trained");
  train->add_option("--pbt-period", opt.pbt.pbt_period, "frames between PBT steps");
  double threshold = -1.0;
  train->add_option("--exchange-threshold", threshold,
                    "skip weight exchange when the win-rate gap to the best is below this");
  train->add_option("--metrics-csv", opt.metrics_csv, "per-learner-step metrics CSV");
  train->add_option("--pbt-csv", opt.pbt_csv, "PBT event log CSV");
  train->add_option("--checkpoint-dir", opt.checkpoint_dir, "checkpoint output directory");
  train->add_option("--save-every", opt.save_every, "checkpoint every N frames");
  train->add_option("--load", opt.load_checkpoint, "initial checkpoint to load");
  train->add_option("--dump-trajectories", opt.dump_trajectories,
                    "dump every consumed trajectory slot into this directory");

  auto* eval = app.add_subcommand("eval", "seeded match series between checkpoints");
  add_common_flags(eval, opt);
  eval->add_option("--ckpt-a", opt.eval.ckpt_a, "candidate checkpoint")->required();
  eval->add_option("--ckpt-b", opt.eval.ckpt_b, "opponent checkpoint");
  eval->add_option("--vs-scripted", opt.eval.vs_scripted, "opponent: scripted difficulty 1..5");
  eval->add_flag("--vs-random", opt.eval.vs_random, "opponent: uniform random policy");
  eval->add_option("--matches", opt.eval.matches, "number of seeded matches");
  eval->add_option("--eval-seed", opt.eval.seed, "match seed base");

  CLI11_PARSE(app, argc, argv);

  try {
    apply_deferred_flags(opt);
    if (threshold >= 0.0) opt.pbt.exchange_threshold = threshold;

    if (app.got_subcommand(bench)) {
      cmd_bench(opt, std::cout);
      return kExitOk;
    }
    if (app.got_subcommand(train)) {
      return cmd_train(opt, std::cout).exit_code;
    }
    if (app.got_subcommand(eval)) {
      cmd_eval(opt, std::cout);
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric halt: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::bad_alloc&) {
    std::cerr << "resource exhaustion\n";
    return kExitResource;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitResource;
  }
  return kExitOk;
}
