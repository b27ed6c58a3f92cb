#pragma once

// Entry points behind the CLI subcommands: throughput benchmarking with the
// pure-simulation roofline, training with optional population-based
// meta-optimization, and checkpoint evaluation via seeded match series.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <sstream>

#include "appo/config.hpp"
#include "appo/envs.hpp"
#include "appo/orchestrator.hpp"
#include "appo/population.hpp"

namespace appo {

inline constexpr const char* kMetricsCsvHeader =
    "wallclock,policy,version,frames,fps,loss,policy_loss,value_loss,entropy,lag_mean,lag_max,"
    "q_obs,q_ready";

inline constexpr const char* kBenchCsvHeader =
    "mode,env,n_workers,k,duration_s,frames,fps,pct_of_roofline";

enum : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitNumeric = 3,
  kExitResource = 4,
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

class MetricsCsv {
 public:
  explicit MetricsCsv(const std::string& path) {
    if (path.empty()) return;
    f_.open(path, std::ios::trunc);
    if (!f_) throw std::runtime_error("cannot open metrics csv: " + path);
    f_ << kMetricsCsvHeader << "\n";
    f_.flush();
  }

  void row(const LearnerStepRow& r) {
    if (!f_.is_open()) return;
    std::lock_guard<std::mutex> lock(mu_);
    f_ << fmt_double(r.wallclock) << ',' << r.policy << ',' << r.version << ',' << r.frames
       << ',' << fmt_double(r.fps) << ',' << fmt_double(r.loss.total) << ','
       << fmt_double(r.loss.policy) << ',' << fmt_double(r.loss.value) << ','
       << fmt_double(r.loss.entropy) << ',' << fmt_double(r.lag_mean) << ','
       << fmt_double(r.lag_max) << ',' << r.q_obs << ',' << r.q_ready << "\n";
  }

  void flush() {
    if (f_.is_open()) f_.flush();
  }

 private:
  std::ofstream f_;
  std::mutex mu_;
};

}  // namespace detail

// --- bench ------------------------------------------------------------------

struct BenchReport {
  std::string mode;
  std::string env;
  int n_workers = 0;
  int k = 0;
  double duration_s = 0.0;
  std::int64_t frames = 0;
  double fps = 0.0;
  double pct_of_roofline = 0.0;  // 0 when no baseline available
};

inline void append_bench_csv(const std::string& path, const BenchReport& r) {
  if (path.empty()) return;
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream f(path, std::ios::app);
  if (fresh) f << kBenchCsvHeader << "\n";
  f << r.mode << ',' << r.env << ',' << r.n_workers << ',' << r.k << ','
    << detail::fmt_double(r.duration_s) << ',' << r.frames << ',' << detail::fmt_double(r.fps)
    << ',' << detail::fmt_double(r.pct_of_roofline) << "\n";
}

// Measures steady-state frame rate, excluding a warmup period and the
// shutdown drain.
inline BenchReport bench_once(PipelineConfig cfg, bool pure_sim, double warmup_s,
                              double window_s) {
  cfg.random_action_rollouts = pure_sim;
  Pipeline p(cfg);

  std::atomic<std::int64_t> frames_at_warmup{-1};
  const auto t0 = Clock::now();
  std::atomic<double> warmup_end{0.0};
  p.on_control_tick = [&] {
    if (frames_at_warmup.load() < 0 && seconds_since(t0) >= warmup_s) {
      frames_at_warmup = p.wiring().frames().load();
      warmup_end = seconds_since(t0);
    }
  };

  RunLimits limits;
  limits.wall_budget_s = warmup_s + window_s;
  auto stats = p.run(limits);
  if (!stats.error.empty()) throw std::runtime_error("bench run failed: " + stats.error);

  BenchReport r;
  r.mode = pure_sim ? "pure_sim" : "full_pipeline";
  r.env = cfg.env_name;
  r.n_workers = cfg.n_workers;
  r.k = cfg.k;
  const std::int64_t f0 = std::max<std::int64_t>(frames_at_warmup.load(), 0);
  r.duration_s = seconds_since(t0) - warmup_end.load();
  r.frames = p.wiring().frames().load() - f0;
  r.fps = r.duration_s > 0 ? static_cast<double>(r.frames) / r.duration_s : 0.0;
  return r;
}

inline std::vector<BenchReport> cmd_bench(const RunnerOptions& opt, std::ostream& out) {
  const auto& cfg = opt.pipeline;
  if (cfg.sim_inference_ms > 0.0 && cfg.env_opt.t_env_ms > 0.0 && !cfg.single_buffered &&
      !check_double_buffer_condition(cfg.sim_inference_ms, cfg.env_opt.t_env_ms, cfg.k)) {
    out << "warning: k/2 <= ceil(t_inf/t_env); double buffering cannot fully mask inference "
           "latency (consider a larger k)\n";
  }

  std::vector<BenchReport> reports;
  double roofline_fps = 0.0;
  const bool run_pure = opt.bench.mode == "pure_sim" || opt.bench.mode == "both";
  const bool run_full = opt.bench.mode == "full_pipeline" || opt.bench.mode == "both";
  if (run_pure) {
    auto r = bench_once(opt.pipeline, true, opt.bench.warmup_s, opt.bench.window_s);
    r.pct_of_roofline = 100.0;
    roofline_fps = r.fps;
    reports.push_back(r);
  }
  if (run_full) {
    auto r = bench_once(opt.pipeline, false, opt.bench.warmup_s, opt.bench.window_s);
    if (roofline_fps > 0.0) r.pct_of_roofline = 100.0 * r.fps / roofline_fps;
    reports.push_back(r);
  }
  for (const auto& r : reports) {
    out << r.mode << ": env=" << r.env << " workers=" << r.n_workers << " k=" << r.k
        << " frames=" << r.frames << " over " << r.duration_s << " s -> " << r.fps << " fps";
    if (r.pct_of_roofline > 0.0 && r.mode == "full_pipeline")
      out << " (" << r.pct_of_roofline << "% of pure simulation)";
    out << "\n";
    append_bench_csv(opt.bench.csv, r);
  }
  return reports;
}

// --- train ------------------------------------------------------------------

// Consumes episode results, maintains per-policy meta objectives, and fires
// PBT steps on period boundaries.
class PbtController {
 public:
  PbtController(Pipeline& p, const RunnerOptions& opt)
      : pipeline_(p), opt_(opt), rng_(derive_seed(opt.pipeline.seed, 0x9B7)) {
    const std::uint32_t P = opt.pipeline.population;
    for (std::uint32_t i = 0; i < P; ++i) {
      AgentMeta meta;
      meta.policy_id = i;
      meta.learning_rate = opt.pipeline.adam.lr;
      meta.entropy_coef = opt.pipeline.loss.entropy_coef;
      meta.adam_beta1 = opt.pipeline.adam.beta1;
      meta.reward_weights = {opt.pipeline.env_opt.grid.w_tag, opt.pipeline.env_opt.grid.w_pickup,
                             opt.pipeline.env_opt.grid.w_death};
      agents_.push_back(meta);
      windows_.emplace_back(100);
    }
    cfg_ = opt.pbt;
    cfg_.P = P;
    next_boundary_ = cfg_.pbt_period;
  }

  void tick() {
    for (const auto& r : pipeline_.wiring().drain_episodes()) {
      if (r.policy_id >= windows_.size()) continue;
      if (r.outcome >= 0)
        windows_[r.policy_id].add_match(r.outcome == 2 ? MatchOutcome::Win
                                        : r.outcome == 1 ? MatchOutcome::Tie
                                                         : MatchOutcome::Loss);
      else
        windows_[r.policy_id].add_return(r.episode_return);
    }
    if (agents_.size() < 2 || cfg_.pbt_period <= 0) return;
    const std::int64_t frames = pipeline_.wiring().frames().load(std::memory_order_relaxed);
    if (frames < next_boundary_) return;
    next_boundary_ += cfg_.pbt_period;
    step(frames);
  }

  const std::vector<AgentMeta>& agents() const { return agents_; }

 private:
  void step(std::int64_t frames) {
    std::vector<std::optional<double>> scores;
    scores.reserve(agents_.size());
    for (auto& w : windows_) scores.push_back(w.score());

    auto copy_weights = [&](std::uint32_t dst, std::uint32_t src) {
      // pause only the two affected learners for the duration of the copy
      std::scoped_lock lock(pipeline_.wiring().pbt_lock(std::min(dst, src)),
                            pipeline_.wiring().pbt_lock(std::max(dst, src)));
      PolicyParams& d = pipeline_.learner(dst).params();
      const PolicyParams& s = pipeline_.learner(src).params();
      d.theta = s.theta;
      d.adam = s.adam;
      pipeline_.wiring().params(dst).publish(d);
    };
    auto events = pbt_step(agents_, scores, cfg_, rng_, frames, copy_weights);

    for (const auto& a : agents_) {
      HyperBlock& h = pipeline_.wiring().hypers(a.policy_id);
      h.learning_rate = a.learning_rate;
      h.entropy_coef = a.entropy_coef;
      h.adam_beta1 = a.adam_beta1;
      if (a.reward_weights.size() == 3) {
        h.w_tag = a.reward_weights[0];
        h.w_pickup = a.reward_weights[1];
        h.w_death = a.reward_weights[2];
      }
    }
    if (!opt_.pbt_csv.empty()) {
      append_pbt_events_csv(opt_.pbt_csv, events, !header_written_);
      header_written_ = true;
    }
  }

  Pipeline& pipeline_;
  const RunnerOptions& opt_;
  PopulationConfig cfg_;
  std::mt19937_64 rng_;
  std::vector<AgentMeta> agents_;
  std::vector<ScoreWindow> windows_;
  std::int64_t next_boundary_ = 0;
  bool header_written_ = false;
};

struct TrainResult {
  int exit_code = kExitOk;
  RunStats stats;
  std::vector<std::string> checkpoints;
};

inline TrainResult cmd_train(const RunnerOptions& opt, std::ostream& out) {
  TrainResult result;
  detail::MetricsCsv csv(opt.metrics_csv);
  if (opt.frames <= 0) {
    out << "frame budget is zero; nothing to do\n";
    return result;  // header already written: valid empty CSV
  }

  Pipeline pipeline(opt.pipeline);
  if (!opt.load_checkpoint.empty()) {
    auto loaded = load_checkpoint(opt.load_checkpoint, pipeline.wiring().model_shape());
    for (std::uint32_t p = 0; p < opt.pipeline.population; ++p) {
      PolicyParams& dst = pipeline.learner(p).params();
      dst.theta = loaded.theta;
      dst.adam = loaded.adam;
      dst.version = loaded.version;
      pipeline.wiring().params(p).publish(dst);
    }
  }

  if (!opt.dump_trajectories.empty()) {
    std::filesystem::create_directories(opt.dump_trajectories);
    for (std::uint32_t p = 0; p < opt.pipeline.population; ++p) {
      pipeline.learner(p).on_minibatch = [&opt, p,
                                          n = std::make_shared<std::int64_t>(0)](
                                             const Minibatch& mb) mutable {
        for (const auto& v : mb.views) {
          std::ostringstream name;
          name << opt.dump_trajectories << "/traj_p" << p << '_' << (*n)++ << ".bin";
          dump_trajectory(v, name.str());
        }
      };
    }
  }

  std::atomic<std::int64_t> next_save{opt.save_every > 0 ? opt.save_every
                                                         : std::numeric_limits<std::int64_t>::max()};
  auto checkpoint_path = [&](std::uint32_t p, const char* tag) {
    return opt.checkpoint_dir + "/ckpt_p" + std::to_string(p) + "_" + tag + ".bin";
  };
  if (!opt.checkpoint_dir.empty()) std::filesystem::create_directories(opt.checkpoint_dir);

  for (std::uint32_t p = 0; p < opt.pipeline.population; ++p) {
    pipeline.learner(p).on_step = [&, p](const LearnerStepRow& row) {
      csv.row(row);
      if (!opt.checkpoint_dir.empty() && row.frames >= next_save.load()) {
        next_save.fetch_add(opt.save_every);
        std::lock_guard<std::mutex> lock(pipeline.wiring().pbt_lock(p));
        save_checkpoint(checkpoint_path(p, "latest"), pipeline.learner(p).params());
      }
    };
  }

  PbtController pbt(pipeline, opt);
  pipeline.on_control_tick = [&] { pbt.tick(); };

  RunLimits limits;
  limits.frame_budget = opt.frames;
  auto stats = pipeline.run(limits);
  csv.flush();
  result.stats = stats;

  if (!stats.error.empty()) {
    out << "training halted: " << stats.error << "\n";
    if (!opt.checkpoint_dir.empty()) {
      for (std::uint32_t p = 0; p < opt.pipeline.population; ++p) {
        const auto path = checkpoint_path(p, "diagnostic");
        save_checkpoint(path, pipeline.learner(p).params());
        out << "diagnostic checkpoint: " << path << "\n";
      }
      std::ofstream err(opt.checkpoint_dir + "/halt_reason.txt");
      err << stats.error << "\n";
    }
    result.exit_code = stats.numeric_halt ? kExitNumeric : kExitResource;
    return result;
  }

  if (!opt.checkpoint_dir.empty()) {
    for (std::uint32_t p = 0; p < opt.pipeline.population; ++p) {
      const auto path = checkpoint_path(p, "final");
      save_checkpoint(path, pipeline.learner(p).params());
      result.checkpoints.push_back(path);
    }
  }
  out << "trained " << stats.frames << " frames in " << stats.seconds << " s (" << stats.fps
      << " fps), " << stats.learner_steps << " SGD steps, mean lag " << stats.lag_mean << "\n";
  return result;
}

// --- eval -------------------------------------------------------------------

struct EvalReport {
  int wins = 0, losses = 0, ties = 0;
  double mean_score_a = 0.0, mean_score_b = 0.0;
  int matches = 0;
};

struct EvalPolicy {
  PolicyFn fn;
  std::uint64_t identity = 0;  // keys the exploration stream
};

inline EvalPolicy checkpoint_policy(const std::string& path, const ModelShape& shape) {
  auto params = std::make_shared<PolicyParams>(load_checkpoint(path, shape));
  EvalPolicy p;
  p.identity = fnv1a64(params->theta.data(), params->theta.size() * sizeof(double));
  p.fn = params_policy(params);
  return p;
}

// Runs a seeded match series between two policies in the duel arena. Each
// policy's sampling stream derives from its own identity, so two copies of
// the same checkpoint stay move-for-move symmetric and tie every match.
inline EvalReport run_matches(Env& duel_env, const EvalPolicy& a, const EvalPolicy& b,
                              int matches, std::uint64_t seed) {
  EvalReport rep;
  rep.matches = matches;
  for (int m = 0; m < matches; ++m) {
    const std::uint64_t match_seed = derive_seed(seed, 0xE0A + m);
    auto res = versus_episode(duel_env, a.fn, b.fn, match_seed,
                              derive_seed(match_seed, a.identity),
                              derive_seed(match_seed, b.identity));
    switch (res.outcome) {
      case VersusOutcome::WinA: rep.wins++; break;
      case VersusOutcome::WinB: rep.losses++; break;
      case VersusOutcome::Tie: rep.ties++; break;
    }
    rep.mean_score_a += res.score_a;
    rep.mean_score_b += res.score_b;
  }
  if (matches > 0) {
    rep.mean_score_a /= matches;
    rep.mean_score_b /= matches;
  }
  return rep;
}

inline EvalReport cmd_eval(const RunnerOptions& opt, std::ostream& out) {
  EnvOptions env_opt = opt.pipeline.env_opt;
  auto env = make_env("gridbattle-duel", env_opt, opt.pipeline.frameskip);
  ModelShape shape;
  shape.obs_dim = env->obs_dim();
  shape.hidden_dim = opt.pipeline.hidden_dim;
  shape.trunk_hidden = opt.pipeline.trunk_hidden;
  shape.heads = env->heads();

  EvalPolicy a = checkpoint_policy(opt.eval.ckpt_a, shape);
  EvalPolicy b;
  std::string b_name;
  if (!opt.eval.ckpt_b.empty()) {
    b = checkpoint_policy(opt.eval.ckpt_b, shape);
    b_name = opt.eval.ckpt_b;
  } else if (opt.eval.vs_scripted > 0) {
    auto* wrapper = dynamic_cast<FrameskipWrapper*>(env.get());
    auto* grid = dynamic_cast<GridBattleEnv*>(&wrapper->inner());
    APPO_CHECK(grid != nullptr, "scripted opponents exist only in gridbattle");
    const int d = opt.eval.vs_scripted;
    b.fn = [grid, d](std::span<const double>, std::mt19937_64& rng) {
      return grid->scripted_bot_policy(1, d, rng);
    };
    b.identity = 0xB07 + static_cast<std::uint64_t>(d);
    b_name = "scripted-" + std::to_string(d);
  } else if (opt.eval.vs_random) {
    b.fn = uniform_random_policy(env->heads());
    b.identity = 0x7A2D;
    b_name = "uniform-random";
  } else {
    throw ConfigError("eval needs --ckpt-b, --vs-scripted, or --vs-random");
  }

  auto rep = run_matches(*env, a, b, opt.eval.matches, opt.eval.seed);
  out << "matches: " << rep.matches << "\n";
  out << opt.eval.ckpt_a << " vs " << b_name << "\n";
  out << "wins,losses,ties," << "mean_score_a,mean_score_b\n";
  out << rep.wins << ',' << rep.losses << ',' << rep.ties << ',' << rep.mean_score_a << ','
      << rep.mean_score_b << "\n";
  return rep;
}

}  // namespace appo
