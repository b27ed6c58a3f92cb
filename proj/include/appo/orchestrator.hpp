#pragma once

// The asynchronous pipeline: rollout workers step double-buffered groups of
// environments, stateless policy workers answer batched action requests, and
// one learner per policy turns sealed trajectories into parameter updates.
// All coupling flows through the transport module, so the same units run as
// threads in one process or in forked processes over shared mappings.

#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "appo/common.hpp"
#include "appo/envs.hpp"
#include "appo/metrics.hpp"
#include "appo/offpolicy.hpp"
#include "appo/policy.hpp"
#include "appo/population.hpp"
#include "appo/trajstore.hpp"
#include "appo/transport.hpp"

namespace appo {

// For maximal double-buffered throughput the simulation of one env group
// must outlast the inference for the other: k/2 > ceil(t_inf / t_env).
inline bool check_double_buffer_condition(double t_inf_ms, double t_env_ms, int k) {
  APPO_CHECK(t_env_ms > 0.0 && t_inf_ms >= 0.0, "durations must be positive");
  return k / 2 > static_cast<int>(std::ceil(t_inf_ms / t_env_ms));
}

// Average policy lag induced by batching alone: one sampling iteration of n
// workers with k envs yields n*k*T samples, consumed in N_batch-sized
// minibatches, so the earliest samples trail by N_iter/N_batch - 1 updates.
inline double expected_lag(int n_workers, int k, int T, int n_batch) {
  APPO_CHECK(n_workers > 0 && k > 0 && T > 0 && n_batch > 0, "positive arguments required");
  return static_cast<double>(n_workers) * k * T / n_batch - 1.0;
}

enum class AdvantageSource { VTrace, NStep };

// Raised inside component loops when the stop flag interrupts a blocking
// wait; drivers swallow it during shutdown.
struct StoppedException {};

struct PipelineConfig {
  std::string env_name = "gridbattle";
  EnvOptions env_opt;

  int n_workers = 2;
  int k = 8;  // envs per worker, even for double buffering
  int T = 32;
  int n_batch = 2048;
  int policy_workers = 2;  // instances per policy
  int max_infer_batch = 256;
  std::uint32_t population = 1;
  std::uint64_t seed = 1;

  int frameskip = 0;    // 0 = env default
  double gamma = 0.0;   // 0 = env default
  int trunk_hidden = 64;
  int hidden_dim = 0;

  AdamConfig adam;
  LossConfig loss;
  double rho_bar = 1.0;
  double c_bar = 1.0;
  AdvantageSource advantage_source = AdvantageSource::VTrace;
  bool normalize_advantage = false;

  std::uint32_t pool_slots = 0;     // 0 = sizing formula
  double sim_inference_ms = 0.0;    // simulated per-sample accelerator latency
  double sim_learner_ms = 0.0;      // simulated extra backprop cost per step
  bool single_buffered = false;     // benchmark baseline: one group of k envs
  bool deterministic = false;       // cooperative serial schedule
  bool random_action_rollouts = false;  // pure-simulation roofline mode
  std::string os_hints;             // reserved; accepted but not acted upon

  void validate() const {
    if (k < 1 || (!single_buffered && (k % 2 != 0 || k < 2)))
      throw ConfigError("k must be even and >= 2 for double buffering");
    if (n_batch % T != 0) throw ConfigError("batch size must be a multiple of T");
    if (population < 1) throw ConfigError("population must be >= 1");
    if (n_workers < 1 || policy_workers < 1) throw ConfigError("need at least one of each worker");
  }
};

// Byte layout of one request/reply row inside an exchange slot. The rollout
// worker writes the input fields, the policy worker the output fields; the
// row index travels in the 64-byte message.
struct ExchangeLayout {
  int obs_dim = 0, hidden_dim = 0, n_heads = 0;
  std::size_t obs_off = 0, hidden_off = 0, action_off = 0, logp_off = 0, version_off = 0,
              next_hidden_off = 0, stride = 0;

  ExchangeLayout() = default;
  ExchangeLayout(int obs, int hidden, int heads) : obs_dim(obs), hidden_dim(hidden), n_heads(heads) {
    std::size_t o = 0;
    obs_off = o;
    o += sizeof(double) * static_cast<std::size_t>(obs_dim);
    hidden_off = o;
    o += sizeof(double) * static_cast<std::size_t>(hidden_dim);
    action_off = o;
    o += traj_layout::align8(sizeof(std::int32_t) * static_cast<std::size_t>(n_heads));
    logp_off = o;
    o += sizeof(double);
    version_off = o;
    o += sizeof(std::int64_t);
    next_hidden_off = o;
    o += sizeof(double) * static_cast<std::size_t>(hidden_dim);
    stride = traj_layout::align8(o);
  }

  double* obs(std::byte* row) const { return reinterpret_cast<double*>(row + obs_off); }
  double* hidden(std::byte* row) const { return reinterpret_cast<double*>(row + hidden_off); }
  std::int32_t* action(std::byte* row) const {
    return reinterpret_cast<std::int32_t*>(row + action_off);
  }
  double* logp(std::byte* row) const { return reinterpret_cast<double*>(row + logp_off); }
  std::int64_t* version(std::byte* row) const {
    return reinterpret_cast<std::int64_t*>(row + version_off);
  }
  double* next_hidden(std::byte* row) const {
    return reinterpret_cast<double*>(row + next_hidden_off);
  }
};

// Per-policy hyperparameters that PBT mutates while learners run. Learners
// snapshot them at the start of each step.
struct HyperBlock {
  std::atomic<double> learning_rate{1e-4};
  std::atomic<double> entropy_coef{0.003};
  std::atomic<double> adam_beta1{0.9};
  std::atomic<double> w_tag{1.0};
  std::atomic<double> w_pickup{0.2};
  std::atomic<double> w_death{-0.5};
};

struct EpisodeResult {
  std::uint32_t policy_id = 0;
  double episode_return = 0.0;
  int outcome = -1;  // 2 win / 1 tie / 0 loss, -1 for non-versus
};

// Everything the components share. Queues, slot regions, and parameter
// stores live on SharedMem and are equally usable across fork.
class Wiring {
 public:
  Wiring(const PipelineConfig& cfg, bool shared_mem = false) : cfg_(cfg) {
    cfg_.validate();

    auto probe = make_env_raw(cfg.env_name, cfg.env_opt);
    obs_dim_ = probe->obs_dim();
    n_agents_ = probe->n_agents();
    heads_ = probe->heads();
    frameskip_ = cfg.frameskip > 0 ? cfg.frameskip : env_spec(cfg.env_name).default_frameskip;
    gamma_ = cfg.gamma > 0.0 ? cfg.gamma : env_spec(cfg.env_name).default_gamma;

    shape_.T = static_cast<std::uint32_t>(cfg.T);
    shape_.obs_dim = static_cast<std::uint32_t>(obs_dim_);
    shape_.hidden_dim = static_cast<std::uint32_t>(cfg.hidden_dim);
    shape_.n_heads = static_cast<std::uint32_t>(heads_.n_heads());

    model_shape_.obs_dim = obs_dim_;
    model_shape_.hidden_dim = cfg.hidden_dim;
    model_shape_.trunk_hidden = cfg.trunk_hidden;
    model_shape_.heads = heads_;

    const std::uint32_t streams = static_cast<std::uint32_t>(cfg.n_workers) * cfg.k * n_agents_;
    const std::uint32_t learner_depth =
        cfg.population * (static_cast<std::uint32_t>(cfg.n_batch / cfg.T) + 4);
    const std::uint32_t slots =
        cfg.pool_slots > 0
            ? cfg.pool_slots
            : pool_slots_required(cfg.n_workers, cfg.k * n_agents_, learner_depth);
    if (cfg.deterministic) {
      const std::uint32_t need =
          2 * streams + cfg.population * static_cast<std::uint32_t>(cfg.n_batch / cfg.T) + 1;
      if (slots < need)
        throw ConfigError("deterministic mode needs a pool of at least " +
                          std::to_string(need) + " slots");
    }
    store_ = TrajectoryStore(shape_, slots, shared_mem);

    exchange_layout_ = ExchangeLayout(obs_dim_, cfg.hidden_dim, heads_.n_heads());
    const std::uint64_t exch_bytes =
        exchange_layout_.stride * static_cast<std::uint64_t>(cfg.k) * n_agents_;
    exchange_ = shared_mem ? SlotRegion::shared(cfg.n_workers * 2, exch_bytes)
                           : SlotRegion::on_heap(cfg.n_workers * 2, exch_bytes);

    const std::uint32_t q_cap = streams + 64;
    for (std::uint32_t p = 0; p < cfg.population; ++p) {
      obs_q_.push_back(std::make_unique<FifoQueue>(q_cap, shared_mem));
      ready_q_.push_back(std::make_unique<FifoQueue>(slots + 16, shared_mem));
      params_.push_back(std::make_unique<ParamStoreOwner>(
          static_cast<std::size_t>(model_shape_.n_params()), shared_mem));
      hypers_.push_back(std::make_unique<HyperBlock>());
      hypers_.back()->learning_rate = cfg.adam.lr;
      hypers_.back()->entropy_coef = cfg.loss.entropy_coef;
      hypers_.back()->adam_beta1 = cfg.adam.beta1;
      hypers_.back()->w_tag = cfg.env_opt.grid.w_tag;
      hypers_.back()->w_pickup = cfg.env_opt.grid.w_pickup;
      hypers_.back()->w_death = cfg.env_opt.grid.w_death;
    }
    for (int w = 0; w < cfg.n_workers; ++w)
      reply_q_.push_back(std::make_unique<FifoQueue>(q_cap, shared_mem));
    episodes_q_ = std::make_unique<FifoQueue>(1 << 14, shared_mem);

    metrics_ = std::make_unique<MetricsHub>(
        static_cast<std::uint32_t>(cfg.n_workers + cfg.population * cfg.policy_workers +
                                   cfg.population));
  }

  const PipelineConfig& cfg() const { return cfg_; }
  int obs_dim() const { return obs_dim_; }
  std::uint32_t n_agents() const { return n_agents_; }
  const ActionHeadsSpec& heads() const { return heads_; }
  int frameskip() const { return frameskip_; }
  double gamma() const { return gamma_; }
  const TrajectoryShape& traj_shape() const { return shape_; }
  const ModelShape& model_shape() const { return model_shape_; }
  const ExchangeLayout& exchange_layout() const { return exchange_layout_; }

  TrajectoryStore& store() { return store_; }
  SlotRegion& exchange() { return exchange_; }
  BoundedFifo& obs_q(std::uint32_t policy) { return obs_q_[policy]->fifo(); }
  BoundedFifo& ready_q(std::uint32_t policy) { return ready_q_[policy]->fifo(); }
  BoundedFifo& reply_q(std::uint32_t worker) { return reply_q_[worker]->fifo(); }
  BoundedFifo& episodes_q() { return *episodes_q_->operator->(); }
  ParamStore& params(std::uint32_t policy) { return params_[policy]->store(); }
  HyperBlock& hypers(std::uint32_t policy) { return *hypers_[policy]; }
  MetricsHub& metrics() { return *metrics_; }

  std::byte* exchange_row(std::uint32_t slot, std::uint32_t row) {
    return exchange_.slot(slot) + static_cast<std::size_t>(row) * exchange_layout_.stride;
  }

  std::atomic<std::int64_t>& frames() { return frames_; }
  std::atomic<std::int64_t>& samples() { return samples_; }
  std::atomic<bool>& stop() { return stop_; }
  std::mutex& pbt_lock(std::uint32_t policy) { return pbt_locks_[policy % kMaxPolicies]; }

  void push_episode(const EpisodeResult& r) {
    SlotIndexMessage m;
    m.kind = static_cast<std::uint32_t>(MsgKind::EpisodeResult);
    m.policy_id = r.policy_id;
    m.row = static_cast<std::uint32_t>(r.outcome + 1);
    m.step_lo = std::bit_cast<std::int64_t>(r.episode_return);
    episodes_q().push(m, Duration::zero());  // control plane may drop under pressure
  }

  std::vector<EpisodeResult> drain_episodes() {
    std::vector<EpisodeResult> out;
    SlotIndexMessage buf[64];
    while (std::size_t n = episodes_q().pop_many(buf, 64, Duration::zero())) {
      for (std::size_t i = 0; i < n; ++i) {
        EpisodeResult r;
        r.policy_id = buf[i].policy_id;
        r.outcome = static_cast<int>(buf[i].row) - 1;
        r.episode_return = std::bit_cast<double>(buf[i].step_lo);
        out.push_back(r);
      }
      if (n < 64) break;
    }
    return out;
  }

 private:
  static constexpr std::size_t kMaxPolicies = 64;

  PipelineConfig cfg_;
  int obs_dim_ = 0;
  std::uint32_t n_agents_ = 1;
  ActionHeadsSpec heads_;
  int frameskip_ = 1;
  double gamma_ = 0.99;
  TrajectoryShape shape_;
  ModelShape model_shape_;
  ExchangeLayout exchange_layout_;

  TrajectoryStore store_;
  SlotRegion exchange_;
  std::vector<std::unique_ptr<FifoQueue>> obs_q_, ready_q_, reply_q_;
  std::unique_ptr<FifoQueue> episodes_q_;
  std::vector<std::unique_ptr<ParamStoreOwner>> params_;
  std::vector<std::unique_ptr<HyperBlock>> hypers_;
  std::unique_ptr<MetricsHub> metrics_;

  std::atomic<std::int64_t> frames_{0};
  std::atomic<std::int64_t> samples_{0};
  std::atomic<bool> stop_{false};
  std::mutex pbt_locks_[kMaxPolicies];
};

// --- rollout worker -----------------------------------------------------------

// Hosts k env instances split into two alternating groups. While one group's
// actions are being computed by policy workers, the other group is stepped,
// hiding inference latency behind simulation (double-buffered sampling).
class RolloutWorker {
 public:
  RolloutWorker(Wiring& w, std::uint32_t worker_id)
      : w_(w),
        id_(worker_id),
        layout_(w.exchange_layout()),
        assign_rng_(derive_seed(w.cfg().seed, 0x7700 + worker_id)),
        action_rng_(derive_seed(w.cfg().seed, 0x8800 + worker_id)) {
    const auto& cfg = w_.cfg();
    n_groups_ = cfg.single_buffered ? 1 : 2;
    group_size_ = cfg.single_buffered ? cfg.k : cfg.k / 2;
    const std::uint32_t n_agents = w_.n_agents();

    for (int e = 0; e < cfg.k; ++e) {
      EnvState es;
      es.env = make_env(cfg.env_name, cfg.env_opt, w_.frameskip());
      es.global_id = worker_id * cfg.k + static_cast<std::uint32_t>(e);
      es.streams.resize(n_agents);
      envs_.push_back(std::move(es));
    }
    outstanding_.assign(2, 0);
  }

  // Resets envs, assigns policies, and submits the initial requests.
  void start() {
    for (auto& es : envs_) reset_env(es);
    for (int g = 0; g < n_groups_; ++g) submit_group(g);
    await_group_ = 0;
    started_ = true;
  }

  // One scheduling quantum: try to finish the awaited group. Returns true if
  // progress was made (a group was stepped and resubmitted).
  bool run_once(Duration poll) {
    if (!started_) start();
    const auto wait_begin = Clock::now();
    drain_replies(poll);
    wait_ns_ += std::chrono::duration_cast<Duration>(Clock::now() - wait_begin).count();
    if (outstanding_[await_group_] > 0) return false;

    const auto busy_begin = Clock::now();
    step_group(await_group_);
    if (!w_.stop().load(std::memory_order_relaxed)) submit_group(await_group_);
    await_group_ = (await_group_ + 1) % n_groups_;
    busy_ns_ += std::chrono::duration_cast<Duration>(Clock::now() - busy_begin).count();
    return true;
  }

  // Releases unsealed slots; no TrajectoryReady is emitted for them.
  void shutdown() {
    for (auto& es : envs_)
      for (auto& st : es.streams)
        if (st.slot_active) {
          w_.store().pool().seal(st.slot);  // Writing -> Sealed -> Free
          w_.store().pool().release(st.slot);
          st.slot_active = false;
        }
  }

  double idle_fraction() const {
    const double total = static_cast<double>(wait_ns_ + busy_ns_);
    return total > 0.0 ? static_cast<double>(wait_ns_) / total : 0.0;
  }
  std::int64_t steps_done() const { return steps_done_; }
  std::int64_t pool_exhausted_events() const { return pool_exhausted_events_; }

 private:
  struct StreamState {
    std::uint32_t policy = 0;
    std::optional<std::uint32_t> pending_policy;  // applies at next slot boundary
    std::uint32_t slot = 0;
    bool slot_active = false;
    std::uint32_t t = 0;
    std::vector<double> hidden;
    std::vector<double> submitted_obs;
    double episode_return = 0.0;
  };
  struct EnvState {
    std::unique_ptr<Env> env;
    std::uint32_t global_id = 0;
    std::vector<double> obs;  // [n_agents * obs_dim]
    std::vector<StreamState> streams;
    std::uint64_t episode = 0;
  };

  void reset_env(EnvState& es) {
    auto assignment =
        assign_policies(w_.n_agents(), w_.cfg().population, assign_rng_);
    for (std::uint32_t a = 0; a < w_.n_agents(); ++a) {
      StreamState& st = es.streams[a];
      if (st.slot_active && st.t > 0) {
        st.pending_policy = assignment[a];  // switch at the next slot boundary
      } else {
        st.policy = assignment[a];
        st.pending_policy.reset();
      }
      st.hidden.assign(static_cast<std::size_t>(w_.cfg().hidden_dim), 0.0);
      st.episode_return = 0.0;
      apply_shaping(es, static_cast<int>(a), st.policy);
    }
    es.obs = es.env->reset(derive_seed(w_.cfg().seed, (std::uint64_t{es.global_id} << 24) ^
                                                          es.episode));
    es.episode++;
  }

  void apply_shaping(EnvState& es, int agent, std::uint32_t policy) {
    HyperBlock& h = w_.hypers(policy);
    const double w[3] = {h.w_tag.load(), h.w_pickup.load(), h.w_death.load()};
    es.env->set_reward_weights(agent, w);
  }

  void ensure_slot(EnvState& es, StreamState& st, std::uint32_t agent) {
    if (st.slot_active) return;
    std::optional<std::uint32_t> slot;
    while (!(slot = w_.store().pool().acquire_wait(kDefaultPopTimeout))) {
      pool_exhausted_events_++;
      if (w_.stop().load(std::memory_order_relaxed)) throw StoppedException{};
    }
    st.slot = *slot;
    st.slot_active = true;
    st.t = 0;
    auto v = w_.store().view(st.slot);
    v.begin(es.global_id, id_, st.policy, agent);
  }

  std::uint32_t row_index(int env_local, std::uint32_t agent) const {
    return static_cast<std::uint32_t>(env_local) * w_.n_agents() + agent;
  }

  void submit_group(int g) {
    const std::uint32_t exch_slot = id_ * 2 + static_cast<std::uint32_t>(g);
    for (int el = 0; el < group_size_; ++el) {
      EnvState& es = envs_[static_cast<std::size_t>(g * group_size_ + el)];
      for (std::uint32_t a = 0; a < w_.n_agents(); ++a) {
        StreamState& st = es.streams[a];
        const std::uint32_t row = row_index(el, a);
        std::byte* r = w_.exchange_row(exch_slot, row);

        if (w_.cfg().random_action_rollouts) {
          // roofline mode: a zero-cost random action source replaces the
          // policy workers; nothing is recorded, the sampler runs bare
          const auto& heads = w_.heads();
          for (int j = 0; j < heads.n_heads(); ++j)
            layout_.action(r)[j] = static_cast<std::int32_t>(
                action_rng_() % static_cast<unsigned>(heads.sizes[j]));
          continue;
        }

        const double* obs = es.obs.data() + static_cast<std::size_t>(a) * w_.obs_dim();
        std::copy(obs, obs + w_.obs_dim(), layout_.obs(r));
        std::copy(st.hidden.begin(), st.hidden.end(), layout_.hidden(r));
        st.submitted_obs.assign(obs, obs + w_.obs_dim());

        SlotIndexMessage m;
        m.kind = static_cast<std::uint32_t>(MsgKind::ObsRequest);
        m.policy_id = st.policy;
        m.slot_id = exch_slot;
        m.worker_id = id_;
        m.group_id = static_cast<std::uint32_t>(g);
        m.row = row;
        while (w_.obs_q(st.policy).push(m, kDefaultPushTimeout) != PushResult::Ok) {
          if (w_.stop().load(std::memory_order_relaxed)) return;
        }
        outstanding_[g]++;
      }
    }
  }

  void drain_replies(Duration poll) {
    if (w_.cfg().random_action_rollouts) return;  // nothing outstanding
    SlotIndexMessage buf[256];
    // wait only if the awaited group is incomplete
    const Duration t = outstanding_[await_group_] > 0 ? poll : Duration::zero();
    const std::size_t n = w_.reply_q(id_).pop_many(buf, 256, t);
    for (std::size_t i = 0; i < n; ++i) {
      if (buf[i].msg_kind() == MsgKind::Stop) continue;
      outstanding_[buf[i].group_id]--;
    }
  }

  void step_group(int g) {
    const std::uint32_t exch_slot = id_ * 2 + static_cast<std::uint32_t>(g);
    std::vector<FactoredAction> actions(w_.n_agents());
    for (int el = 0; el < group_size_; ++el) {
      EnvState& es = envs_[static_cast<std::size_t>(g * group_size_ + el)];

      for (std::uint32_t a = 0; a < w_.n_agents(); ++a) {
        std::byte* r = w_.exchange_row(exch_slot, row_index(el, a));
        actions[a].assign(layout_.action(r), layout_.action(r) + w_.heads().n_heads());
      }

      EnvStepOut out = es.env->step(actions);
      w_.frames().fetch_add(out.raw_frames, std::memory_order_relaxed);
      w_.samples().fetch_add(w_.n_agents(), std::memory_order_relaxed);
      steps_done_++;

      if (w_.cfg().random_action_rollouts) {
        if (out.done) {
          reset_env(es);
        } else {
          es.obs = std::move(out.obs);
        }
        continue;
      }

      for (std::uint32_t a = 0; a < w_.n_agents(); ++a) {
        StreamState& st = es.streams[a];
        std::byte* r = w_.exchange_row(exch_slot, row_index(el, a));
        ensure_slot(es, st, a);

        StepRecord rec;
        rec.obs = st.submitted_obs;
        rec.hidden = st.hidden;
        rec.action = actions[a];
        rec.reward = out.rewards[a];
        rec.done = out.done;
        rec.behavior_logp = *layout_.logp(r);
        rec.policy_version = *layout_.version(r);
        auto view = w_.store().view(st.slot);
        view.write_step(st.t, rec);
        st.t++;
        st.episode_return += out.rewards[a];
        st.hidden.assign(layout_.next_hidden(r), layout_.next_hidden(r) + w_.cfg().hidden_dim);

        if (st.t == w_.traj_shape().T) {
          const double* next_obs = out.obs.data() + static_cast<std::size_t>(a) * w_.obs_dim();
          // on episode end the next observation comes from reset below; the
          // done mask keeps it out of the targets either way
          view.set_bootstrap({next_obs, static_cast<std::size_t>(w_.obs_dim())}, st.hidden);
          seal_trajectory(w_.store(), st.slot, w_.ready_q(st.policy), seal_seq_++);
          st.slot_active = false;
          if (st.pending_policy) {
            st.policy = *st.pending_policy;
            st.pending_policy.reset();
            apply_shaping(es, static_cast<int>(a), st.policy);
          }
        }
      }

      if (out.done) {
        report_episode(es);
        reset_env(es);
      } else {
        es.obs = std::move(out.obs);
      }
    }
  }

  void report_episode(EnvState& es) {
    auto scores = es.env->final_scores();
    for (std::uint32_t a = 0; a < w_.n_agents(); ++a) {
      EpisodeResult r;
      r.policy_id = es.streams[a].policy;
      r.episode_return = es.streams[a].episode_return;
      if (scores.size() == 2) {
        const double mine = scores[a], theirs = scores[1 - a];
        r.outcome = mine > theirs ? 2 : (mine == theirs ? 1 : 0);
      }
      w_.push_episode(r);
    }
  }

  Wiring& w_;
  std::uint32_t id_;
  ExchangeLayout layout_;
  std::mt19937_64 assign_rng_;
  std::mt19937_64 action_rng_;
  std::vector<EnvState> envs_;
  std::vector<int> outstanding_;
  int n_groups_ = 2;
  int group_size_ = 0;
  int await_group_ = 0;
  bool started_ = false;
  std::uint32_t seal_seq_ = 0;
  std::int64_t wait_ns_ = 0, busy_ns_ = 0;
  std::int64_t steps_done_ = 0;
  std::int64_t pool_exhausted_events_ = 0;
};

// --- policy worker -------------------------------------------------------------

// Stateless inference: drains its policy's request queue, refreshes to the
// newest published parameters before every batch, runs one batched forward
// pass, samples actions, and writes the results straight into the
// requesters' exchange rows.
class PolicyWorkerUnit {
 public:
  PolicyWorkerUnit(Wiring& w, std::uint32_t policy_id, std::uint32_t instance)
      : w_(w),
        policy_(policy_id),
        layout_(w.exchange_layout()),
        rng_(derive_seed(w.cfg().seed, 0x9900 + policy_id * 64 + instance)) {
    local_.shape = w.model_shape();
    local_.version = -1;
  }

  bool run_once(Duration poll) {
    SlotIndexMessage msgs[512];
    const std::size_t cap =
        std::min<std::size_t>(512, static_cast<std::size_t>(w_.cfg().max_infer_batch));
    const auto wait_begin = Clock::now();
    const std::size_t n = w_.obs_q(policy_).pop_many(msgs, cap, poll);
    wait_ns_ += std::chrono::duration_cast<Duration>(Clock::now() - wait_begin).count();
    if (n == 0) return false;

    const auto busy_begin = Clock::now();
    // fetch the newest parameters if the learner advanced
    if (w_.params(policy_).version() != local_.version) {
      local_.version = w_.params(policy_).fetch(local_.theta);
      APPO_CHECK(local_.version >= 0, "policy worker started before initial publication");
    }

    if (w_.cfg().sim_inference_ms > 0.0) {
      // stands in for accelerator latency: occupies the request pipeline,
      // not a CPU core
      std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(
          w_.cfg().sim_inference_ms * static_cast<double>(n)));
    }

    std::size_t n_req = 0;
    obs_batch_.clear();
    rows_.clear();
    for (std::size_t i = 0; i < n; ++i) {
      if (msgs[i].msg_kind() == MsgKind::Stop) continue;
      if (msgs[i].msg_kind() != MsgKind::ObsRequest) continue;
      if (msgs[i].slot_id < 0 ||
          msgs[i].slot_id >= static_cast<std::int64_t>(w_.exchange().n_slots())) {
        malformed_dropped_++;  // malformed slot id: drop the message
        continue;
      }
      std::byte* r = w_.exchange_row(static_cast<std::uint32_t>(msgs[i].slot_id), msgs[i].row);
      obs_batch_.insert(obs_batch_.end(), layout_.obs(r), layout_.obs(r) + layout_.obs_dim);
      rows_.push_back(i);
      ++n_req;
    }
    if (n_req == 0) return true;

    forward_batch(local_, obs_batch_, static_cast<int>(n_req), cache_);

    const int ld = w_.heads().logits_dim();
    for (std::size_t b = 0; b < n_req; ++b) {
      const SlotIndexMessage& m = msgs[rows_[b]];
      std::byte* r = w_.exchange_row(static_cast<std::uint32_t>(m.slot_id), m.row);
      std::span<const double> logits(cache_.logits.data() + b * static_cast<std::size_t>(ld),
                                     static_cast<std::size_t>(ld));
      auto [action, logp] = sample_action(w_.heads(), logits, rng_);
      std::copy(action.begin(), action.end(), layout_.action(r));
      *layout_.logp(r) = logp;
      *layout_.version(r) = local_.version;
      std::copy(layout_.hidden(r), layout_.hidden(r) + layout_.hidden_dim,
                layout_.next_hidden(r));  // recurrence not modeled: h' = h

      SlotIndexMessage reply;
      reply.kind = static_cast<std::uint32_t>(MsgKind::ActionReply);
      reply.policy_id = policy_;
      reply.slot_id = m.slot_id;
      reply.worker_id = m.worker_id;
      reply.group_id = m.group_id;
      reply.row = m.row;
      while (w_.reply_q(m.worker_id).push(reply, kDefaultPushTimeout) != PushResult::Ok) {
        if (w_.stop().load(std::memory_order_relaxed)) return true;
      }
    }
    batches_served_++;
    requests_served_ += static_cast<std::int64_t>(n_req);
    busy_ns_ += std::chrono::duration_cast<Duration>(Clock::now() - busy_begin).count();
    return true;
  }

  std::int64_t requests_served() const { return requests_served_; }
  std::int64_t batches_served() const { return batches_served_; }
  std::int64_t malformed_dropped() const { return malformed_dropped_; }
  std::int64_t current_version() const { return local_.version; }
  double idle_fraction() const {
    const double total = static_cast<double>(wait_ns_ + busy_ns_);
    return total > 0.0 ? static_cast<double>(wait_ns_) / total : 0.0;
  }

 private:
  Wiring& w_;
  std::uint32_t policy_;
  ExchangeLayout layout_;
  std::mt19937_64 rng_;
  PolicyParams local_;
  ForwardCache cache_;
  std::vector<double> obs_batch_;
  std::vector<std::size_t> rows_;
  std::int64_t requests_served_ = 0, batches_served_ = 0;
  std::int64_t malformed_dropped_ = 0;
  std::int64_t wait_ns_ = 0, busy_ns_ = 0;
};

// --- learner --------------------------------------------------------------------

struct LearnerStepRow {
  double wallclock = 0.0;  // logical clock in deterministic mode
  std::uint32_t policy = 0;
  std::int64_t version = 0;
  std::int64_t frames = 0;
  double fps = 0.0;
  LossComponents loss;
  double lag_mean = 0.0;
  double lag_max = 0.0;
  std::size_t q_obs = 0;
  std::size_t q_ready = 0;
};

class LearnerUnit {
 public:
  LearnerUnit(Wiring& w, std::uint32_t policy_id)
      : w_(w), policy_(policy_id), t0_(Clock::now()) {
    params_ = init_params(w.model_shape(), derive_seed(w.cfg().seed, 0xAA00 + policy_id));
    publish();
  }

  std::function<void(const LearnerStepRow&)> on_step;
  std::function<void(const PolicyParams&)> on_publish;    // test/checkpoint hook
  std::function<void(const Minibatch&)> on_minibatch;     // test oracle hook

  bool run_once(Duration poll) {
    const auto wait_begin = Clock::now();
    auto mb = assemble_minibatch(w_.ready_q(policy_), w_.store(),
                                 static_cast<std::uint32_t>(w_.cfg().n_batch), w_.stop(), poll);
    wait_ns_ += std::chrono::duration_cast<Duration>(Clock::now() - wait_begin).count();
    if (!mb) return false;
    const auto busy_begin = Clock::now();
    step(*mb);
    busy_ns_ += std::chrono::duration_cast<Duration>(Clock::now() - busy_begin).count();
    return true;
  }

  // True when enough sealed trajectories are queued for a full minibatch.
  bool batch_available() {
    return w_.ready_q(policy_).size() >=
           static_cast<std::size_t>(w_.cfg().n_batch / w_.cfg().T);
  }

  PolicyParams& params() { return params_; }
  std::int64_t steps_done() const { return steps_done_; }
  double idle_fraction() const {
    const double total = static_cast<double>(wait_ns_ + busy_ns_);
    return total > 0.0 ? static_cast<double>(wait_ns_) / total : 0.0;
  }
  double last_lag_mean() const { return last_lag_mean_; }
  double mean_lag() const {
    return steps_done_ > 0 ? lag_mean_accum_ / static_cast<double>(steps_done_) : 0.0;
  }

 private:
  void publish() {
    w_.params(policy_).publish(params_);
    if (on_publish) on_publish(params_);
  }

  void step(Minibatch& mb) {
    const auto& shape = w_.traj_shape();
    const std::uint32_t T = shape.T;
    const auto n_traj = static_cast<std::uint32_t>(mb.views.size());
    const std::uint32_t B = n_traj * T;
    const int od = static_cast<int>(shape.obs_dim);
    const int nh = static_cast<int>(shape.n_heads);

    if (on_minibatch) on_minibatch(mb);

    SampleBatch batch;
    batch.batch = static_cast<int>(B);
    batch.obs.resize(static_cast<std::size_t>(B) * od);
    batch.actions.resize(static_cast<std::size_t>(B) * nh);
    batch.behavior_logp.resize(B);
    batch.advantages.resize(B);
    batch.v_targets.resize(B);

    std::vector<double> boot_obs(static_cast<std::size_t>(n_traj) * od);
    double lag_sum = 0.0;
    std::int64_t min_ver = std::numeric_limits<std::int64_t>::max();
    for (std::uint32_t i = 0; i < n_traj; ++i) {
      auto& v = mb.views[i];
      for (std::uint32_t t = 0; t < T; ++t) {
        const std::size_t s = static_cast<std::size_t>(i) * T + t;
        auto obs = v.obs_row(t);
        std::copy(obs.begin(), obs.end(), batch.obs.begin() + s * od);
        auto act = v.action_row(t);
        std::copy(act.begin(), act.end(), batch.actions.begin() + s * nh);
        batch.behavior_logp[s] = v.behavior_logp()[t];
        lag_sum += static_cast<double>(params_.version - v.versions()[t]);
        min_ver = std::min(min_ver, v.versions()[t]);
      }
      auto bo = v.bootstrap_obs();
      std::copy(bo.begin(), bo.end(), boot_obs.begin() + static_cast<std::size_t>(i) * od);
    }

    ForwardCache cache;
    forward_batch(params_, batch.obs, batch.batch, cache);
    ForwardCache boot_cache;
    forward_batch(params_, boot_obs, static_cast<int>(n_traj), boot_cache);

    // per-step log-probs of the stored actions under the current policy
    std::vector<double> target_logp(B);
    {
      const int ld = w_.heads().logits_dim();
      for (std::uint32_t s = 0; s < B; ++s) {
        std::span<const double> logits(
            cache.logits.data() + static_cast<std::size_t>(s) * ld,
            static_cast<std::size_t>(ld));
        FactoredAction a(batch.actions.begin() + static_cast<std::size_t>(s) * nh,
                         batch.actions.begin() + static_cast<std::size_t>(s + 1) * nh);
        target_logp[s] = log_prob_and_entropy(w_.heads(), logits, a).first;
      }
    }

    VTraceConfig vcfg{w_.cfg().rho_bar, w_.cfg().c_bar, w_.gamma()};
    for (std::uint32_t i = 0; i < n_traj; ++i) {
      const std::size_t base = static_cast<std::size_t>(i) * T;
      auto& v = mb.views[i];
      std::span<const double> rew = v.rewards();
      std::span<const std::uint8_t> dn = v.dones();
      std::span<const double> values(cache.values.data() + base, T);
      std::span<const double> tl(target_logp.data() + base, T);
      std::span<const double> bl(batch.behavior_logp.data() + base, T);
      const double boot_v = boot_cache.values[i];

      auto vt = vtrace(rew, values, boot_v, tl, bl, dn, vcfg);
      if (w_.cfg().advantage_source == AdvantageSource::VTrace) {
        std::copy(vt.pg_adv.begin(), vt.pg_adv.end(), batch.advantages.begin() + base);
      } else {
        auto ret = nstep_returns(rew, boot_v, dn, w_.gamma());
        for (std::uint32_t t = 0; t < T; ++t)
          batch.advantages[base + t] = ret[t] - values[t];
      }
      std::copy(vt.v.begin(), vt.v.end(), batch.v_targets.begin() + base);
    }

    if (w_.cfg().normalize_advantage) {
      double mean = 0.0, sq = 0.0;
      for (double a : batch.advantages) mean += a;
      mean /= B;
      for (double a : batch.advantages) sq += (a - mean) * (a - mean);
      const double stddev = std::sqrt(sq / B) + 1e-8;
      for (double& a : batch.advantages) a = (a - mean) / stddev;
    }

    // hyperparameters may have been mutated by PBT; take effect now
    HyperBlock& h = w_.hypers(policy_);
    AdamConfig adam = w_.cfg().adam;
    adam.lr = h.learning_rate.load();
    adam.beta1 = h.adam_beta1.load();
    LossConfig loss_cfg = w_.cfg().loss;
    loss_cfg.entropy_coef = h.entropy_coef.load();

    auto res = compute_gradients(params_, batch, loss_cfg);
    if (!is_finite(res.loss.total)) throw NumericError("learner: non-finite loss");

    if (w_.cfg().sim_learner_ms > 0.0)
      std::this_thread::sleep_for(
          std::chrono::duration<double, std::milli>(w_.cfg().sim_learner_ms));

    const double lag_mean = lag_sum / B;
    const double lag_max = static_cast<double>(params_.version - min_ver);
    {
      std::lock_guard<std::mutex> lock(w_.pbt_lock(policy_));
      optimizer_step(params_, res.grad, adam);
      publish();
    }

    for (std::uint32_t id : mb.slot_ids) w_.store().pool().release(id);

    last_lag_mean_ = lag_mean;
    lag_mean_accum_ += lag_mean;
    steps_done_++;
    auto& hub = w_.metrics();
    const std::uint32_t src = static_cast<std::uint32_t>(w_.cfg().n_workers) +
                              w_.cfg().population * w_.cfg().policy_workers + policy_;
    hub.record(src, MetricKind::SgdStep, 1.0);
    hub.record(src, MetricKind::LagSample, lag_mean);

    if (on_step) {
      LearnerStepRow row;
      const std::int64_t frames = w_.frames().load(std::memory_order_relaxed);
      if (w_.cfg().deterministic) {
        row.wallclock = static_cast<double>(params_.version);
        row.fps = 0.0;  // wall-time is not meaningful under the serial schedule
      } else {
        row.wallclock = seconds_since(t0_);
        row.fps = row.wallclock > 0 ? static_cast<double>(frames) / row.wallclock : 0.0;
      }
      row.policy = policy_;
      row.version = params_.version;
      row.frames = frames;
      row.loss = res.loss;
      row.lag_mean = lag_mean;
      row.lag_max = lag_max;
      row.q_obs = w_.obs_q(policy_).size();
      row.q_ready = w_.ready_q(policy_).size();
      on_step(row);
    }
  }

  Wiring& w_;
  std::uint32_t policy_;
  Clock::time_point t0_;
  PolicyParams params_;
  std::int64_t steps_done_ = 0;
  std::int64_t wait_ns_ = 0, busy_ns_ = 0;
  double last_lag_mean_ = 0.0;
  double lag_mean_accum_ = 0.0;
};

// --- drivers --------------------------------------------------------------------

struct RunLimits {
  std::int64_t frame_budget = 0;     // 0 = unlimited
  double wall_budget_s = 0.0;        // 0 = unlimited
};

struct RunStats {
  std::int64_t frames = 0;
  std::int64_t samples = 0;
  double seconds = 0.0;
  double fps = 0.0;
  std::vector<double> worker_idle;
  std::vector<double> policy_worker_idle;
  std::int64_t learner_steps = 0;
  double lag_mean = 0.0;  // mean of per-minibatch means
  bool numeric_halt = false;
  std::string error;
};

// Owns the wiring and the component units; runs them on threads or on a
// deterministic cooperative schedule.
class Pipeline {
 public:
  explicit Pipeline(const PipelineConfig& cfg) : wiring_(cfg) {
    for (std::uint32_t p = 0; p < cfg.population; ++p)
      learners_.push_back(std::make_unique<LearnerUnit>(wiring_, p));
    for (int w = 0; w < cfg.n_workers; ++w)
      workers_.push_back(std::make_unique<RolloutWorker>(wiring_, static_cast<std::uint32_t>(w)));
    if (!cfg.random_action_rollouts)
      for (std::uint32_t p = 0; p < cfg.population; ++p)
        for (int i = 0; i < cfg.policy_workers; ++i)
          policy_workers_.push_back(
              std::make_unique<PolicyWorkerUnit>(wiring_, p, static_cast<std::uint32_t>(i)));
  }

  Wiring& wiring() { return wiring_; }
  LearnerUnit& learner(std::uint32_t p) { return *learners_[p]; }
  RolloutWorker& worker(std::uint32_t w) { return *workers_[w]; }
  PolicyWorkerUnit& policy_worker(std::size_t i) { return *policy_workers_[i]; }
  std::size_t n_policy_workers() const { return policy_workers_.size(); }

  // Invoked between learner steps (threaded: from the control loop); used
  // for PBT scheduling and metrics export.
  std::function<void()> on_control_tick;

  RunStats run(const RunLimits& limits) {
    samples0_ = wiring_.samples().load();
    return wiring_.cfg().deterministic ? run_serial(limits) : run_threaded(limits);
  }

  RunStats run_threaded(const RunLimits& limits) {
    using namespace std::chrono_literals;
    const auto t0 = Clock::now();
    const std::int64_t frames0 = wiring_.frames().load();
    std::atomic<bool> failed{false};
    std::string error;
    std::mutex error_mu;

    auto guard = [&](auto&& fn) {
      try {
        fn();
      } catch (const StoppedException&) {
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (error.empty()) error = e.what();
        failed = true;
        wiring_.stop().store(true);
      }
    };

    std::vector<std::thread> threads;
    for (auto& w : workers_)
      threads.emplace_back([&, wp = w.get()] {
        guard([&] {
          while (!wiring_.stop().load(std::memory_order_relaxed))
            wp->run_once(std::chrono::milliseconds(20));
          wp->shutdown();
        });
      });
    for (auto& pw : policy_workers_)
      threads.emplace_back([&, p = pw.get()] {
        guard([&] {
          while (!wiring_.stop().load(std::memory_order_relaxed))
            p->run_once(std::chrono::milliseconds(20));
        });
      });
    for (auto& l : learners_)
      threads.emplace_back([&, lp = l.get()] {
        guard([&] {
          while (!wiring_.stop().load(std::memory_order_relaxed))
            lp->run_once(std::chrono::milliseconds(20));
        });
      });

    while (!wiring_.stop().load()) {
      std::this_thread::sleep_for(2ms);
      if (on_control_tick) on_control_tick();
      const std::int64_t f = wiring_.frames().load(std::memory_order_relaxed);
      if (limits.frame_budget > 0 && f - frames0 >= limits.frame_budget) break;
      if (limits.wall_budget_s > 0 && seconds_since(t0) >= limits.wall_budget_s) break;
    }
    stop_all();
    for (auto& t : threads) t.join();

    RunStats stats = collect_stats(t0, frames0);
    stats.numeric_halt = failed.load() && error.find("finite") != std::string::npos;
    stats.error = error;
    return stats;
  }

  // Deterministic cooperative schedule: fixed round-robin over units, RNG
  // streams keyed by ids, logical time in the metrics. Two runs with the
  // same config and seed produce bitwise-identical parameter trajectories.
  RunStats run_serial(const RunLimits& limits) {
    const auto t0 = Clock::now();
    const std::int64_t frames0 = wiring_.frames().load();
    while (true) {
      const std::int64_t f = wiring_.frames().load(std::memory_order_relaxed);
      if (limits.frame_budget > 0 && f - frames0 >= limits.frame_budget) break;
      if (limits.wall_budget_s > 0 && seconds_since(t0) >= limits.wall_budget_s) break;
      if (limits.frame_budget <= 0 && limits.wall_budget_s <= 0) break;

      bool progressed = false;
      for (auto& w : workers_) progressed |= w->run_once(Duration::zero());
      for (auto& pw : policy_workers_) progressed |= pw->run_once(Duration::zero());
      for (auto& l : learners_)
        while (l->batch_available()) progressed |= l->run_once(Duration::zero());
      if (on_control_tick) on_control_tick();
      if (!progressed) {
        if (wiring_.stop().load()) break;
        if (++stall_count_ > 1000000) throw std::runtime_error("serial pipeline stalled");
      } else {
        stall_count_ = 0;
      }
    }
    wiring_.stop().store(true);
    for (auto& w : workers_) w->shutdown();
    return collect_stats(t0, frames0);
  }

  void stop_all() {
    wiring_.stop().store(true);
    SlotIndexMessage stop_msg;
    stop_msg.kind = static_cast<std::uint32_t>(MsgKind::Stop);
    const auto& cfg = wiring_.cfg();
    for (std::uint32_t p = 0; p < cfg.population; ++p) {
      wiring_.obs_q(p).push(stop_msg, Duration::zero());
      wiring_.ready_q(p).push(stop_msg, Duration::zero());
    }
    for (int w = 0; w < cfg.n_workers; ++w)
      wiring_.reply_q(static_cast<std::uint32_t>(w)).push(stop_msg, Duration::zero());
  }

 private:
  RunStats collect_stats(Clock::time_point t0, std::int64_t frames0) {
    RunStats s;
    s.seconds = seconds_since(t0);
    s.frames = wiring_.frames().load() - frames0;
    s.samples = wiring_.samples().load() - samples0_;
    s.fps = s.seconds > 0 ? static_cast<double>(s.frames) / s.seconds : 0.0;
    for (auto& w : workers_) s.worker_idle.push_back(w->idle_fraction());
    for (auto& pw : policy_workers_) s.policy_worker_idle.push_back(pw->idle_fraction());
    double lag = 0.0;
    for (auto& l : learners_) {
      s.learner_steps += l->steps_done();
      lag += l->mean_lag();
    }
    s.lag_mean = learners_.empty() ? 0.0 : lag / static_cast<double>(learners_.size());
    return s;
  }

  Wiring wiring_;
  std::int64_t samples0_ = 0;
  std::int64_t stall_count_ = 0;
  std::vector<std::unique_ptr<RolloutWorker>> workers_;
  std::vector<std::unique_ptr<PolicyWorkerUnit>> policy_workers_;
  std::vector<std::unique_ptr<LearnerUnit>> learners_;
};

}  // namespace appo
