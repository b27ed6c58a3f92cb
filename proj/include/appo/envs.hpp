#pragma once

// Built-in environments. SyntheticLatencyEnv burns a configurable amount of
// CPU per step to stand in for an expensive simulator; GridBattleEnv is a
// small two-combatant arena with factored actions, scripted opponents, and a
// duel mode for self-play evaluation.
//
// GridBattle geometry is fully egocentric: each seat has a fixed facing
// (seat 0 looks "north", seat 1 "south") and all observations, actions, and
// scripted-bot decisions are expressed in the seat's own frame. The board,
// spawn schedule, and conflict resolution are symmetric under a 180-degree
// rotation combined with a seat swap, so swapping two policies between seats
// mirrors the entire episode exactly.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "appo/common.hpp"
#include "appo/policy.hpp"

namespace appo {

struct EnvStepOut {
  std::vector<double> obs;      // [n_agents * obs_dim]
  std::vector<double> rewards;  // [n_agents]
  bool done = false;
  int raw_frames = 1;  // env frames consumed by this call
};

class Env {
 public:
  virtual ~Env() = default;
  virtual int obs_dim() const = 0;
  virtual int n_agents() const = 0;
  virtual const ActionHeadsSpec& heads() const = 0;
  virtual std::vector<double> reset(std::uint64_t seed) = 0;
  virtual EnvStepOut step(const std::vector<FactoredAction>& actions) = 0;
  // per-agent game score (not shaped reward); empty when the env has none
  virtual std::vector<double> final_scores() const { return {}; }
  // reward-shaping weights for one agent (population-based training mutates
  // these); envs without shaping ignore the call
  virtual void set_reward_weights(int /*agent*/, std::span<const double> /*w*/) {}
};

// Repeats each chosen action `frameskip` times, summing rewards, returning
// the last observation; stops early when an episode ends mid-repeat.
class FrameskipWrapper final : public Env {
 public:
  FrameskipWrapper(std::unique_ptr<Env> inner, int frameskip)
      : inner_(std::move(inner)), frameskip_(frameskip) {
    APPO_CHECK(frameskip_ >= 1, "frameskip must be >= 1");
  }

  int obs_dim() const override { return inner_->obs_dim(); }
  int n_agents() const override { return inner_->n_agents(); }
  const ActionHeadsSpec& heads() const override { return inner_->heads(); }
  std::vector<double> reset(std::uint64_t seed) override { return inner_->reset(seed); }

  EnvStepOut step(const std::vector<FactoredAction>& actions) override {
    EnvStepOut acc;
    acc.rewards.assign(inner_->n_agents(), 0.0);
    acc.raw_frames = 0;
    for (int rep = 0; rep < frameskip_; ++rep) {
      EnvStepOut out = inner_->step(actions);
      acc.obs = std::move(out.obs);
      for (std::size_t i = 0; i < acc.rewards.size(); ++i) acc.rewards[i] += out.rewards[i];
      acc.raw_frames += out.raw_frames;
      acc.done = out.done;
      if (out.done) break;
    }
    return acc;
  }

  std::vector<double> final_scores() const override { return inner_->final_scores(); }
  void set_reward_weights(int agent, std::span<const double> w) override {
    inner_->set_reward_weights(agent, w);
  }

  int frameskip() const { return frameskip_; }
  Env& inner() { return *inner_; }

 private:
  std::unique_ptr<Env> inner_;
  int frameskip_;
};

// --- synthetic latency environment ------------------------------------------

struct SyntheticConfig {
  double t_env_ms = 1.0;  // busy-wait per raw step; CPU-bound like a renderer
  int obs_dim = 32;
  int episode_len = 256;
  std::vector<int> head_sizes = {4};
};

class SyntheticLatencyEnv final : public Env {
 public:
  explicit SyntheticLatencyEnv(const SyntheticConfig& cfg) : cfg_(cfg) {
    heads_.sizes = cfg.head_sizes;
  }

  int obs_dim() const override { return cfg_.obs_dim; }
  int n_agents() const override { return 1; }
  const ActionHeadsSpec& heads() const override { return heads_; }

  std::vector<double> reset(std::uint64_t seed) override {
    seed_ = seed;
    step_ = 0;
    done_ = false;
    return make_obs();
  }

  EnvStepOut step(const std::vector<FactoredAction>& actions) override {
    APPO_CHECK(!done_, "step after done without reset");
    APPO_CHECK(actions.size() == 1, "synthetic env takes one agent action");
    busy_wait(cfg_.t_env_ms);
    ++step_;
    EnvStepOut out;
    // deterministic reward schedule: depends only on (seed, step)
    out.rewards = {0.1 * static_cast<double>((step_ + seed_ % 7) % 11) - 0.5};
    out.done = step_ >= cfg_.episode_len;
    done_ = out.done;
    out.obs = make_obs();
    return out;
  }

 private:
  void busy_wait(double ms) {
    if (ms <= 0.0) return;
    const auto until = Clock::now() + std::chrono::duration_cast<Duration>(
                                          std::chrono::duration<double, std::milli>(ms));
    while (Clock::now() < until) {
    }
  }

  std::vector<double> make_obs() const {
    std::vector<double> obs(cfg_.obs_dim);
    for (int i = 0; i < cfg_.obs_dim; ++i) {
      const std::uint64_t h = splitmix64(seed_ ^ (static_cast<std::uint64_t>(step_) << 20) ^
                                         static_cast<std::uint64_t>(i));
      obs[i] = static_cast<double>(h % 2000) / 1000.0 - 1.0;
    }
    return obs;
  }

  SyntheticConfig cfg_;
  ActionHeadsSpec heads_;
  std::uint64_t seed_ = 0;
  int step_ = 0;
  bool done_ = false;
};

// --- grid battle -------------------------------------------------------------

struct GridBattleConfig {
  int grid = 9;          // odd, so the board has a rotation center
  int episode_len = 256; // raw frames
  int attack_range = 2;  // Chebyshev distance
  int health_max = 3;
  int ammo_start = 25;
  int ammo_pack = 10;
  int medkit_heal = 2;
  int spawn_period = 16;
  int max_pickup_pairs = 2;
  int bot_difficulty = 1;  // opponent strength in single-agent mode
  bool duel = false;       // two externally controlled agents
  // reward shaping weights, mutable by population-based training
  double w_tag = 1.0;
  double w_pickup = 0.2;
  double w_death = -0.5;
};

// Heads: moving {noop,fwd,back}, strafing {noop,left,right},
// attack {noop,attack}, interact {noop,interact}. Interact is carried in the
// action space but has no effect on this map (there is nothing to operate);
// the space is kept fixed so policies transfer between scenarios.
inline ActionHeadsSpec gridbattle_heads() {
  ActionHeadsSpec h;
  h.sizes = {3, 3, 2, 2};
  return h;
}

class GridBattleEnv final : public Env {
 public:
  static constexpr int kPatch = 5;  // egocentric patch edge

  explicit GridBattleEnv(const GridBattleConfig& cfg) : cfg_(cfg), heads_(gridbattle_heads()) {
    APPO_CHECK(cfg_.grid % 2 == 1, "grid size must be odd");
    for (int s = 0; s < 2; ++s) weights_[s] = {cfg_.w_tag, cfg_.w_pickup, cfg_.w_death};
  }

  // shaping order: [tag, pickup, death]
  void set_reward_weights(int agent, std::span<const double> w) override {
    APPO_CHECK(agent >= 0 && agent < 2, "gridbattle has two seats");
    APPO_CHECK(w.size() == 3, "gridbattle takes three shaping weights");
    weights_[agent] = {w[0], w[1], w[2]};
  }

  int obs_dim() const override { return 10 + 2 * kPatch * kPatch; }  // 60 for 5x5
  int n_agents() const override { return cfg_.duel ? 2 : 1; }
  const ActionHeadsSpec& heads() const override { return heads_; }

  std::vector<double> reset(std::uint64_t seed) override {
    env_rng_.seed(derive_seed(seed, 0xE17));
    bot_rng_.seed(derive_seed(seed, 0xB07));
    step_ = 0;
    done_ = false;
    spawn_counter_ = 0;
    pickups_.clear();
    stats_ = Stats{};
    const int g = cfg_.grid;
    for (int s = 0; s < 2; ++s) {
      seats_[s].x = g / 2;
      seats_[s].y = (s == 0) ? 1 : g - 2;
      seats_[s].health = cfg_.health_max;
      seats_[s].ammo = cfg_.ammo_start;
      seats_[s].score = 0;
      seats_[s].deaths = 0;
    }
    return gather_obs();
  }

  EnvStepOut step(const std::vector<FactoredAction>& actions) override {
    APPO_CHECK(!done_, "step after done without reset");
    APPO_CHECK(static_cast<int>(actions.size()) == n_agents(), "one action per agent required");

    FactoredAction acts[2];
    acts[0] = actions[0];
    if (cfg_.duel) {
      acts[1] = actions[1];
    } else {
      acts[1] = scripted_bot_policy(1, cfg_.bot_difficulty, bot_rng_);
    }
    for (int s = 0; s < 2; ++s)
      APPO_CHECK(static_cast<int>(acts[s].size()) == heads_.n_heads(), "action arity mismatch");

    double reward[2] = {0.0, 0.0};

    // simultaneous movement with symmetric conflict resolution
    int nx[2], ny[2];
    for (int s = 0; s < 2; ++s) propose_move(s, acts[s], nx[s], ny[s]);
    const bool same_target = (nx[0] == nx[1] && ny[0] == ny[1]);
    const bool cross = (nx[0] == seats_[1].x && ny[0] == seats_[1].y && nx[1] == seats_[0].x &&
                        ny[1] == seats_[0].y);
    if (!same_target && !cross) {
      for (int s = 0; s < 2; ++s) {
        seats_[s].x = nx[s];
        seats_[s].y = ny[s];
      }
    }

    // pickups collect on entry
    for (int s = 0; s < 2; ++s) {
      for (std::size_t i = 0; i < pickups_.size(); ++i) {
        if (pickups_[i].x == seats_[s].x && pickups_[i].y == seats_[s].y) {
          if (pickups_[i].ammo)
            seats_[s].ammo += cfg_.ammo_pack;
          else
            seats_[s].health = std::min(cfg_.health_max, seats_[s].health + cfg_.medkit_heal);
          reward[s] += weights_[s][1];
          stats_.pickups_collected++;
          pickups_.erase(pickups_.begin() + static_cast<std::ptrdiff_t>(i));
          break;
        }
      }
    }

    // simultaneous attacks against post-move positions
    bool tagged[2] = {false, false};
    for (int s = 0; s < 2; ++s) {
      if (acts[s][2] == 1 && seats_[s].ammo > 0 && in_attack_range(s)) {
        tagged[1 - s] = true;
        seats_[s].ammo -= 1;  // a tag spends one charge
        seats_[s].score += 1;
        reward[s] += weights_[s][0];
      }
    }
    bool dying[2] = {false, false};
    for (int s = 0; s < 2; ++s) {
      if (tagged[s]) {
        seats_[s].health -= 1;
        if (seats_[s].health <= 0) {
          reward[s] += weights_[s][2];
          seats_[s].deaths++;
          dying[s] = true;
        }
      }
    }
    // simultaneous deaths respawn jointly: each walks from its own start
    // cell, so the resolution is independent of seat order
    if (dying[0] && dying[1]) {
      respawn(0, start_cell(1));
      respawn(1, {seats_[0].x, seats_[0].y});
    } else if (dying[0]) {
      respawn(0, {seats_[1].x, seats_[1].y});
    } else if (dying[1]) {
      respawn(1, {seats_[0].x, seats_[0].y});
    }

    maybe_spawn_pickups();

    ++step_;
    done_ = step_ >= cfg_.episode_len;

    EnvStepOut out;
    out.done = done_;
    out.obs = gather_obs();
    out.rewards.assign(static_cast<std::size_t>(n_agents()), 0.0);
    out.rewards[0] = reward[0];
    if (cfg_.duel) out.rewards[1] = reward[1];
    return out;
  }

  // Hand-written opponent with full access to the environment state.
  // Difficulty scales the fraction of decisions that are deliberate instead
  // of random lapses; difficulty 5 is fully deterministic given the state.
  FactoredAction scripted_bot_policy(int seat, int difficulty, std::mt19937_64& rng) const {
    static constexpr double kLapse[5] = {0.85, 0.65, 0.45, 0.25, 0.0};
    const double lapse = kLapse[std::clamp(difficulty, 1, 5) - 1];
    if (lapse > 0.0 && std::uniform_real_distribution<double>(0.0, 1.0)(rng) < lapse) {
      FactoredAction a(4);
      for (int j = 0; j < 4; ++j)
        a[j] = static_cast<std::int32_t>(rng() % static_cast<unsigned>(heads_.sizes[j]));
      return a;
    }

    const Seat& me = seats_[seat];
    const Seat& opp = seats_[1 - seat];
    FactoredAction a = {0, 0, 0, 0};

    if (in_attack_range(seat) && me.ammo > 0) a[2] = 1;

    // pick a target in priority order: survival, supplies, then the hunt
    int tx = opp.x, ty = opp.y;
    bool hunting = true;
    if (me.health <= 1) {
      if (auto p = nearest_pickup(seat, /*ammo=*/false)) {
        tx = p->x;
        ty = p->y;
        hunting = false;
      }
    }
    if (hunting && me.ammo == 0) {
      if (auto p = nearest_pickup(seat, /*ammo=*/true)) {
        tx = p->x;
        ty = p->y;
        hunting = false;
      }
    }

    const int cheb = std::max(std::abs(opp.x - me.x), std::abs(opp.y - me.y));
    if (!hunting || cheb > 1) {
      // move in the seat's own frame toward the target
      auto [dr, df] = to_frame(seat, tx - me.x, ty - me.y);
      if (df > 0)
        a[0] = 1;
      else if (df < 0)
        a[0] = 2;
      if (dr > 0)
        a[1] = 2;
      else if (dr < 0)
        a[1] = 1;
    }
    return a;
  }

  std::vector<double> final_scores() const override {
    return {static_cast<double>(seats_[0].score), static_cast<double>(seats_[1].score)};
  }

  struct Stats {
    int pickups_spawned = 0;
    int pickups_collected = 0;
  };
  const Stats& stats() const { return stats_; }
  int pickups_on_grid() const { return static_cast<int>(pickups_.size()); }
  int score(int seat) const { return seats_[seat].score; }
  int health(int seat) const { return seats_[seat].health; }
  int ammo(int seat) const { return seats_[seat].ammo; }
  std::pair<int, int> position(int seat) const { return {seats_[seat].x, seats_[seat].y}; }
  const GridBattleConfig& config() const { return cfg_; }

 private:
  struct Seat {
    int x = 0, y = 0;
    int health = 0, ammo = 0;
    int score = 0, deaths = 0;
  };
  struct Pickup {
    int x, y;
    bool ammo;
  };

  // seat frames: seat 0 faces +y, seat 1 faces -y
  static std::pair<int, int> frame_to_world(int seat, int dr, int df) {
    return seat == 0 ? std::pair{dr, df} : std::pair{-dr, -df};
  }
  static std::pair<int, int> to_frame(int seat, int dx, int dy) {
    return seat == 0 ? std::pair{dx, dy} : std::pair{-dx, -dy};
  }
  std::pair<int, int> mirror(int x, int y) const {
    return {cfg_.grid - 1 - x, cfg_.grid - 1 - y};
  }

  void propose_move(int seat, const FactoredAction& act, int& nx, int& ny) const {
    int df = act[0] == 1 ? 1 : act[0] == 2 ? -1 : 0;
    int dr = act[1] == 2 ? 1 : act[1] == 1 ? -1 : 0;
    auto [dx, dy] = frame_to_world(seat, dr, df);
    nx = std::clamp(seats_[seat].x + dx, 0, cfg_.grid - 1);
    ny = std::clamp(seats_[seat].y + dy, 0, cfg_.grid - 1);
  }

  bool in_attack_range(int seat) const {
    const int cheb = std::max(std::abs(seats_[0].x - seats_[1].x),
                              std::abs(seats_[0].y - seats_[1].y));
    (void)seat;  // range is symmetric
    return cheb <= cfg_.attack_range;
  }

  std::optional<Pickup> nearest_pickup(int seat, bool ammo) const {
    std::optional<Pickup> best;
    int best_d = 1 << 20;
    for (const auto& p : pickups_) {
      if (p.ammo != ammo) continue;
      const int d = std::abs(p.x - seats_[seat].x) + std::abs(p.y - seats_[seat].y);
      // tie-break in the seat's frame so the choice is rotation-equivariant
      if (d < best_d) {
        best_d = d;
        best = p;
      } else if (d == best_d && best) {
        auto [ar, af] = to_frame(seat, p.x - seats_[seat].x, p.y - seats_[seat].y);
        auto [br, bf] = to_frame(seat, best->x - seats_[seat].x, best->y - seats_[seat].y);
        if (std::pair{af, ar} < std::pair{bf, br}) best = p;
      }
    }
    return best;
  }

  std::pair<int, int> start_cell(int seat) const {
    return {cfg_.grid / 2, seat == 0 ? 1 : cfg_.grid - 2};
  }

  void respawn(int seat, std::pair<int, int> avoid) {
    const int g = cfg_.grid;
    auto [sx, sy] = start_cell(seat);
    seats_[seat].health = cfg_.health_max;
    // walk outward in the seat's frame until a free cell turns up
    for (int radius = 0; radius < g; ++radius) {
      for (int df = -radius; df <= radius; ++df) {
        for (int dr = -radius; dr <= radius; ++dr) {
          if (std::max(std::abs(df), std::abs(dr)) != radius) continue;
          auto [dx, dy] = frame_to_world(seat, dr, df);
          const int x = sx + dx, y = sy + dy;
          if (x < 0 || y < 0 || x >= g || y >= g) continue;
          if (x == avoid.first && y == avoid.second) continue;
          seats_[seat].x = x;
          seats_[seat].y = y;
          return;
        }
      }
    }
  }

  void maybe_spawn_pickups() {
    if (cfg_.spawn_period <= 0) return;
    if (step_ == 0 || step_ % cfg_.spawn_period != 0) return;
    if (static_cast<int>(pickups_.size()) >= 2 * cfg_.max_pickup_pairs) return;
    const int g = cfg_.grid;
    const bool ammo = (spawn_counter_++ % 2) == 0;
    for (int attempt = 0; attempt < 16; ++attempt) {
      const int x = static_cast<int>(env_rng_() % static_cast<unsigned>(g));
      const int y = static_cast<int>(env_rng_() % static_cast<unsigned>(g));
      auto [mx, my] = mirror(x, y);
      if (x == mx && y == my) continue;  // the center has no distinct mirror
      if (occupied(x, y) || occupied(mx, my)) continue;
      pickups_.push_back({x, y, ammo});
      pickups_.push_back({mx, my, ammo});
      stats_.pickups_spawned += 2;
      return;
    }
  }

  bool occupied(int x, int y) const {
    for (int s = 0; s < 2; ++s)
      if (seats_[s].x == x && seats_[s].y == y) return true;
    for (const auto& p : pickups_)
      if (p.x == x && p.y == y) return true;
    return false;
  }

  std::vector<double> gather_obs() const {
    std::vector<double> all;
    const int n = n_agents();
    all.reserve(static_cast<std::size_t>(n) * obs_dim());
    for (int s = 0; s < n; ++s) {
      auto o = seat_obs(s);
      all.insert(all.end(), o.begin(), o.end());
    }
    return all;
  }

  std::vector<double> seat_obs(int seat) const {
    const Seat& me = seats_[seat];
    const Seat& opp = seats_[1 - seat];
    const int g = cfg_.grid;
    std::vector<double> o;
    o.reserve(static_cast<std::size_t>(obs_dim()));

    // agent state (6)
    o.push_back(static_cast<double>(me.health) / cfg_.health_max);
    o.push_back(std::min(1.0, static_cast<double>(me.ammo) / cfg_.ammo_start));
    o.push_back(static_cast<double>(step_) / cfg_.episode_len);
    o.push_back(std::clamp((me.score - opp.score) / 10.0, -1.0, 1.0));
    {
      auto [cr, cf] = to_frame(seat, me.x - g / 2, me.y - g / 2);
      o.push_back(static_cast<double>(cr) / (g / 2));
      o.push_back(static_cast<double>(cf) / (g / 2));
    }
    // opponent (4)
    {
      auto [dr, df] = to_frame(seat, opp.x - me.x, opp.y - me.y);
      o.push_back(static_cast<double>(dr) / (g - 1));
      o.push_back(static_cast<double>(df) / (g - 1));
      o.push_back(static_cast<double>(opp.health) / cfg_.health_max);
      o.push_back(in_attack_range(seat) ? 1.0 : 0.0);
    }
    // egocentric 5x5 patch, two channels (10 + 50 = 60 total)
    const int r = kPatch / 2;
    for (int df = r; df >= -r; --df) {
      for (int dr = -r; dr <= r; ++dr) {
        auto [dx, dy] = frame_to_world(seat, dr, df);
        const int x = me.x + dx, y = me.y + dy;
        if (x < 0 || y < 0 || x >= g || y >= g) {
          o.push_back(-1.0);  // out of board
        } else if (x == opp.x && y == opp.y) {
          o.push_back(1.0);
        } else {
          o.push_back(0.0);
        }
      }
    }
    for (int df = r; df >= -r; --df) {
      for (int dr = -r; dr <= r; ++dr) {
        auto [dx, dy] = frame_to_world(seat, dr, df);
        const int x = me.x + dx, y = me.y + dy;
        double v = 0.0;
        for (const auto& p : pickups_)
          if (p.x == x && p.y == y) v = p.ammo ? 0.5 : 1.0;
        o.push_back(v);
      }
    }
    return o;
  }

  GridBattleConfig cfg_;
  ActionHeadsSpec heads_;
  std::array<double, 3> weights_[2];
  std::mt19937_64 env_rng_;
  mutable std::mt19937_64 bot_rng_;
  Seat seats_[2];
  std::vector<Pickup> pickups_;
  int step_ = 0;
  int spawn_counter_ = 0;
  bool done_ = false;
  Stats stats_;
};

// --- versus episodes ---------------------------------------------------------

using PolicyFn = std::function<FactoredAction(std::span<const double> obs, std::mt19937_64& rng)>;

enum class VersusOutcome { WinA, WinB, Tie };

struct VersusResult {
  VersusOutcome outcome = VersusOutcome::Tie;
  double score_a = 0.0;
  double score_b = 0.0;
};

inline PolicyFn uniform_random_policy(const ActionHeadsSpec& heads) {
  return [heads](std::span<const double>, std::mt19937_64& rng) {
    FactoredAction a(heads.n_heads());
    for (int j = 0; j < heads.n_heads(); ++j)
      a[j] = static_cast<std::int32_t>(rng() % static_cast<unsigned>(heads.sizes[j]));
    return a;
  };
}

inline PolicyFn params_policy(std::shared_ptr<const PolicyParams> params) {
  return [params](std::span<const double> obs, std::mt19937_64& rng) {
    auto out = forward(*params, obs, {});
    auto [action, logp] = sample_action(params->shape.heads, out.logits, rng);
    return action;
  };
}

// Runs one duel episode; both policies act through the same (wrapped) env in
// lockstep. Each policy keeps its own RNG stream, so re-running with swapped
// seats (and the same per-policy streams) mirrors the episode exactly.
inline VersusResult versus_episode(Env& env, const PolicyFn& policy_a, const PolicyFn& policy_b,
                                   std::uint64_t seed, std::uint64_t rng_seed_a,
                                   std::uint64_t rng_seed_b) {
  APPO_CHECK(env.n_agents() == 2, "versus_episode requires a duel environment");
  std::mt19937_64 rng_a(rng_seed_a);
  std::mt19937_64 rng_b(rng_seed_b);

  std::vector<double> obs = env.reset(seed);
  const int d = env.obs_dim();
  double score_a = 0.0, score_b = 0.0;
  bool done = false;
  while (!done) {
    std::span<const double> obs_a(obs.data(), static_cast<std::size_t>(d));
    std::span<const double> obs_b(obs.data() + d, static_cast<std::size_t>(d));
    std::vector<FactoredAction> acts = {policy_a(obs_a, rng_a), policy_b(obs_b, rng_b)};
    EnvStepOut out = env.step(acts);
    score_a += out.rewards[0];
    score_b += out.rewards[1];
    obs = std::move(out.obs);
    done = out.done;
  }
  auto scores = env.final_scores();
  VersusResult res;
  res.score_a = scores.size() == 2 ? scores[0] : score_a;
  res.score_b = scores.size() == 2 ? scores[1] : score_b;
  if (res.score_a > res.score_b)
    res.outcome = VersusOutcome::WinA;
  else if (res.score_b > res.score_a)
    res.outcome = VersusOutcome::WinB;
  return res;
}

inline VersusResult versus_episode(Env& env, const PolicyFn& policy_a, const PolicyFn& policy_b,
                                   std::uint64_t seed) {
  return versus_episode(env, policy_a, policy_b, seed, derive_seed(seed, 1),
                        derive_seed(seed, 2));
}

// --- registry ----------------------------------------------------------------

struct EnvSpec {
  std::string name;
  int default_frameskip = 4;
  double default_gamma = 0.99;
};

struct EnvOptions {
  // synthetic
  double t_env_ms = 1.0;
  int synthetic_obs_dim = 32;
  int episode_len = 0;  // 0 = env default
  // gridbattle
  GridBattleConfig grid;
};

inline EnvSpec env_spec(const std::string& name) {
  if (name == "synthetic") return {name, 1, 0.99};
  if (name == "gridbattle") return {name, 2, 0.995};  // duel-style action repeat
  if (name == "gridbattle-duel") return {name, 2, 0.995};
  throw ConfigError("unknown environment: " + name);
}

inline std::unique_ptr<Env> make_env_raw(const std::string& name, const EnvOptions& opt) {
  if (name == "synthetic") {
    SyntheticConfig cfg;
    cfg.t_env_ms = opt.t_env_ms;
    cfg.obs_dim = opt.synthetic_obs_dim;
    if (opt.episode_len > 0) cfg.episode_len = opt.episode_len;
    return std::make_unique<SyntheticLatencyEnv>(cfg);
  }
  if (name == "gridbattle" || name == "gridbattle-duel") {
    GridBattleConfig cfg = opt.grid;
    cfg.duel = (name == "gridbattle-duel");
    if (opt.episode_len > 0) cfg.episode_len = opt.episode_len;
    return std::make_unique<GridBattleEnv>(cfg);
  }
  throw ConfigError("unknown environment: " + name);
}

inline std::unique_ptr<Env> make_env(const std::string& name, const EnvOptions& opt,
                                     int frameskip = 0) {
  const int fs = frameskip > 0 ? frameskip : env_spec(name).default_frameskip;
  return std::make_unique<FrameskipWrapper>(make_env_raw(name, opt), fs);
}

}  // namespace appo
