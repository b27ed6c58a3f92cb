#pragma once

// Multi-policy training support: uniform per-episode policy assignment,
// sliding-window meta objectives, and the population-based training step
// (mutate the bottom of the ranking, copy weights from the top into the
// worst, optionally gated by a win-rate threshold).

#include <cmath>
#include <cstdint>
#include <deque>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "appo/common.hpp"

namespace appo {

struct PopulationConfig {
  std::uint32_t P = 1;
  std::int64_t pbt_period = 5'000'000;  // frames between PBT steps
  double mutate_fraction = 0.70;
  double mutation_rate = 0.15;  // per hyperparameter
  double mutation_factor = 1.2;
  double replace_fraction = 0.30;
  std::optional<double> exchange_threshold;  // win-rate gap gate (0.35 in duel mode)

  void validate() const {
    auto frac = [](double f) { return f >= 0.0 && f <= 1.0; };
    if (!frac(mutate_fraction) || !frac(mutation_rate) || !frac(replace_fraction))
      throw ConfigError("population fractions must lie in [0,1]");
    if (!(mutation_factor > 1.0)) throw ConfigError("mutation factor must exceed 1");
  }
};

// Mutable hyperparameters of one population member. Reward-shaping weights
// ride along so the meta-optimizer can tune the environment signal too.
struct AgentMeta {
  std::uint32_t policy_id = 0;
  double learning_rate = 1e-4;
  double entropy_coef = 0.003;
  double adam_beta1 = 0.9;
  std::vector<double> reward_weights;  // env-specific shaping coefficients

  std::vector<std::pair<std::string, double*>> mutable_fields() {
    std::vector<std::pair<std::string, double*>> f = {
        {"learning_rate", &learning_rate},
        {"entropy_coef", &entropy_coef},
        {"adam_beta1", &adam_beta1},
    };
    for (std::size_t i = 0; i < reward_weights.size(); ++i)
      f.emplace_back("reward_weight_" + std::to_string(i), &reward_weights[i]);
    return f;
  }
};

// i.i.d. uniform draw of a policy for every agent at episode start.
inline std::vector<std::uint32_t> assign_policies(std::uint32_t env_agents, std::uint32_t P,
                                                  std::mt19937_64& rng) {
  APPO_CHECK(P >= 1, "population must be nonempty");
  std::vector<std::uint32_t> out(env_agents);
  for (auto& a : out) a = static_cast<std::uint32_t>(rng() % P);
  return out;
}

enum class MatchOutcome { Win, Tie, Loss };

// Sliding window of episode results feeding the meta objective.
class ScoreWindow {
 public:
  explicit ScoreWindow(std::size_t capacity = 100) : cap_(capacity) {}

  void add_match(MatchOutcome o) { push(o == MatchOutcome::Win ? 1.0 : 0.0); }
  void add_return(double episode_return) { push(episode_return); }

  // Win-rate over the window for versus play, mean return otherwise; the
  // distinction is the caller's (values are whatever was recorded).
  std::optional<double> score() const {
    if (vals_.empty()) return std::nullopt;  // exempt from ranking
    double s = 0.0;
    for (double v : vals_) s += v;
    return s / static_cast<double>(vals_.size());
  }

  std::size_t size() const { return vals_.size(); }

 private:
  void push(double v) {
    vals_.push_back(v);
    if (vals_.size() > cap_) vals_.pop_front();
  }

  std::size_t cap_;
  std::deque<double> vals_;
};

struct PbtEvent {
  std::int64_t frame = 0;
  std::uint32_t agent = 0;
  std::string event;  // mutate | exchange | skip-threshold
  std::string field;
  double old_value = 0.0;
  double new_value = 0.0;
};

inline void append_pbt_events_csv(const std::string& path, const std::vector<PbtEvent>& events,
                                  bool write_header) {
  std::ofstream f(path, std::ios::app);
  if (!f) throw std::runtime_error("cannot open PBT event log: " + path);
  if (write_header) f << "frame,agent,event,field,old,new\n";
  for (const auto& e : events)
    f << e.frame << ',' << e.agent << ',' << e.event << ',' << e.field << ',' << e.old_value
      << ',' << e.new_value << "\n";
}

// One population step:
//   - rank by score, best first (ties broken by policy_id for determinism);
//   - bottom floor(mutate_fraction*P): each hyperparameter independently
//     mutated with probability mutation_rate, multiplied or divided by the
//     factor on a fair coin;
//   - worst floor(replace_fraction*P): weights + hyperparameters copied from
//     a uniformly drawn member of the top ceil(replace_fraction*P), unless
//     the gap to the best score is below exchange_threshold.
// Agents without a score are exempt from this step entirely.
//
// adam_beta1 must stay below 1, so an up-mutation that would cross 1.0 is
// reflected downward; the value stays on the initial*factor^m lattice.
inline std::vector<PbtEvent> pbt_step(
    std::vector<AgentMeta>& agents, const std::vector<std::optional<double>>& scores,
    const PopulationConfig& cfg, std::mt19937_64& rng, std::int64_t frame,
    const std::function<void(std::uint32_t dst, std::uint32_t src)>& copy_weights) {
  cfg.validate();
  APPO_CHECK(agents.size() == scores.size(), "one score per agent required");

  std::vector<PbtEvent> events;
  std::vector<std::uint32_t> ranked;  // indices into agents, best first
  for (std::uint32_t i = 0; i < agents.size(); ++i)
    if (scores[i].has_value()) ranked.push_back(i);
  std::sort(ranked.begin(), ranked.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (*scores[a] != *scores[b]) return *scores[a] > *scores[b];
    return agents[a].policy_id < agents[b].policy_id;
  });

  const auto P = static_cast<double>(ranked.size());
  if (ranked.empty()) return events;
  const auto n_mutate = static_cast<std::size_t>(std::floor(cfg.mutate_fraction * P));
  const auto n_replace = static_cast<std::size_t>(std::floor(cfg.replace_fraction * P));
  const auto n_top = static_cast<std::size_t>(std::ceil(cfg.replace_fraction * P));
  const double best_score = *scores[ranked.front()];

  // mutation pass over the bottom cohort
  for (std::size_t r = ranked.size() - n_mutate; r < ranked.size(); ++r) {
    AgentMeta& agent = agents[ranked[r]];
    for (auto& [name, value] : agent.mutable_fields()) {
      if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) >= cfg.mutation_rate) continue;
      bool up = (rng() & 1) == 0;
      if (name == "adam_beta1" && up && *value * cfg.mutation_factor >= 1.0) up = false;
      const double old_value = *value;
      *value = up ? *value * cfg.mutation_factor : *value / cfg.mutation_factor;
      events.push_back({frame, agent.policy_id, "mutate", name, old_value, *value});
    }
  }

  // exchange pass over the worst cohort
  for (std::size_t r = ranked.size() - n_replace; r < ranked.size(); ++r) {
    AgentMeta& agent = agents[ranked[r]];
    if (cfg.exchange_threshold.has_value() &&
        best_score - *scores[ranked[r]] < *cfg.exchange_threshold) {
      events.push_back({frame, agent.policy_id, "skip-threshold", "score",
                        *scores[ranked[r]], best_score});
      continue;
    }
    const std::uint32_t src_rank = static_cast<std::uint32_t>(rng() % n_top);
    const AgentMeta& src = agents[ranked[src_rank]];
    copy_weights(agent.policy_id, src.policy_id);
    const std::uint32_t dst_id = agent.policy_id;
    agent = src;
    agent.policy_id = dst_id;
    events.push_back({frame, dst_id, "exchange", "weights",
                      static_cast<double>(src.policy_id), static_cast<double>(dst_id)});
  }
  return events;
}

}  // namespace appo
