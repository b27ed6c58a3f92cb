#pragma once

// Off-policy correction math. V-trace rewrites value targets with truncated
// importance weights so the critic tracks the target policy even when the
// samples came from a stale behavior policy; PPO clipping bounds the policy
// update itself. Both are pure functions over owned arrays.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "appo/common.hpp"

namespace appo {

struct VTraceConfig {
  double rho_bar = 1.0;  // importance-weight clip inside the delta terms
  double c_bar = 1.0;    // trace-cutting clip
  double gamma = 0.99;

  void validate() const {
    if (!(rho_bar >= c_bar && c_bar > 0.0))
      throw ConfigError("vtrace requires rho_bar >= c_bar > 0");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("discount must be in (0,1]");
  }
};

struct VTraceOutput {
  std::vector<double> v;       // corrected value targets v_s
  std::vector<double> pg_adv;  // rho_s * (r_s + gamma*v_{s+1} - V(x_s))
  std::vector<double> rho;     // clipped importance weights
  std::vector<double> c;       // clipped trace weights
};

struct ClipConfig {
  double ratio_low = 1.0 / 1.1;
  double ratio_high = 1.1;

  void validate() const {
    if (!(0.0 < ratio_low && ratio_low < 1.0 && 1.0 < ratio_high))
      throw ConfigError("ppo clip requires 0 < low < 1 < high");
  }
};

// exp(logp_target - logp_behavior) with the exponent clamped for safety.
inline constexpr double kRatioExpClamp = 20.0;

inline double importance_ratio(double target_logp, double behavior_logp) {
  double d = target_logp - behavior_logp;
  d = std::clamp(d, -kRatioExpClamp, kRatioExpClamp);
  return std::exp(d);
}

// Backward-recursive V-trace over one trajectory of length T.
//   delta_t = rho_t * (r_t + disc_t * V_{t+1} - V_t)
//   v_t     = V_t + delta_t + disc_t * c_t * (v_{t+1} - V_{t+1})
// with disc_t = gamma * (1 - done_t) and V_{T+1} = bootstrap_value. A done at
// step t zeroes the discount, so nothing after t leaks into v_s for s <= t.
inline VTraceOutput vtrace(std::span<const double> rewards, std::span<const double> values,
                           double bootstrap_value, std::span<const double> target_logp,
                           std::span<const double> behavior_logp,
                           std::span<const std::uint8_t> dones, const VTraceConfig& cfg) {
  cfg.validate();
  const std::size_t T = rewards.size();
  APPO_CHECK(values.size() == T && target_logp.size() == T && behavior_logp.size() == T &&
                 dones.size() == T,
             "vtrace inputs must share length T");
  for (std::size_t t = 0; t < T; ++t) {
    if (!is_finite(rewards[t]) || !is_finite(values[t]) || !is_finite(target_logp[t]) ||
        !is_finite(behavior_logp[t]))
      throw NumericError("vtrace: non-finite input at step " + std::to_string(t));
  }
  if (!is_finite(bootstrap_value)) throw NumericError("vtrace: non-finite bootstrap value");

  VTraceOutput out;
  out.v.resize(T);
  out.pg_adv.resize(T);
  out.rho.resize(T);
  out.c.resize(T);

  double v_next = bootstrap_value;      // v_{t+1}
  double value_next = bootstrap_value;  // V_{t+1}
  for (std::size_t i = T; i-- > 0;) {
    const double ratio = importance_ratio(target_logp[i], behavior_logp[i]);
    const double rho = std::min(cfg.rho_bar, ratio);
    const double c = std::min(cfg.c_bar, ratio);
    const double disc = dones[i] ? 0.0 : cfg.gamma;
    const double delta = rho * (rewards[i] + disc * value_next - values[i]);
    const double v = values[i] + delta + disc * c * (v_next - value_next);
    out.v[i] = v;
    out.pg_adv[i] = rho * (rewards[i] + disc * v_next - values[i]);
    out.rho[i] = rho;
    out.c[i] = c;
    v_next = v;
    value_next = values[i];
  }
  return out;
}

// Discounted n-step return bootstrapped with V; the advantage source used
// when `advantage.source = nstep` (no importance weighting).
inline std::vector<double> nstep_returns(std::span<const double> rewards, double bootstrap_value,
                                         std::span<const std::uint8_t> dones, double gamma) {
  std::vector<double> ret(rewards.size());
  double acc = bootstrap_value;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    const double disc = dones[i] ? 0.0 : gamma;
    acc = rewards[i] + disc * acc;
    ret[i] = acc;
  }
  return ret;
}

// min(ratio*A, clip(ratio)*A). The loss is the negated batch mean.
inline double ppo_clip_objective(double ratio, double advantage, const ClipConfig& cfg) {
  const double clipped = std::clamp(ratio, cfg.ratio_low, cfg.ratio_high);
  return std::min(ratio * advantage, clipped * advantage);
}

// d/d(ratio) of the clipped surrogate, with the unclipped branch winning
// ties. Zero in the flat region where the clipped term is active.
inline double ppo_clip_dratio(double ratio, double advantage, const ClipConfig& cfg) {
  const double clipped = std::clamp(ratio, cfg.ratio_low, cfg.ratio_high);
  if (ratio * advantage <= clipped * advantage) return advantage;
  return 0.0;
}

struct LossConfig {
  ClipConfig clip;
  double value_coef = 0.5;
  double entropy_coef = 0.003;
};

struct LossComponents {
  double policy = 0.0;   // -mean(clipped surrogate)
  double value = 0.0;    // value_coef * mean((V - v)^2)
  double entropy = 0.0;  // mean entropy (reported unscaled)
  double total = 0.0;    // policy + value - entropy_coef * entropy
};

// Composes the scalar loss from per-sample pieces. Targets (advantages and
// v_s) are inputs here, not recomputed, so the gradient treats them as
// constants.
inline LossComponents total_loss(std::span<const double> ratios, std::span<const double> advantages,
                                 std::span<const double> values, std::span<const double> v_targets,
                                 std::span<const double> entropies, const LossConfig& cfg) {
  const std::size_t n = ratios.size();
  APPO_CHECK(advantages.size() == n && values.size() == n && v_targets.size() == n &&
                 entropies.size() == n,
             "total_loss inputs must share length");
  LossComponents out;
  for (std::size_t i = 0; i < n; ++i) {
    out.policy -= ppo_clip_objective(ratios[i], advantages[i], cfg.clip);
    const double ve = values[i] - v_targets[i];
    out.value += ve * ve;
    out.entropy += entropies[i];
  }
  if (n > 0) {
    out.policy /= static_cast<double>(n);
    out.value = cfg.value_coef * out.value / static_cast<double>(n);
    out.entropy /= static_cast<double>(n);
  }
  out.total = out.policy + out.value - cfg.entropy_coef * out.entropy;
  if (!is_finite(out.total)) throw NumericError("total_loss: non-finite loss");
  return out;
}

}  // namespace appo
