#pragma once

// Actor-critic model: a 2-layer tanh MLP trunk feeding independent discrete
// action heads and a scalar value head. Everything is double precision and
// backpropagation is written out explicitly, so gradients can be checked
// against finite differences to tight tolerances.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "appo/common.hpp"
#include "appo/offpolicy.hpp"
#include "appo/transport.hpp"

namespace appo {

struct ActionHeadsSpec {
  std::vector<int> sizes;

  int n_heads() const { return static_cast<int>(sizes.size()); }
  int logits_dim() const { return std::accumulate(sizes.begin(), sizes.end(), 0); }
  long long joint_actions() const {
    long long p = 1;
    for (int s : sizes) p *= s;
    return p;
  }
};

using FactoredAction = std::vector<std::int32_t>;

struct ModelShape {
  int obs_dim = 0;
  int hidden_dim = 0;   // recurrent-state plumbing; 0 = feedforward
  int trunk_hidden = 64;
  ActionHeadsSpec heads;

  int n_params() const {
    const int h = trunk_hidden;
    int n = h * obs_dim + h;  // W1, b1
    n += h * h + h;           // W2, b2
    n += heads.logits_dim() * h + heads.logits_dim();
    n += h + 1;  // value head
    return n;
  }

  std::uint64_t spec_hash() const {
    std::vector<std::int64_t> key = {obs_dim, hidden_dim, trunk_hidden};
    for (int s : heads.sizes) key.push_back(s);
    return fnv1a64(key.data(), key.size() * sizeof(std::int64_t));
  }
};

// Offsets of each weight block inside the flat parameter vector.
struct ParamLayout {
  int w1, b1, w2, b2, wh, bh, wv, bv, total;
  std::vector<int> head_w_off, head_b_off;

  explicit ParamLayout(const ModelShape& s) {
    const int h = s.trunk_hidden;
    const int ld = s.heads.logits_dim();
    w1 = 0;
    b1 = w1 + h * s.obs_dim;
    w2 = b1 + h;
    b2 = w2 + h * h;
    wh = b2 + h;
    bh = wh + ld * h;
    wv = bh + ld;
    bv = wv + h;
    total = bv + 1;
    int wo = wh, bo = bh;
    for (int n : s.heads.sizes) {
      head_w_off.push_back(wo);
      head_b_off.push_back(bo);
      wo += n * h;
      bo += n;
    }
  }
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double grad_clip = 4.0;  // global-norm threshold, 0 disables
};

struct AdamState {
  std::vector<double> m, v;
  std::int64_t t = 0;
};

struct PolicyParams {
  ModelShape shape;
  std::vector<double> theta;  // actor + critic, one flat vector
  std::int64_t version = 0;   // SGD-step counter
  AdamState adam;
};

// Scaled-uniform init in the Glorot style: gain 1.0 on the trunk, 0.01 on
// the heads and value layer so the initial policy is near-uniform.
inline PolicyParams init_params(const ModelShape& shape, std::uint64_t seed) {
  PolicyParams p;
  p.shape = shape;
  ParamLayout L(shape);
  p.theta.assign(L.total, 0.0);
  p.adam.m.assign(L.total, 0.0);
  p.adam.v.assign(L.total, 0.0);
  std::mt19937_64 rng(derive_seed(seed, 0xA11CE));

  auto fill = [&](int off, int rows, int cols, double gain) {
    const double a = gain * std::sqrt(6.0 / (rows + cols));
    std::uniform_real_distribution<double> dist(-a, a);
    for (int i = 0; i < rows * cols; ++i) p.theta[off + i] = dist(rng);
  };
  const int h = shape.trunk_hidden;
  fill(L.w1, h, shape.obs_dim, 1.0);
  fill(L.w2, h, h, 1.0);
  for (int j = 0; j < shape.heads.n_heads(); ++j)
    fill(L.head_w_off[j], shape.heads.sizes[j], h, 0.01);
  fill(L.wv, 1, h, 0.01);
  return p;
}

struct ForwardOutput {
  std::vector<double> logits;  // concatenated per head
  double value = 0.0;
  std::vector<double> next_hidden;  // passthrough (no recurrence implemented)
};

// Activations cached by forward_batch for the backward pass.
struct ForwardCache {
  int batch = 0;
  std::vector<double> obs;  // copy of inputs, [B x obs_dim]
  std::vector<double> h1;   // [B x H]
  std::vector<double> h2;   // [B x H]
  std::vector<double> logits;  // [B x logits_dim]
  std::vector<double> values;  // [B]
};

namespace detail {

inline void matvec(const double* w, const double* x, const double* b, double* y, int rows,
                   int cols) {
  for (int r = 0; r < rows; ++r) {
    double acc = b ? b[r] : 0.0;
    const double* wr = w + static_cast<std::size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) acc += wr[c] * x[c];
    y[r] = acc;
  }
}

}  // namespace detail

// Batched deterministic forward pass. NaN observations are treated as slot
// corruption and rejected hard.
inline void forward_batch(const PolicyParams& p, std::span<const double> obs_batch, int batch,
                          ForwardCache& cache) {
  const ModelShape& s = p.shape;
  APPO_CHECK(batch >= 1, "forward needs batch >= 1");
  APPO_CHECK(obs_batch.size() == static_cast<std::size_t>(batch) * s.obs_dim,
             "obs batch size mismatch");
  for (double x : obs_batch)
    if (!is_finite(x)) throw NumericError("forward: non-finite observation (corrupt slot?)");

  ParamLayout L(s);
  const int h = s.trunk_hidden;
  const int ld = s.heads.logits_dim();
  cache.batch = batch;
  cache.obs.assign(obs_batch.begin(), obs_batch.end());
  cache.h1.resize(static_cast<std::size_t>(batch) * h);
  cache.h2.resize(static_cast<std::size_t>(batch) * h);
  cache.logits.resize(static_cast<std::size_t>(batch) * ld);
  cache.values.resize(batch);

  const double* th = p.theta.data();
  for (int i = 0; i < batch; ++i) {
    const double* x = obs_batch.data() + static_cast<std::size_t>(i) * s.obs_dim;
    double* h1 = cache.h1.data() + static_cast<std::size_t>(i) * h;
    double* h2 = cache.h2.data() + static_cast<std::size_t>(i) * h;
    double* lg = cache.logits.data() + static_cast<std::size_t>(i) * ld;

    detail::matvec(th + L.w1, x, th + L.b1, h1, h, s.obs_dim);
    for (int k = 0; k < h; ++k) h1[k] = std::tanh(h1[k]);
    detail::matvec(th + L.w2, h1, th + L.b2, h2, h, h);
    for (int k = 0; k < h; ++k) h2[k] = std::tanh(h2[k]);
    detail::matvec(th + L.wh, h2, th + L.bh, lg, ld, h);
    double v = th[L.bv];
    for (int k = 0; k < h; ++k) v += th[L.wv + k] * h2[k];
    cache.values[i] = v;
  }
}

inline ForwardOutput forward(const PolicyParams& p, std::span<const double> obs,
                             std::span<const double> hidden) {
  ForwardCache cache;
  forward_batch(p, obs, 1, cache);
  ForwardOutput out;
  out.logits = std::move(cache.logits);
  out.value = cache.values[0];
  out.next_hidden.assign(hidden.begin(), hidden.end());  // h' = h
  return out;
}

// Stable per-head softmax into probs (same concatenated layout as logits).
inline void softmax_heads(const ActionHeadsSpec& heads, std::span<const double> logits,
                          std::span<double> probs) {
  int off = 0;
  for (int n : heads.sizes) {
    double mx = logits[off];
    for (int i = 1; i < n; ++i) mx = std::max(mx, logits[off + i]);
    double z = 0.0;
    for (int i = 0; i < n; ++i) {
      probs[off + i] = std::exp(logits[off + i] - mx);
      z += probs[off + i];
    }
    for (int i = 0; i < n; ++i) probs[off + i] /= z;
    off += n;
  }
}

// One sub-action per head, sampled independently; the joint log-prob is the
// sum of per-head log-probs.
inline std::pair<FactoredAction, double> sample_action(const ActionHeadsSpec& heads,
                                                       std::span<const double> logits,
                                                       std::mt19937_64& rng) {
  FactoredAction action(heads.n_heads());
  double joint_logp = 0.0;
  std::vector<double> probs(logits.size());
  softmax_heads(heads, logits, probs);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  int off = 0;
  for (int j = 0; j < heads.n_heads(); ++j) {
    const int n = heads.sizes[j];
    const double u = uni(rng);
    double cum = 0.0;
    int chosen = n - 1;
    for (int i = 0; i < n; ++i) {
      cum += probs[off + i];
      if (u < cum) {
        chosen = i;
        break;
      }
    }
    action[j] = chosen;
    joint_logp += std::log(std::max(probs[off + chosen], 1e-300));
    off += n;
  }
  return {std::move(action), joint_logp};
}

// Joint log-prob of a given action plus the summed per-head entropy (exact
// joint entropy of the independent product distribution).
inline std::pair<double, double> log_prob_and_entropy(const ActionHeadsSpec& heads,
                                                      std::span<const double> logits,
                                                      const FactoredAction& action) {
  APPO_CHECK(static_cast<int>(action.size()) == heads.n_heads(), "action arity mismatch");
  std::vector<double> probs(logits.size());
  softmax_heads(heads, logits, probs);
  double logp = 0.0, entropy = 0.0;
  int off = 0;
  for (int j = 0; j < heads.n_heads(); ++j) {
    const int n = heads.sizes[j];
    APPO_CHECK(action[j] >= 0 && action[j] < n, "action index out of range for head");
    logp += std::log(std::max(probs[off + action[j]], 1e-300));
    for (int i = 0; i < n; ++i) {
      const double p = probs[off + i];
      if (p > 0.0) entropy -= p * std::log(p);
    }
    off += n;
  }
  return {logp, entropy};
}

// Training batch as flat arrays, one row per sample.
struct SampleBatch {
  int batch = 0;
  std::vector<double> obs;             // [B x obs_dim]
  std::vector<std::int32_t> actions;   // [B x n_heads]
  std::vector<double> behavior_logp;   // [B]
  std::vector<double> advantages;      // [B] (pg_adv or nstep)
  std::vector<double> v_targets;       // [B] (v_s)
};

struct GradientResult {
  std::vector<double> grad;
  LossComponents loss;
  double mean_ratio = 0.0;
};

// Exact analytic gradient of the composed loss. Advantages and value
// targets are constants here (they were produced by vtrace on the same
// forward values, but the gradient does not flow through them).
inline GradientResult compute_gradients(const PolicyParams& p, const SampleBatch& batch,
                                        const LossConfig& cfg) {
  const ModelShape& s = p.shape;
  const ParamLayout L(s);
  const int B = batch.batch;
  const int h = s.trunk_hidden;
  const int ld = s.heads.logits_dim();
  const int nh = s.heads.n_heads();

  ForwardCache cache;
  forward_batch(p, batch.obs, B, cache);

  GradientResult out;
  out.grad.assign(L.total, 0.0);
  double* g = out.grad.data();
  const double* th = p.theta.data();
  const double invB = 1.0 / B;

  std::vector<double> probs(ld), dlogits(ld), dh2(h), dz2(h), dh1(h), dz1(h);
  double policy_loss = 0.0, value_loss = 0.0, entropy_sum = 0.0, ratio_sum = 0.0;

  for (int i = 0; i < B; ++i) {
    const double* lg = cache.logits.data() + static_cast<std::size_t>(i) * ld;
    const double* x = cache.obs.data() + static_cast<std::size_t>(i) * s.obs_dim;
    const double* h1 = cache.h1.data() + static_cast<std::size_t>(i) * h;
    const double* h2 = cache.h2.data() + static_cast<std::size_t>(i) * h;
    const std::int32_t* act = batch.actions.data() + static_cast<std::size_t>(i) * nh;

    softmax_heads(s.heads, {lg, static_cast<std::size_t>(ld)}, probs);

    // target log-prob and entropy under current params
    double logp = 0.0, entropy = 0.0;
    {
      int off = 0;
      for (int j = 0; j < nh; ++j) {
        const int n = s.heads.sizes[j];
        logp += std::log(std::max(probs[off + act[j]], 1e-300));
        for (int k = 0; k < n; ++k)
          if (probs[off + k] > 0.0) entropy -= probs[off + k] * std::log(probs[off + k]);
        off += n;
      }
    }

    const double adv = batch.advantages[i];
    const double ratio = importance_ratio(logp, batch.behavior_logp[i]);
    const double dsur_dratio = ppo_clip_dratio(ratio, adv, cfg.clip);
    // dL/dlogp = -(1/B) * dsur/dratio * dratio/dlogp, with dratio/dlogp = ratio
    const double dL_dlogp = -invB * dsur_dratio * ratio;

    policy_loss -= ppo_clip_objective(ratio, adv, cfg.clip);
    entropy_sum += entropy;
    ratio_sum += ratio;

    const double verr = cache.values[i] - batch.v_targets[i];
    value_loss += verr * verr;
    const double dL_dvalue = cfg.value_coef * invB * 2.0 * verr;

    // per-head logit gradients: policy term + entropy bonus
    {
      int off = 0;
      for (int j = 0; j < nh; ++j) {
        const int n = s.heads.sizes[j];
        double head_entropy = 0.0;
        for (int k = 0; k < n; ++k)
          if (probs[off + k] > 0.0) head_entropy -= probs[off + k] * std::log(probs[off + k]);
        for (int k = 0; k < n; ++k) {
          const double pk = probs[off + k];
          const double dlogp_dz = (k == act[j] ? 1.0 : 0.0) - pk;
          const double dH_dz = pk > 0.0 ? -pk * (std::log(pk) + head_entropy) : 0.0;
          dlogits[off + k] = dL_dlogp * dlogp_dz - cfg.entropy_coef * invB * dH_dz;
        }
        off += n;
      }
    }

    // backward through heads into trunk
    std::fill(dh2.begin(), dh2.end(), 0.0);
    for (int r = 0; r < ld; ++r) {
      const double d = dlogits[r];
      if (d == 0.0) continue;
      const double* wr = th + L.wh + static_cast<std::size_t>(r) * h;
      double* gw = g + L.wh + static_cast<std::size_t>(r) * h;
      for (int k = 0; k < h; ++k) {
        dh2[k] += wr[k] * d;
        gw[k] += d * h2[k];
      }
      g[L.bh + r] += d;
    }
    for (int k = 0; k < h; ++k) {
      dh2[k] += th[L.wv + k] * dL_dvalue;
      g[L.wv + k] += dL_dvalue * h2[k];
    }
    g[L.bv] += dL_dvalue;

    for (int k = 0; k < h; ++k) dz2[k] = dh2[k] * (1.0 - h2[k] * h2[k]);
    std::fill(dh1.begin(), dh1.end(), 0.0);
    for (int r = 0; r < h; ++r) {
      const double d = dz2[r];
      if (d == 0.0) continue;
      const double* wr = th + L.w2 + static_cast<std::size_t>(r) * h;
      double* gw = g + L.w2 + static_cast<std::size_t>(r) * h;
      for (int k = 0; k < h; ++k) {
        dh1[k] += wr[k] * d;
        gw[k] += d * h1[k];
      }
      g[L.b2 + r] += d;
    }
    for (int k = 0; k < h; ++k) dz1[k] = dh1[k] * (1.0 - h1[k] * h1[k]);
    for (int r = 0; r < h; ++r) {
      const double d = dz1[r];
      if (d == 0.0) continue;
      double* gw = g + L.w1 + static_cast<std::size_t>(r) * s.obs_dim;
      for (int k = 0; k < s.obs_dim; ++k) gw[k] += d * x[k];
      g[L.b1 + r] += d;
    }
  }

  for (double gv : out.grad)
    if (!is_finite(gv)) throw NumericError("compute_gradients: non-finite gradient");

  out.loss.policy = policy_loss * invB;
  out.loss.value = cfg.value_coef * value_loss * invB;
  out.loss.entropy = entropy_sum * invB;
  out.loss.total = out.loss.policy + out.loss.value - cfg.entropy_coef * out.loss.entropy;
  out.mean_ratio = ratio_sum * invB;
  return out;
}

// Global-norm clip followed by one Adam update; bumps the version counter.
inline void optimizer_step(PolicyParams& p, std::span<const double> grads, const AdamConfig& cfg) {
  APPO_CHECK(grads.size() == p.theta.size(), "gradient size mismatch");
  for (double gv : grads)
    if (!is_finite(gv)) throw NumericError("optimizer_step: non-finite gradient");

  double sq = 0.0;
  for (double gv : grads) sq += gv * gv;
  const double norm = std::sqrt(sq);
  double scale = 1.0;
  if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) scale = cfg.grad_clip / norm;

  AdamState& st = p.adam;
  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < p.theta.size(); ++i) {
    const double gi = grads[i] * scale;
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * gi;
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * gi * gi;
    const double mhat = st.m[i] / bc1;
    const double vhat = st.v[i] / bc2;
    p.theta[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
  p.version += 1;
}

// Single-writer/multi-reader parameter publication with seqlock semantics:
// readers retry while the sequence is odd or changed mid-copy, so a fetch
// never observes a torn mix of two versions. The backing memory may be an
// anonymous shared mapping, making cross-process publication work unchanged.
class ParamStore {
 public:
  struct Header {
    std::atomic<std::uint64_t> seq;
    std::atomic<std::int64_t> version;
    std::uint64_t checksum;
    std::uint64_t n_params;
  };

  static std::size_t bytes_required(std::size_t n_params) {
    return sizeof(Header) + n_params * sizeof(double);
  }

  ParamStore(void* mem, std::size_t bytes, std::size_t n_params, bool init)
      : h_(static_cast<Header*>(mem)),
        data_(reinterpret_cast<double*>(static_cast<std::byte*>(mem) + sizeof(Header))),
        n_(n_params) {
    APPO_CHECK(bytes >= bytes_required(n_params), "param store memory too small");
    if (init) {
      h_->seq.store(0);
      h_->version.store(-1);  // nothing published yet
      h_->checksum = 0;
      h_->n_params = n_params;
    }
  }

  void publish(const PolicyParams& p) {
    APPO_CHECK(p.theta.size() == n_, "publish: parameter count mismatch");
    h_->seq.fetch_add(1, std::memory_order_acq_rel);  // odd: write in progress
    std::memcpy(data_, p.theta.data(), n_ * sizeof(double));
    h_->checksum = fnv1a64(data_, n_ * sizeof(double));
    h_->version.store(p.version, std::memory_order_release);
    h_->seq.fetch_add(1, std::memory_order_acq_rel);
  }

  // Copies the newest published vector; returns its version, or -1 if
  // nothing was published yet.
  std::int64_t fetch(std::vector<double>& theta_out) const {
    theta_out.resize(n_);
    while (true) {
      const std::uint64_t s0 = h_->seq.load(std::memory_order_acquire);
      if (s0 & 1) continue;
      if (h_->version.load(std::memory_order_acquire) < 0) return -1;
      std::memcpy(theta_out.data(), data_, n_ * sizeof(double));
      const std::int64_t ver = h_->version.load(std::memory_order_acquire);
      std::atomic_thread_fence(std::memory_order_acquire);
      if (h_->seq.load(std::memory_order_acquire) == s0) return ver;
    }
  }

  std::int64_t version() const { return h_->version.load(std::memory_order_acquire); }
  std::uint64_t checksum() const { return h_->checksum; }
  std::size_t n_params() const { return n_; }

 private:
  Header* h_;
  double* data_;
  std::size_t n_;
};

// Owning wrapper pairing a ParamStore with its backing memory.
class ParamStoreOwner {
 public:
  ParamStoreOwner(std::size_t n_params, bool shared = false)
      : mem_(shared ? SharedMem_anonymous(n_params) : SharedMem_heap(n_params)),
        store_(mem_.data(), mem_.size(), n_params, true) {}

  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }

 private:
  static SharedMem SharedMem_heap(std::size_t n) {
    return SharedMem::heap(ParamStore::bytes_required(n));
  }
  static SharedMem SharedMem_anonymous(std::size_t n) {
    return SharedMem::anonymous_shared(ParamStore::bytes_required(n));
  }

  SharedMem mem_;
  ParamStore store_;
};

// --- checkpoints -----------------------------------------------------------

inline constexpr std::uint64_t kCheckpointMagic = 0x4150504F434B5031ULL;  // "APPOCKP1"

inline void save_checkpoint(const std::string& path, const PolicyParams& p) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  auto put_u64 = [&](std::uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); };
  auto put_i64 = [&](std::int64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); };
  put_u64(kCheckpointMagic);
  put_u64(p.shape.spec_hash());
  put_i64(p.version);
  put_i64(p.adam.t);
  put_u64(p.theta.size());
  put_u64(fnv1a64(p.theta.data(), p.theta.size() * sizeof(double)));
  auto put_vec = [&](const std::vector<double>& v) {
    f.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
  };
  put_vec(p.theta);
  put_vec(p.adam.m);
  put_vec(p.adam.v);
  if (!f) throw std::runtime_error("short write on checkpoint: " + path);
}

// Loads into a params struct whose shape must match the stored spec hash.
inline PolicyParams load_checkpoint(const std::string& path, const ModelShape& shape) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  auto get_u64 = [&] {
    std::uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    return v;
  };
  auto get_i64 = [&] {
    std::int64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    return v;
  };
  if (get_u64() != kCheckpointMagic) throw std::runtime_error("not a checkpoint file: " + path);
  const std::uint64_t hash = get_u64();
  if (hash != shape.spec_hash())
    throw ConfigError("checkpoint spec hash mismatch (incompatible model shape): " + path);
  PolicyParams p;
  p.shape = shape;
  p.version = get_i64();
  p.adam.t = get_i64();
  const std::uint64_t n = get_u64();
  if (n != static_cast<std::uint64_t>(shape.n_params()))
    throw ConfigError("checkpoint parameter count mismatch: " + path);
  const std::uint64_t checksum = get_u64();
  auto get_vec = [&](std::vector<double>& v) {
    v.resize(n);
    f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  };
  get_vec(p.theta);
  get_vec(p.adam.m);
  get_vec(p.adam.v);
  if (!f) throw std::runtime_error("truncated checkpoint: " + path);
  if (fnv1a64(p.theta.data(), p.theta.size() * sizeof(double)) != checksum)
    throw std::runtime_error("checkpoint checksum mismatch: " + path);
  return p;
}

}  // namespace appo
