#pragma once

// Trajectory storage: every rollout writes T fixed-shape steps into a
// preallocated region slot, seals it, and hands the learner nothing but the
// slot index. Views interpret raw slot bytes in place; nothing is copied
// until the learner gathers its minibatch.

#include <atomic>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "appo/common.hpp"
#include "appo/transport.hpp"

namespace appo {

struct TrajectoryShape {
  std::uint32_t T = 32;
  std::uint32_t obs_dim = 0;
  std::uint32_t hidden_dim = 0;
  std::uint32_t n_heads = 0;

  bool operator==(const TrajectoryShape&) const = default;
};

struct StepRecord {
  std::vector<double> obs;
  std::vector<double> hidden;
  std::vector<std::int32_t> action;
  double reward = 0.0;
  double behavior_logp = 0.0;
  bool done = false;
  std::int64_t policy_version = 0;
};

namespace traj_layout {

// In-slot header occupying the first 64 bytes of every trajectory slot.
struct Header {
  std::uint32_t T;
  std::uint32_t obs_dim;
  std::uint32_t hidden_dim;
  std::uint32_t n_heads;
  std::uint32_t step_count;
  std::uint32_t env_id;
  std::uint32_t worker_id;
  std::uint32_t policy_id;
  std::uint32_t agent_id;
  std::uint32_t flags;  // bit0: bootstrap set
};
static_assert(sizeof(Header) <= 64);

constexpr std::size_t kHeaderBytes = 64;

inline std::size_t align8(std::size_t x) { return (x + 7) & ~std::size_t{7}; }

struct Offsets {
  std::size_t obs, hidden, actions, rewards, logp, dones, versions, boot_obs, boot_hidden, total;

  explicit Offsets(const TrajectoryShape& s) {
    std::size_t o = kHeaderBytes;
    obs = o;
    o += align8(std::size_t{s.T} * s.obs_dim * sizeof(double));
    hidden = o;
    o += align8(std::size_t{s.T} * s.hidden_dim * sizeof(double));
    actions = o;
    o += align8(std::size_t{s.T} * s.n_heads * sizeof(std::int32_t));
    rewards = o;
    o += align8(std::size_t{s.T} * sizeof(double));
    logp = o;
    o += align8(std::size_t{s.T} * sizeof(double));
    dones = o;
    o += align8(std::size_t{s.T} * sizeof(std::uint8_t));
    versions = o;
    o += align8(std::size_t{s.T} * sizeof(std::int64_t));
    boot_obs = o;
    o += align8(std::size_t{s.obs_dim} * sizeof(double));
    boot_hidden = o;
    o += align8(std::size_t{s.hidden_dim} * sizeof(double));
    total = o;
  }
};

}  // namespace traj_layout

inline std::uint64_t trajectory_slot_bytes(const TrajectoryShape& s) {
  return traj_layout::Offsets(s).total;
}

// Typed view over one raw slot. Holds no ownership; the pool's state machine
// decides who may call what.
class TrajectorySlotView {
 public:
  TrajectorySlotView() = default;
  TrajectorySlotView(std::byte* base, const TrajectoryShape& shape)
      : base_(base), shape_(shape), off_(shape) {}

  // Producer-side reset when a freshly acquired slot starts a new rollout.
  void begin(std::uint32_t env_id, std::uint32_t worker_id, std::uint32_t policy_id,
             std::uint32_t agent_id) {
    auto* h = header();
    h->T = shape_.T;
    h->obs_dim = shape_.obs_dim;
    h->hidden_dim = shape_.hidden_dim;
    h->n_heads = shape_.n_heads;
    h->step_count = 0;
    h->env_id = env_id;
    h->worker_id = worker_id;
    h->policy_id = policy_id;
    h->agent_id = agent_id;
    h->flags = 0;
  }

  std::uint32_t step_count() const { return header()->step_count; }
  std::uint32_t env_id() const { return header()->env_id; }
  std::uint32_t worker_id() const { return header()->worker_id; }
  std::uint32_t policy_id() const { return header()->policy_id; }
  std::uint32_t agent_id() const { return header()->agent_id; }
  const TrajectoryShape& shape() const { return shape_; }

  std::span<double> obs_row(std::uint32_t t) {
    return {ptr<double>(off_.obs) + std::size_t{t} * shape_.obs_dim, shape_.obs_dim};
  }
  std::span<const double> obs_row(std::uint32_t t) const {
    return {ptr<const double>(off_.obs) + std::size_t{t} * shape_.obs_dim, shape_.obs_dim};
  }
  std::span<double> hidden_row(std::uint32_t t) {
    return {ptr<double>(off_.hidden) + std::size_t{t} * shape_.hidden_dim, shape_.hidden_dim};
  }
  std::span<std::int32_t> action_row(std::uint32_t t) {
    return {ptr<std::int32_t>(off_.actions) + std::size_t{t} * shape_.n_heads, shape_.n_heads};
  }
  std::span<const std::int32_t> action_row(std::uint32_t t) const {
    return {ptr<const std::int32_t>(off_.actions) + std::size_t{t} * shape_.n_heads,
            shape_.n_heads};
  }
  std::span<double> rewards() { return {ptr<double>(off_.rewards), shape_.T}; }
  std::span<const double> rewards() const { return {ptr<const double>(off_.rewards), shape_.T}; }
  std::span<double> behavior_logp() { return {ptr<double>(off_.logp), shape_.T}; }
  std::span<const double> behavior_logp() const {
    return {ptr<const double>(off_.logp), shape_.T};
  }
  std::span<std::uint8_t> dones() { return {ptr<std::uint8_t>(off_.dones), shape_.T}; }
  std::span<const std::uint8_t> dones() const {
    return {ptr<const std::uint8_t>(off_.dones), shape_.T};
  }
  std::span<std::int64_t> versions() { return {ptr<std::int64_t>(off_.versions), shape_.T}; }
  std::span<const std::int64_t> versions() const {
    return {ptr<const std::int64_t>(off_.versions), shape_.T};
  }
  std::span<double> bootstrap_obs() { return {ptr<double>(off_.boot_obs), shape_.obs_dim}; }
  std::span<const double> bootstrap_obs() const {
    return {ptr<const double>(off_.boot_obs), shape_.obs_dim};
  }
  std::span<double> bootstrap_hidden() {
    return {ptr<double>(off_.boot_hidden), shape_.hidden_dim};
  }

  // Stores one complete step. Steps must arrive strictly in order; the
  // behavior log-prob is a discrete log-density, so it cannot exceed zero.
  void write_step(std::uint32_t t, const StepRecord& rec) {
    auto* h = header();
    APPO_CHECK(t < shape_.T, "write_step: index beyond rollout length");
    APPO_CHECK(t == h->step_count, "write_step: out-of-order step write");
    APPO_CHECK(rec.obs.size() == shape_.obs_dim, "write_step: obs dim mismatch");
    APPO_CHECK(rec.hidden.size() == shape_.hidden_dim, "write_step: hidden dim mismatch");
    APPO_CHECK(rec.action.size() == shape_.n_heads, "write_step: action arity mismatch");
    APPO_CHECK(rec.behavior_logp <= 1e-6, "write_step: behavior log-prob above zero");
    if (t > 0)
      APPO_CHECK(rec.policy_version >= versions()[t - 1],
                 "write_step: policy_version must be non-decreasing within a trajectory");
    for (double x : rec.obs)
      if (!is_finite(x)) throw NumericError("write_step: non-finite observation");

    std::memcpy(obs_row(t).data(), rec.obs.data(), shape_.obs_dim * sizeof(double));
    if (shape_.hidden_dim > 0)
      std::memcpy(hidden_row(t).data(), rec.hidden.data(), shape_.hidden_dim * sizeof(double));
    std::memcpy(action_row(t).data(), rec.action.data(), shape_.n_heads * sizeof(std::int32_t));
    rewards()[t] = rec.reward;
    behavior_logp()[t] = rec.behavior_logp;
    dones()[t] = rec.done ? 1 : 0;
    versions()[t] = rec.policy_version;
    h->step_count = t + 1;
  }

  StepRecord read_step(std::uint32_t t) const {
    APPO_CHECK(t < header()->step_count, "read_step: step not written");
    StepRecord rec;
    auto o = obs_row(t);
    rec.obs.assign(o.begin(), o.end());
    auto self = const_cast<TrajectorySlotView*>(this);
    auto hd = self->hidden_row(t);
    rec.hidden.assign(hd.begin(), hd.end());
    auto a = action_row(t);
    rec.action.assign(a.begin(), a.end());
    rec.reward = rewards()[t];
    rec.behavior_logp = behavior_logp()[t];
    rec.done = dones()[t] != 0;
    rec.policy_version = versions()[t];
    return rec;
  }

  void set_bootstrap(std::span<const double> obs, std::span<const double> hidden) {
    APPO_CHECK(obs.size() == shape_.obs_dim, "bootstrap obs dim mismatch");
    APPO_CHECK(hidden.size() == shape_.hidden_dim, "bootstrap hidden dim mismatch");
    std::memcpy(bootstrap_obs().data(), obs.data(), obs.size() * sizeof(double));
    if (shape_.hidden_dim > 0)
      std::memcpy(bootstrap_hidden().data(), hidden.data(), hidden.size() * sizeof(double));
    header()->flags |= 1;
  }

  bool bootstrap_set() const { return header()->flags & 1; }
  bool complete() const { return step_count() == shape_.T && bootstrap_set(); }

 private:
  traj_layout::Header* header() { return reinterpret_cast<traj_layout::Header*>(base_); }
  const traj_layout::Header* header() const {
    return reinterpret_cast<const traj_layout::Header*>(base_);
  }
  template <typename T>
  T* ptr(std::size_t off) const {
    return reinterpret_cast<T*>(base_ + off);
  }

  std::byte* base_ = nullptr;
  TrajectoryShape shape_;
  traj_layout::Offsets off_{TrajectoryShape{}};
};

// Region + pool + shape bundled; owns nothing beyond its backing memory.
class TrajectoryStore {
 public:
  TrajectoryStore() = default;
  TrajectoryStore(const TrajectoryShape& shape, std::uint32_t n_slots, bool shared = false)
      : shape_(shape),
        region_(shared ? SlotRegion::shared(n_slots, trajectory_slot_bytes(shape))
                       : SlotRegion::on_heap(n_slots, trajectory_slot_bytes(shape))),
        pool_mem_(shared ? SharedMem::anonymous_shared(SharedBufferPool::bytes_required(n_slots))
                         : SharedMem::heap(SharedBufferPool::bytes_required(n_slots))),
        pool_(SharedBufferPool::create(pool_mem_.data(),
                                       SharedBufferPool::bytes_required(n_slots), n_slots)) {}

  TrajectorySlotView view(std::uint32_t slot_id) {
    return TrajectorySlotView(region_.slot(slot_id), shape_);
  }
  SharedBufferPool& pool() { return *pool_; }
  SlotRegion& region() { return region_; }
  const TrajectoryShape& shape() const { return shape_; }
  std::uint32_t n_slots() const { return region_.n_slots(); }

 private:
  TrajectoryShape shape_;
  SlotRegion region_;
  SharedMem pool_mem_;
  SharedBufferPool* pool_ = nullptr;
};

// Marks the slot sealed and routes a TrajectoryReady message to the learner
// queue of the trajectory's policy.
inline void seal_trajectory(TrajectoryStore& store, std::uint32_t slot_id, BoundedFifo& learner_q,
                            std::uint32_t seq = 0) {
  auto v = store.view(slot_id);
  APPO_CHECK(v.complete(), "seal: trajectory incomplete (missing steps or bootstrap)");
  store.pool().seal(slot_id);
  SlotIndexMessage m;
  m.kind = static_cast<std::uint32_t>(MsgKind::TrajectoryReady);
  m.policy_id = v.policy_id();
  m.slot_id = slot_id;
  m.worker_id = v.worker_id();
  m.seq = seq;
  m.step_lo = 0;
  m.step_hi = v.shape().T;
  while (learner_q.push(m, kDefaultPushTimeout) != PushResult::Ok) {
  }
}

struct Minibatch {
  std::vector<std::uint32_t> slot_ids;
  std::vector<TrajectorySlotView> views;
  std::int64_t min_version = 0;
  std::int64_t max_version = 0;
  std::uint32_t n_samples = 0;
};

// Collects N_batch/T sealed trajectories in arrival order (strict FIFO,
// oldest first). Returns nullopt when a Stop message arrives or `stop` is
// raised; slots already collected are released so shutdown never leaks.
inline std::optional<Minibatch> assemble_minibatch(BoundedFifo& ready_q, TrajectoryStore& store,
                                                   std::uint32_t n_batch,
                                                   const std::atomic<bool>& stop,
                                                   Duration poll = kDefaultPopTimeout) {
  const std::uint32_t T = store.shape().T;
  APPO_CHECK(n_batch % T == 0, "minibatch size must be a multiple of the rollout length");
  const std::uint32_t want = n_batch / T;

  Minibatch mb;
  mb.min_version = std::numeric_limits<std::int64_t>::max();
  mb.max_version = std::numeric_limits<std::int64_t>::min();

  auto abort = [&] {
    for (std::uint32_t id : mb.slot_ids) store.pool().release(id);
    return std::nullopt;
  };

  SlotIndexMessage buf[64];
  while (mb.slot_ids.size() < want) {
    if (stop.load(std::memory_order_relaxed)) return abort();
    const std::size_t room = want - mb.slot_ids.size();
    const std::size_t n = ready_q.pop_many(buf, std::min<std::size_t>(room, 64), poll);
    for (std::size_t i = 0; i < n; ++i) {
      if (buf[i].msg_kind() == MsgKind::Stop) return abort();
      if (buf[i].msg_kind() != MsgKind::TrajectoryReady) continue;
      const auto id = static_cast<std::uint32_t>(buf[i].slot_id);
      store.pool().set_in_use(id);
      auto v = store.view(id);
      for (std::int64_t ver : v.versions()) {
        mb.min_version = std::min(mb.min_version, ver);
        mb.max_version = std::max(mb.max_version, ver);
      }
      mb.slot_ids.push_back(id);
      mb.views.push_back(v);
    }
  }
  mb.n_samples = want * T;
  return mb;
}

// Debug dump: 32-byte header (T, obs_dim, hidden_dim, n_heads as u32,
// remainder zero) followed by the packed little-endian arrays.
inline void dump_trajectory(const TrajectorySlotView& v, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open trajectory dump: " + path);
  const TrajectoryShape& s = v.shape();
  std::uint32_t head[8] = {s.T, s.obs_dim, s.hidden_dim, s.n_heads, 0, 0, 0, 0};
  f.write(reinterpret_cast<const char*>(head), 32);

  auto self = const_cast<TrajectorySlotView&>(v);
  auto put = [&](const void* p, std::size_t bytes) {
    f.write(static_cast<const char*>(p), static_cast<std::streamsize>(bytes));
  };
  for (std::uint32_t t = 0; t < s.T; ++t)
    put(v.obs_row(t).data(), s.obs_dim * sizeof(double));
  for (std::uint32_t t = 0; t < s.T; ++t)
    put(self.hidden_row(t).data(), s.hidden_dim * sizeof(double));
  for (std::uint32_t t = 0; t < s.T; ++t)
    put(v.action_row(t).data(), s.n_heads * sizeof(std::int32_t));
  put(v.rewards().data(), s.T * sizeof(double));
  put(v.behavior_logp().data(), s.T * sizeof(double));
  put(v.dones().data(), s.T * sizeof(std::uint8_t));
  put(v.versions().data(), s.T * sizeof(std::int64_t));
  put(v.bootstrap_obs().data(), s.obs_dim * sizeof(double));
  put(self.bootstrap_hidden().data(), s.hidden_dim * sizeof(double));
  if (!f) throw std::runtime_error("short write on trajectory dump: " + path);
}

}  // namespace appo
