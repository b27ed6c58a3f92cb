#pragma once

// Index-passing transport: components never exchange payloads, only small
// fixed-size messages naming slots in a preallocated shared buffer region.
// Queues and pools are constructed in place on caller-provided memory, which
// may be ordinary heap (threads in one process) or an anonymous MAP_SHARED
// mapping (workers forked into separate processes). Synchronization is a
// lock-guarded circular buffer with condition-based waiting; all pthread
// primitives are created PROCESS_SHARED so both layouts behave identically.

#include <pthread.h>
#include <sys/mman.h>
#include <time.h>

#include <cerrno>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <memory>
#include <new>
#include <optional>
#include <string>

#include "appo/common.hpp"

namespace appo {

enum class MsgKind : std::uint32_t {
  ObsRequest = 0,
  ActionReply = 1,
  TrajectoryReady = 2,
  ParamsPublished = 3,
  Stop = 4,
  EpisodeResult = 5,
};

// Fixed 64-byte record. Payload data never rides in messages; slot_id points
// into a shared buffer region instead, so no serialization happens anywhere.
struct SlotIndexMessage {
  std::uint32_t kind = 0;       // MsgKind
  std::uint32_t policy_id = 0;  // population index
  std::int64_t slot_id = -1;    // buffer-pool index (or -1)
  std::uint32_t worker_id = 0;
  std::uint32_t group_id = 0;   // env group (double buffering)
  std::uint32_t row = 0;        // row within an exchange slot
  std::uint32_t seq = 0;        // per-producer sequence number
  std::int64_t step_lo = 0;     // step range meta
  std::int64_t step_hi = 0;
  std::uint64_t tag = 0;        // free-form (env id, agent id, ...)
  std::uint64_t reserved = 0;

  MsgKind msg_kind() const { return static_cast<MsgKind>(kind); }
};
static_assert(sizeof(SlotIndexMessage) == 64, "messages are fixed 64-byte records");
static_assert(std::is_trivially_copyable_v<SlotIndexMessage>);

enum class PushResult { Ok, Full };

namespace detail {

inline void init_shared_mutex(pthread_mutex_t* mu) {
  pthread_mutexattr_t attr;
  pthread_mutexattr_init(&attr);
  pthread_mutexattr_setpshared(&attr, PTHREAD_PROCESS_SHARED);
  pthread_mutex_init(mu, &attr);
  pthread_mutexattr_destroy(&attr);
}

inline void init_shared_cond(pthread_cond_t* cv) {
  pthread_condattr_t attr;
  pthread_condattr_init(&attr);
  pthread_condattr_setpshared(&attr, PTHREAD_PROCESS_SHARED);
  pthread_condattr_setclock(&attr, CLOCK_MONOTONIC);
  pthread_cond_init(cv, &attr);
  pthread_condattr_destroy(&attr);
}

inline timespec abs_deadline(Duration timeout) {
  timespec ts;
  clock_gettime(CLOCK_MONOTONIC, &ts);
  auto ns = std::chrono::duration_cast<std::chrono::nanoseconds>(timeout).count();
  if (ns < 0) ns = 0;
  ts.tv_sec += ns / 1000000000LL;
  ts.tv_nsec += ns % 1000000000LL;
  if (ts.tv_nsec >= 1000000000LL) {
    ts.tv_sec += 1;
    ts.tv_nsec -= 1000000000LL;
  }
  return ts;
}

class MutexGuard {
 public:
  explicit MutexGuard(pthread_mutex_t* mu) : mu_(mu) { pthread_mutex_lock(mu_); }
  ~MutexGuard() { pthread_mutex_unlock(mu_); }
  MutexGuard(const MutexGuard&) = delete;
  MutexGuard& operator=(const MutexGuard&) = delete;

 private:
  pthread_mutex_t* mu_;
};

}  // namespace detail

// Bounded many-producers/few-consumers FIFO over a circular buffer of
// SlotIndexMessage. Head/tail are monotone counters; size = head - tail.
// pop_many removes its batch atomically with respect to other consumers.
class BoundedFifo {
 public:
  static std::size_t bytes_required(std::uint32_t capacity) {
    return header_bytes() + static_cast<std::size_t>(capacity) * sizeof(SlotIndexMessage);
  }

  // Placement-initializes a queue on zeroed memory of at least
  // bytes_required(capacity).
  static BoundedFifo* create(void* mem, std::size_t bytes, std::uint32_t capacity) {
    APPO_CHECK(capacity > 0, "BoundedFifo capacity must be positive");
    APPO_CHECK(bytes >= bytes_required(capacity), "BoundedFifo memory too small");
    auto* q = new (mem) BoundedFifo();
    q->capacity_ = capacity;
    q->head_ = 0;
    q->tail_ = 0;
    detail::init_shared_mutex(&q->mu_);
    detail::init_shared_cond(&q->not_empty_);
    detail::init_shared_cond(&q->not_full_);
    return q;
  }

  static BoundedFifo* attach(void* mem) { return static_cast<BoundedFifo*>(mem); }

  PushResult push(const SlotIndexMessage& msg, Duration timeout = kDefaultPushTimeout) {
    detail::MutexGuard lock(&mu_);
    if (head_ - tail_ >= capacity_) {
      timespec deadline = detail::abs_deadline(timeout);
      while (head_ - tail_ >= capacity_) {
        if (pthread_cond_timedwait(&not_full_, &mu_, &deadline) == ETIMEDOUT) {
          if (head_ - tail_ < capacity_) break;
          return PushResult::Full;
        }
      }
    }
    ring()[head_ % capacity_] = msg;
    ++head_;
    pthread_cond_signal(&not_empty_);
    return PushResult::Ok;
  }

  // Removes up to max_n oldest messages as one atomic batch. Returns the
  // number written to out; 0 means the timeout expired on an empty queue.
  std::size_t pop_many(SlotIndexMessage* out, std::size_t max_n,
                       Duration timeout = kDefaultPopTimeout) {
    APPO_CHECK(max_n >= 1, "pop_many requires max_n >= 1");
    detail::MutexGuard lock(&mu_);
    if (head_ == tail_) {
      timespec deadline = detail::abs_deadline(timeout);
      while (head_ == tail_) {
        if (pthread_cond_timedwait(&not_empty_, &mu_, &deadline) == ETIMEDOUT) {
          if (head_ != tail_) break;
          return 0;
        }
      }
    }
    std::size_t n = head_ - tail_;
    if (n > max_n) n = max_n;
    for (std::size_t i = 0; i < n; ++i) out[i] = ring()[(tail_ + i) % capacity_];
    tail_ += n;
    pthread_cond_broadcast(&not_full_);
    return n;
  }

  std::size_t size() const {
    detail::MutexGuard lock(&mu_);
    return head_ - tail_;
  }

  std::uint32_t capacity() const { return capacity_; }

  BoundedFifo(const BoundedFifo&) = delete;
  BoundedFifo& operator=(const BoundedFifo&) = delete;

 private:
  BoundedFifo() = default;

  static std::size_t header_bytes() {
    return (sizeof(BoundedFifo) + alignof(SlotIndexMessage) - 1) &
           ~(alignof(SlotIndexMessage) - 1);
  }
  SlotIndexMessage* ring() {
    return reinterpret_cast<SlotIndexMessage*>(reinterpret_cast<std::byte*>(this) +
                                               header_bytes());
  }

  mutable pthread_mutex_t mu_;
  pthread_cond_t not_empty_;
  pthread_cond_t not_full_;
  std::uint64_t head_;
  std::uint64_t tail_;
  std::uint32_t capacity_;
};

enum class SlotState : std::uint32_t { Free = 0, Writing = 1, Sealed = 2, InUseByLearner = 3 };

// Ownership bookkeeping for a preallocated slot array. A slot is writable by
// exactly one producer between acquire and seal; sealed contents are
// immutable until released back to Free. The pool itself never touches
// payload bytes.
class SharedBufferPool {
 public:
  static std::size_t bytes_required(std::uint32_t n_slots) {
    return header_bytes() + static_cast<std::size_t>(n_slots) * 2 * sizeof(std::uint32_t);
  }

  static SharedBufferPool* create(void* mem, std::size_t bytes, std::uint32_t n_slots) {
    APPO_CHECK(n_slots > 0, "pool needs at least one slot");
    APPO_CHECK(bytes >= bytes_required(n_slots), "pool memory too small");
    auto* p = new (mem) SharedBufferPool();
    p->n_slots_ = n_slots;
    p->n_free_ = n_slots;
    detail::init_shared_mutex(&p->mu_);
    detail::init_shared_cond(&p->slot_freed_);
    for (std::uint32_t i = 0; i < n_slots; ++i) {
      p->free_stack()[i] = n_slots - 1 - i;  // hand out low ids first
      p->states()[i] = static_cast<std::uint32_t>(SlotState::Free);
    }
    return p;
  }

  static SharedBufferPool* attach(void* mem) { return static_cast<SharedBufferPool*>(mem); }

  // Free -> Writing. nullopt signals Exhausted: the pool is undersized for
  // the current in-flight demand (see pool_slots_required).
  std::optional<std::uint32_t> try_acquire() {
    detail::MutexGuard lock(&mu_);
    if (n_free_ == 0) return std::nullopt;
    std::uint32_t id = free_stack()[--n_free_];
    states()[id] = static_cast<std::uint32_t>(SlotState::Writing);
    return id;
  }

  // Blocking acquire used by rollout workers for backpressure: when the
  // learner falls behind, producers throttle here instead of dropping data.
  std::optional<std::uint32_t> acquire_wait(Duration timeout) {
    detail::MutexGuard lock(&mu_);
    if (n_free_ == 0) {
      timespec deadline = detail::abs_deadline(timeout);
      while (n_free_ == 0) {
        if (pthread_cond_timedwait(&slot_freed_, &mu_, &deadline) == ETIMEDOUT) {
          if (n_free_ > 0) break;
          return std::nullopt;
        }
      }
    }
    std::uint32_t id = free_stack()[--n_free_];
    states()[id] = static_cast<std::uint32_t>(SlotState::Writing);
    return id;
  }

  void seal(std::uint32_t slot) { transition(slot, SlotState::Writing, SlotState::Sealed, "seal"); }

  void set_in_use(std::uint32_t slot) {
    transition(slot, SlotState::Sealed, SlotState::InUseByLearner, "set_in_use");
  }

  // Sealed or InUseByLearner -> Free. Releasing a Free or Writing slot is a
  // contract violation (double release, or releasing a live writer).
  void release(std::uint32_t slot) {
    detail::MutexGuard lock(&mu_);
    check_slot(slot);
    auto s = static_cast<SlotState>(states()[slot]);
    if (s != SlotState::Sealed && s != SlotState::InUseByLearner)
      throw ContractError("pool_release: slot " + std::to_string(slot) +
                          " is not Sealed/InUseByLearner (double release?)");
    states()[slot] = static_cast<std::uint32_t>(SlotState::Free);
    free_stack()[n_free_++] = slot;
    pthread_cond_signal(&slot_freed_);
  }

  SlotState state(std::uint32_t slot) const {
    detail::MutexGuard lock(&mu_);
    check_slot(slot);
    return static_cast<SlotState>(states()[slot]);
  }

  std::uint32_t n_free() const {
    detail::MutexGuard lock(&mu_);
    return n_free_;
  }

  std::uint32_t n_slots() const { return n_slots_; }

  SharedBufferPool(const SharedBufferPool&) = delete;
  SharedBufferPool& operator=(const SharedBufferPool&) = delete;

 private:
  SharedBufferPool() = default;

  void transition(std::uint32_t slot, SlotState from, SlotState to, const char* op) {
    detail::MutexGuard lock(&mu_);
    check_slot(slot);
    if (static_cast<SlotState>(states()[slot]) != from)
      throw ContractError(std::string(op) + ": slot " + std::to_string(slot) +
                          " not in required state");
    states()[slot] = static_cast<std::uint32_t>(to);
  }

  void check_slot(std::uint32_t slot) const {
    if (slot >= n_slots_)
      throw ContractError("slot id " + std::to_string(slot) + " out of range");
  }

  static std::size_t header_bytes() {
    return (sizeof(SharedBufferPool) + alignof(std::uint32_t) - 1) & ~std::size_t{3};
  }
  std::uint32_t* free_stack() {
    return reinterpret_cast<std::uint32_t*>(reinterpret_cast<std::byte*>(this) + header_bytes());
  }
  std::uint32_t* states() { return free_stack() + n_slots_; }
  const std::uint32_t* free_stack() const {
    return reinterpret_cast<const std::uint32_t*>(reinterpret_cast<const std::byte*>(this) +
                                                  header_bytes());
  }
  const std::uint32_t* states() const { return free_stack() + n_slots_; }

  mutable pthread_mutex_t mu_;
  pthread_cond_t slot_freed_;
  std::uint32_t n_slots_;
  std::uint32_t n_free_;
};

// Sizing rule: double buffering keeps up to 2 groups per worker in flight,
// each env needs its slot plus one being handed over, and the learner holds
// a full minibatch while it trains.
inline std::uint32_t pool_slots_required(std::uint32_t n_workers, std::uint32_t envs_per_worker,
                                         std::uint32_t learner_depth) {
  return 2 * n_workers * (envs_per_worker + 1) + learner_depth;
}

// Raw bytes backing queues/pools/params. Heap for single-process runs;
// anonymous MAP_SHARED for layouts where workers live in forked processes.
class SharedMem {
 public:
  SharedMem() = default;

  static SharedMem heap(std::size_t bytes) {
    SharedMem m;
    m.bytes_ = bytes;
    m.heap_.reset(new std::byte[bytes]());
    m.data_ = m.heap_.get();
    return m;
  }

  static SharedMem anonymous_shared(std::size_t bytes) {
    SharedMem m;
    m.bytes_ = bytes;
    void* p = ::mmap(nullptr, bytes, PROT_READ | PROT_WRITE, MAP_SHARED | MAP_ANONYMOUS, -1, 0);
    if (p == MAP_FAILED) throw std::runtime_error("mmap failed: " + std::string(strerror(errno)));
    std::memset(p, 0, bytes);
    m.data_ = static_cast<std::byte*>(p);
    m.mapped_ = true;
    return m;
  }

  ~SharedMem() {
    if (mapped_ && data_) ::munmap(data_, bytes_);
  }

  SharedMem(SharedMem&& o) noexcept { *this = std::move(o); }
  SharedMem& operator=(SharedMem&& o) noexcept {
    if (this != &o) {
      if (mapped_ && data_) ::munmap(data_, bytes_);
      heap_ = std::move(o.heap_);
      data_ = o.data_;
      bytes_ = o.bytes_;
      mapped_ = o.mapped_;
      o.data_ = nullptr;
      o.bytes_ = 0;
      o.mapped_ = false;
    }
    return *this;
  }
  SharedMem(const SharedMem&) = delete;
  SharedMem& operator=(const SharedMem&) = delete;

  std::byte* data() { return data_; }
  const std::byte* data() const { return data_; }
  std::size_t size() const { return bytes_; }
  bool valid() const { return data_ != nullptr; }

 private:
  std::unique_ptr<std::byte[]> heap_;
  std::byte* data_ = nullptr;
  std::size_t bytes_ = 0;
  bool mapped_ = false;
};

// Payload region with the documented byte-exact layout (see
// docs/shared_memory_layout.md): a 64-byte header followed by the slot
// array. External tools can attach and inspect live runs.
class SlotRegion {
 public:
  static constexpr std::uint32_t kMagic = 0xA5F0;
  static constexpr std::uint32_t kLayoutVersion = 1;
  static constexpr std::size_t kHeaderBytes = 64;

  struct Header {
    std::uint32_t magic;
    std::uint32_t version;
    std::uint32_t n_slots;
    std::uint32_t reserved0;
    std::uint64_t slot_bytes;
    // remainder of the 64-byte header is reserved zeros
  };
  static_assert(sizeof(Header) == 24);

  static std::size_t bytes_required(std::uint32_t n_slots, std::uint64_t slot_bytes) {
    return kHeaderBytes + static_cast<std::size_t>(n_slots) * slot_bytes;
  }

  SlotRegion() = default;

  // Formats the header onto fresh memory (heap or shared).
  static SlotRegion create(SharedMem mem, std::uint32_t n_slots, std::uint64_t slot_bytes) {
    APPO_CHECK(mem.size() >= bytes_required(n_slots, slot_bytes), "slot region memory too small");
    SlotRegion r;
    r.mem_ = std::move(mem);
    auto* h = reinterpret_cast<Header*>(r.mem_.data());
    h->magic = kMagic;
    h->version = kLayoutVersion;
    h->n_slots = n_slots;
    h->reserved0 = 0;
    h->slot_bytes = slot_bytes;
    return r;
  }

  static SlotRegion on_heap(std::uint32_t n_slots, std::uint64_t slot_bytes) {
    return create(SharedMem::heap(bytes_required(n_slots, slot_bytes)), n_slots, slot_bytes);
  }

  static SlotRegion shared(std::uint32_t n_slots, std::uint64_t slot_bytes) {
    return create(SharedMem::anonymous_shared(bytes_required(n_slots, slot_bytes)), n_slots,
                  slot_bytes);
  }

  const Header& header() const { return *reinterpret_cast<const Header*>(mem_.data()); }
  std::uint32_t n_slots() const { return header().n_slots; }
  std::uint64_t slot_bytes() const { return header().slot_bytes; }

  std::byte* slot(std::uint32_t id) {
    APPO_CHECK(id < n_slots(), "slot id out of range");
    return mem_.data() + kHeaderBytes + static_cast<std::size_t>(id) * slot_bytes();
  }
  const std::byte* slot(std::uint32_t id) const {
    return const_cast<SlotRegion*>(this)->slot(id);
  }

  bool valid() const { return mem_.valid(); }

 private:
  SharedMem mem_;
};

// Owning convenience wrappers for single-process use.
class FifoQueue {
 public:
  explicit FifoQueue(std::uint32_t capacity, bool shared = false) {
    std::size_t bytes = BoundedFifo::bytes_required(capacity);
    mem_ = shared ? SharedMem::anonymous_shared(bytes) : SharedMem::heap(bytes);
    q_ = BoundedFifo::create(mem_.data(), bytes, capacity);
  }
  BoundedFifo& fifo() { return *q_; }
  const BoundedFifo& fifo() const { return *q_; }
  BoundedFifo* operator->() { return q_; }

 private:
  SharedMem mem_;
  BoundedFifo* q_ = nullptr;
};

class SlotPool {
 public:
  explicit SlotPool(std::uint32_t n_slots, bool shared = false) {
    std::size_t bytes = SharedBufferPool::bytes_required(n_slots);
    mem_ = shared ? SharedMem::anonymous_shared(bytes) : SharedMem::heap(bytes);
    p_ = SharedBufferPool::create(mem_.data(), bytes, n_slots);
  }
  SharedBufferPool& pool() { return *p_; }
  SharedBufferPool* operator->() { return p_; }

 private:
  SharedMem mem_;
  SharedBufferPool* p_ = nullptr;
};

}  // namespace appo
