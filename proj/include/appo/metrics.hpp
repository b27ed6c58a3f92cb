#pragma once

// Cross-cutting counters. Hot-path recording must never block or slow a
// worker: each source owns an overwriting ring (drop-oldest) and the single
// aggregator detects overruns instead of producers waiting.

#include <atomic>
#include <cstdint>
#include <string>
#include <vector>

#include "appo/common.hpp"

namespace appo {

enum class MetricKind : std::uint32_t {
  Frames = 0,
  SgdStep = 1,
  QueueDepth = 2,
  LagSample = 3,
  IdleTime = 4,  // fraction in [0,1]
};

struct MetricEvent {
  std::uint32_t source = 0;
  std::uint32_t kind = 0;
  double t = 0.0;  // seconds since hub creation
  double value = 0.0;
};

class MetricsHub {
 public:
  explicit MetricsHub(std::uint32_t n_sources, std::uint32_t ring_capacity = 4096)
      : t0_(Clock::now()), rings_(n_sources) {
    for (auto& r : rings_) {
      r.buf.resize(ring_capacity);
      r.head = 0;
      r.tail = 0;
      r.drops = 0;
    }
  }

  // Wait-free for the producing source: on overflow the oldest entries are
  // overwritten and counted as dropped when the aggregator catches up.
  void record(std::uint32_t source, MetricKind kind, double value) {
    Ring& r = rings_[source];
    const std::uint64_t h = r.head.load(std::memory_order_relaxed);
    MetricEvent& e = r.buf[h % r.buf.size()];
    e.source = source;
    e.kind = static_cast<std::uint32_t>(kind);
    e.t = seconds_since(t0_);
    e.value = value;
    r.head.store(h + 1, std::memory_order_release);
  }

  // Drains every ring into out; returns the number of events appended.
  std::size_t drain(std::vector<MetricEvent>& out) {
    std::size_t added = 0;
    for (auto& r : rings_) {
      const std::uint64_t head = r.head.load(std::memory_order_acquire);
      std::uint64_t tail = r.tail.load(std::memory_order_relaxed);
      const std::uint64_t cap = r.buf.size();
      if (head - tail > cap) {
        // producer lapped us; skip to the oldest safe entry
        r.drops.fetch_add(head - tail - cap, std::memory_order_relaxed);
        tail = head - cap;
      }
      while (tail < head) {
        MetricEvent e = r.buf[tail % cap];
        // re-check: if the producer overwrote this cell mid-read, drop it
        if (r.head.load(std::memory_order_acquire) - tail > cap) {
          r.drops.fetch_add(1, std::memory_order_relaxed);
        } else {
          out.push_back(e);
          ++added;
        }
        ++tail;
      }
      r.tail.store(tail, std::memory_order_release);
    }
    return added;
  }

  std::uint64_t drops() const {
    std::uint64_t d = 0;
    for (const auto& r : rings_) d += r.drops.load(std::memory_order_relaxed);
    return d;
  }

  double now() const { return seconds_since(t0_); }

 private:
  struct Ring {
    std::vector<MetricEvent> buf;
    std::atomic<std::uint64_t> head{0};
    std::atomic<std::uint64_t> tail{0};
    std::atomic<std::uint64_t> drops{0};
  };

  Clock::time_point t0_;
  std::vector<Ring> rings_;
};

struct MetricsSummary {
  double window = 0.0;
  double fps = 0.0;          // sum(Frames)/window
  double lag_mean = 0.0;
  double lag_max = 0.0;
  std::size_t lag_count = 0;
  double idle_mean = 0.0;
  std::size_t idle_count = 0;
  double queue_depth_mean = 0.0;
  std::size_t sgd_steps = 0;
};

inline MetricsSummary aggregate(const std::vector<MetricEvent>& events, double window) {
  MetricsSummary s;
  s.window = window;
  double frames = 0.0, lag_sum = 0.0, idle_sum = 0.0, depth_sum = 0.0;
  std::size_t depth_count = 0;
  for (const auto& e : events) {
    switch (static_cast<MetricKind>(e.kind)) {
      case MetricKind::Frames:
        frames += e.value;
        break;
      case MetricKind::SgdStep:
        ++s.sgd_steps;
        break;
      case MetricKind::QueueDepth:
        depth_sum += e.value;
        ++depth_count;
        break;
      case MetricKind::LagSample:
        lag_sum += e.value;
        s.lag_max = std::max(s.lag_max, e.value);
        ++s.lag_count;
        break;
      case MetricKind::IdleTime:
        idle_sum += e.value;
        ++s.idle_count;
        break;
    }
  }
  if (window > 0.0) s.fps = frames / window;
  if (s.lag_count > 0) s.lag_mean = lag_sum / static_cast<double>(s.lag_count);
  if (s.idle_count > 0) s.idle_mean = idle_sum / static_cast<double>(s.idle_count);
  if (depth_count > 0) s.queue_depth_mean = depth_sum / static_cast<double>(depth_count);
  return s;
}

}  // namespace appo
