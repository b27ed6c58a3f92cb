#include "appo/transport.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <map>
#include <random>
#include <set>
#include <thread>
#include <vector>

#include "catch2/catch_amalgamated.hpp"

using namespace appo;
using namespace std::chrono_literals;

namespace {

SlotIndexMessage msg(std::uint32_t producer, std::uint32_t seq) {
  SlotIndexMessage m;
  m.kind = static_cast<std::uint32_t>(MsgKind::TrajectoryReady);
  m.worker_id = producer;
  m.seq = seq;
  m.slot_id = static_cast<std::int64_t>(producer) * 1000000 + seq;
  return m;
}

}  // namespace

TEST_CASE("fifo preserves order of sequential pushes") {
  FifoQueue q(8);
  for (std::uint32_t i = 0; i < 3; ++i) REQUIRE(q->push(msg(0, i), 0ms) == PushResult::Ok);

  SlotIndexMessage out[3];
  REQUIRE(q->pop_many(out, 3, 0ms) == 3);
  for (std::uint32_t i = 0; i < 3; ++i) REQUIRE(out[i].seq == i);
}

TEST_CASE("push into full queue returns Full after timeout") {
  FifoQueue q(1);
  REQUIRE(q->push(msg(0, 0), 0ms) == PushResult::Ok);
  REQUIRE(q->push(msg(0, 1), 0ms) == PushResult::Full);
  REQUIRE(q->size() == 1);

  SlotIndexMessage out;
  REQUIRE(q->pop_many(&out, 1, 0ms) == 1);
  REQUIRE(out.seq == 0);
}

TEST_CASE("pop_many takes a FIFO prefix") {
  FifoQueue q(8);
  for (std::uint32_t i = 0; i < 3; ++i) q->push(msg(0, i), 0ms);

  SlotIndexMessage out[2];
  REQUIRE(q->pop_many(out, 2, 0ms) == 2);
  REQUIRE(out[0].seq == 0);
  REQUIRE(out[1].seq == 1);
  REQUIRE(q->size() == 1);
}

TEST_CASE("pop_many on empty queue times out with empty result") {
  FifoQueue q(4);
  SlotIndexMessage out[4];
  auto t0 = Clock::now();
  REQUIRE(q->pop_many(out, 4, 1ms) == 0);
  REQUIRE(seconds_since(t0) < 0.5);
}

TEST_CASE("batched pop equals repeated single pops") {
  FifoQueue a(16), b(16);
  std::mt19937_64 rng(7);
  std::vector<SlotIndexMessage> sent;
  for (int i = 0; i < 10; ++i) {
    auto m = msg(static_cast<std::uint32_t>(rng() % 3), static_cast<std::uint32_t>(i));
    a->push(m, 0ms);
    b->push(m, 0ms);
    sent.push_back(m);
  }
  SlotIndexMessage batch[10];
  REQUIRE(a->pop_many(batch, 10, 0ms) == 10);
  for (int i = 0; i < 10; ++i) {
    SlotIndexMessage one;
    REQUIRE(b->pop_many(&one, 1, 0ms) == 1);
    REQUIRE(one.slot_id == batch[i].slot_id);
    REQUIRE(one.seq == batch[i].seq);
  }
}

TEST_CASE("conservation and per-producer order under 8 producers, 1 consumer") {
  constexpr std::uint32_t kProducers = 8;
  constexpr std::uint32_t kPerProducer = 10000;
  FifoQueue q(256);

  std::vector<std::thread> producers;
  for (std::uint32_t p = 0; p < kProducers; ++p) {
    producers.emplace_back([&q, p] {
      for (std::uint32_t i = 0; i < kPerProducer; ++i) {
        while (q->push(msg(p, i), 10ms) != PushResult::Ok) {
        }
      }
    });
  }

  std::vector<SlotIndexMessage> received;
  received.reserve(kProducers * kPerProducer);
  SlotIndexMessage buf[128];
  while (received.size() < kProducers * kPerProducer) {
    std::size_t n = q->pop_many(buf, 128, 100ms);
    received.insert(received.end(), buf, buf + n);
  }
  for (auto& t : producers) t.join();

  REQUIRE(received.size() == kProducers * kPerProducer);

  // multiset equality: every (producer, seq) appears exactly once
  std::set<std::int64_t> distinct;
  for (const auto& m : received) distinct.insert(m.slot_id);
  REQUIRE(distinct.size() == kProducers * kPerProducer);

  // per-producer order preservation
  std::map<std::uint32_t, std::uint32_t> next_seq;
  for (const auto& m : received) {
    REQUIRE(m.seq == next_seq[m.worker_id]);
    ++next_seq[m.worker_id];
  }
}

TEST_CASE("conservation with concurrent pushes and batched pops, 2 consumers") {
  constexpr std::uint32_t kProducers = 4;
  constexpr std::uint32_t kPerProducer = 20000;
  FifoQueue q(64);

  std::atomic<std::uint64_t> popped{0};
  std::atomic<bool> done{false};
  std::vector<std::uint64_t> seen[2];

  std::vector<std::thread> consumers;
  for (int c = 0; c < 2; ++c) {
    consumers.emplace_back([&, c] {
      SlotIndexMessage buf[64];
      while (!done.load() || q->size() > 0) {
        std::size_t n = q->pop_many(buf, 64, 5ms);
        for (std::size_t i = 0; i < n; ++i)
          seen[c].push_back(static_cast<std::uint64_t>(buf[i].slot_id));
        popped += n;
      }
    });
  }

  std::vector<std::thread> producers;
  for (std::uint32_t p = 0; p < kProducers; ++p) {
    producers.emplace_back([&q, p] {
      for (std::uint32_t i = 0; i < kPerProducer; ++i)
        while (q->push(msg(p, i), 10ms) != PushResult::Ok) {
        }
    });
  }
  for (auto& t : producers) t.join();
  while (popped.load() < kProducers * kPerProducer) std::this_thread::sleep_for(1ms);
  done = true;
  for (auto& t : consumers) t.join();

  std::set<std::uint64_t> all(seen[0].begin(), seen[0].end());
  all.insert(seen[1].begin(), seen[1].end());
  REQUIRE(seen[0].size() + seen[1].size() == kProducers * kPerProducer);
  REQUIRE(all.size() == kProducers * kPerProducer);  // no loss, no duplication
}

TEST_CASE("pool lifecycle: acquire, seal, release") {
  SlotPool pool(4);
  auto id = pool->try_acquire();
  REQUIRE(id.has_value());
  REQUIRE(*id < 4);
  REQUIRE(pool->n_free() == 3);
  REQUIRE(pool->state(*id) == SlotState::Writing);

  pool->seal(*id);
  REQUIRE(pool->state(*id) == SlotState::Sealed);
  pool->release(*id);
  REQUIRE(pool->state(*id) == SlotState::Free);
  REQUIRE(pool->n_free() == 4);
}

TEST_CASE("pool exhaustion after acquiring every slot") {
  SlotPool pool(4);
  for (int i = 0; i < 4; ++i) REQUIRE(pool->try_acquire().has_value());
  REQUIRE_FALSE(pool->try_acquire().has_value());
}

TEST_CASE("double release is a contract violation") {
  SlotPool pool(2);
  auto id = pool->try_acquire();
  pool->seal(*id);
  pool->release(*id);
  REQUIRE_THROWS_AS(pool->release(*id), ContractError);
}

TEST_CASE("releasing a Writing slot is a contract violation") {
  SlotPool pool(2);
  auto id = pool->try_acquire();
  REQUIRE_THROWS_AS(pool->release(*id), ContractError);
}

TEST_CASE("ownership: no slot concurrently held by two acquirers") {
  // 4 threads acquire/seal/release at random; a per-slot atomic owner count
  // would expose any double-ownership window.
  constexpr int kThreads = 4;
  constexpr int kOpsPerThread = 250000;
  SlotPool pool(6);
  std::vector<std::atomic<int>> owners(6);
  for (auto& o : owners) o = 0;
  std::atomic<bool> violation{false};

  std::vector<std::thread> threads;
  for (int t = 0; t < kThreads; ++t) {
    threads.emplace_back([&, t] {
      std::mt19937_64 rng(t);
      for (int i = 0; i < kOpsPerThread; ++i) {
        auto id = pool->try_acquire();
        if (!id) continue;
        if (owners[*id].fetch_add(1) != 0) violation = true;
        if ((rng() & 1) == 0) std::this_thread::yield();
        owners[*id].fetch_sub(1);
        pool->seal(*id);
        pool->release(*id);
      }
    });
  }
  for (auto& t : threads) t.join();
  REQUIRE_FALSE(violation.load());
  REQUIRE(pool->n_free() == 6);
}

TEST_CASE("fifo and pool work across fork in anonymous shared memory") {
  constexpr std::uint32_t kMsgs = 5000;
  std::size_t qbytes = BoundedFifo::bytes_required(64);
  SharedMem qmem = SharedMem::anonymous_shared(qbytes);
  BoundedFifo* q = BoundedFifo::create(qmem.data(), qbytes, 64);

  std::size_t pbytes = SharedBufferPool::bytes_required(8);
  SharedMem pmem = SharedMem::anonymous_shared(pbytes);
  SharedBufferPool* pool = SharedBufferPool::create(pmem.data(), pbytes, 8);

  pid_t child = fork();
  REQUIRE(child >= 0);
  if (child == 0) {
    // child: acquire slots, publish their ids, release on the parent's behalf
    for (std::uint32_t i = 0; i < kMsgs; ++i) {
      std::optional<std::uint32_t> slot;
      while (!(slot = pool->acquire_wait(100ms))) {
      }
      pool->seal(*slot);
      SlotIndexMessage m = msg(1, i);
      m.slot_id = *slot;
      while (q->push(m, 100ms) != PushResult::Ok) {
      }
    }
    _exit(0);
  }

  std::uint32_t got = 0, expect_seq = 0;
  SlotIndexMessage buf[32];
  while (got < kMsgs) {
    std::size_t n = q->pop_many(buf, 32, 500ms);
    for (std::size_t i = 0; i < n; ++i) {
      REQUIRE(buf[i].seq == expect_seq++);
      pool->release(static_cast<std::uint32_t>(buf[i].slot_id));
    }
    got += static_cast<std::uint32_t>(n);
  }
  int status = 0;
  waitpid(child, &status, 0);
  REQUIRE(WIFEXITED(status));
  REQUIRE(WEXITSTATUS(status) == 0);
  REQUIRE(pool->n_free() == 8);
}

TEST_CASE("slot region header is byte-exact") {
  SlotRegion r = SlotRegion::on_heap(3, 128);
  REQUIRE(r.header().magic == 0xA5F0);
  REQUIRE(r.header().version == 1);
  REQUIRE(r.n_slots() == 3);
  REQUIRE(r.slot_bytes() == 128);
  // slots start right after the 64-byte header, densely packed
  REQUIRE(r.slot(1) - r.slot(0) == 128);
  REQUIRE(reinterpret_cast<const std::byte*>(&r.header()) + 64 == r.slot(0));
}

TEST_CASE("pool sizing formula") {
  REQUIRE(pool_slots_required(2, 4, 4) == 2 * 2 * 5 + 4);
  REQUIRE(pool_slots_required(1, 2, 0) == 6);
}
