#pragma once

// Shared vocabulary for the appo training system: error types, clocks,
// seeding, and a couple of small numeric helpers used across modules.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace appo {

using Clock = std::chrono::steady_clock;
using Duration = std::chrono::nanoseconds;

inline constexpr Duration kDefaultPopTimeout = std::chrono::milliseconds(100);
inline constexpr Duration kDefaultPushTimeout = std::chrono::seconds(5);

// Thrown when a caller breaks a documented precondition (out-of-order write,
// double release, step after done, ...). These are programming errors, not
// runtime conditions to recover from.
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// Runtime configuration problems (bad key, invalid combination). Maps to
// exit code 2 in the CLI.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values in a place that must stay finite (corrupt slot, NaN
// loss). Maps to exit code 3 in the CLI.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

#define APPO_CHECK(cond, msg)                        \
  do {                                               \
    if (!(cond)) throw ::appo::ContractError(msg);   \
  } while (0)

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// splitmix64: cheap stateless mixing used to derive independent RNG streams
// from (seed, stream-id) pairs.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream + 1));
}

// FNV-1a over raw bytes; used for torn-read detection on published
// parameter vectors and for checkpoint integrity.
inline std::uint64_t fnv1a64(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline bool is_finite(double x) { return std::isfinite(x); }

}  // namespace appo
