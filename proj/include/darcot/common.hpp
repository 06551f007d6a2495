#pragma once

#include <cstdint>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace darcot {

// Thrown when a caller breaks an operation's contract (bad shapes, bad
// parameters, misuse of the tape). Maps to process exit code 1.
class ContractViolation : public std::runtime_error {
 public:
  explicit ContractViolation(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when a computation produces or receives non-finite values, or an
// iterative routine fails to reach its tolerance. Maps to exit code 2.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown on malformed files (bad magic, truncation, version mismatch).
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <class T, class... Rest>
void format_into(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  format_into(os, rest...);
}
}  // namespace detail

template <class... Args>
std::string cat(const Args&... args) {
  std::ostringstream os;
  detail::format_into(os, args...);
  return os.str();
}

template <class... Args>
[[noreturn]] void fail_contract(const Args&... args) {
  throw ContractViolation(cat(args...));
}

template <class... Args>
[[noreturn]] void fail_numeric(const Args&... args) {
  throw NumericError(cat(args...));
}

#define DARCOT_REQUIRE(cond, ...)            \
  do {                                       \
    if (!(cond)) ::darcot::fail_contract(__VA_ARGS__); \
  } while (0)

// 64-bit FNV-1a. Used for config hashing and RNG stream derivation.
inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t mix64(uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Counter-based deterministic RNG. State is two u64 words, so it can be
// serialized trivially and any draw is a pure function of (key, counter).
// Substreams are derived by name so independent consumers (init, data
// sampling, degradation noise, ...) never share a stream.
class Rng {
 public:
  Rng() : key_(0), ctr_(0) {}
  explicit Rng(uint64_t key, uint64_t ctr = 0) : key_(key), ctr_(ctr) {}

  static Rng substream(uint64_t master_seed, std::string_view purpose) {
    return Rng(mix64(master_seed ^ fnv1a64(purpose)));
  }
  // Stream that depends on (seed, purpose, index); used for per-step and
  // per-item draws so a resumed run replays the identical sequence.
  static Rng at(uint64_t master_seed, std::string_view purpose, uint64_t index) {
    return Rng(mix64(mix64(master_seed ^ fnv1a64(purpose)) + 0x632be59bd9b4e019ull * (index + 1)));
  }

  uint64_t next_u64() {
    uint64_t z = key_ + 0x9e3779b97f4a7c15ull * (++ctr_);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0,1) with 53 random bits.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; consumes two draws per call.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    // keep u1 away from 0 so log stays finite
    u1 = u1 < 1e-300 ? 1e-300 : u1;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n). Lemire's multiply-shift; slight modulo bias
  // is irrelevant at our n but determinism matters.
  uint64_t below(uint64_t n) {
    return uint64_t((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  uint64_t key() const { return key_; }
  uint64_t counter() const { return ctr_; }
  void set_counter(uint64_t c) { ctr_ = c; }

 private:
  uint64_t key_;
  uint64_t ctr_;
};

template <class S>
bool all_finite(const std::vector<S>& v) {
  for (S x : v)
    if (!std::isfinite(double(x))) return false;
  return true;
}

}  // namespace darcot
