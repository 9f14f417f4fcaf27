#pragma once

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace ahn {

// Error taxonomy. Tests match on the concrete type, messages carry the details.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct DegenerateRowError : std::domain_error {
  using std::domain_error::domain_error;
};
struct OrderingError : std::logic_error {
  using std::logic_error::logic_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CorpusError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

// Seeded RNG with cheap derived streams so that every (seed, purpose, index)
// combination is reproducible independent of call order elsewhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  static Rng derive(std::uint64_t seed, std::string_view tag, std::uint64_t a = 0,
                    std::uint64_t b = 0) {
    std::uint64_t s = seed ^ fnv1a64(tag);
    std::uint64_t mix = s;
    (void)splitmix64(mix);
    mix ^= 0x517cc1b727220a95ull * (a + 1);
    (void)splitmix64(mix);
    mix ^= 0x2545f4914f6cdd1dull * (b + 1);
    return Rng(splitmix64(mix));
  }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(eng_); }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(eng_);
  }

  // inclusive bounds
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(eng_);
  }

  std::uint64_t bits() { return eng_(); }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

inline int max_threads() {
  if (const char* s = std::getenv("AHNLAB_THREADS")) {
    int v = std::atoi(s);
    if (v > 0) return v;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? static_cast<int>(hc) : 1;
}

// Runs fn(i) for i in [0, n). Results must go into caller-owned per-index
// slots; reduction stays with the caller so it can keep a fixed order.
template <typename Fn>
void parallel_for(int n, int threads, Fn&& fn) {
  if (threads > n) threads = n;
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  std::mutex err_mutex;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&]() {
      for (;;) {
        int i = next.fetch_add(1);
        if (i >= n || failed.load()) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mutex);
          if (!failed.exchange(true)) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace ahn
