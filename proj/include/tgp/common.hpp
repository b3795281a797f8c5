#ifndef TGP_COMMON_HPP
#define TGP_COMMON_HPP

#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tgp {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;

// ---------------------------------------------------------------------------
// Error taxonomy.  DataError covers malformed or out-of-contract inputs,
// NumericalError covers linear-algebra / optimisation breakdowns.  The CLI
// maps them to distinct exit codes.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : Error {
  using Error::Error;
};

struct NumericalError : Error {
  using Error::Error;
};

// Raised when an optimisation produces a non-finite objective.  The carried
// state is the last one whose objective evaluated finite.
template <class State>
struct TrainingDiverged : NumericalError {
  TrainingDiverged(const std::string &msg, State last, int at_step)
      : NumericalError(msg), last_finite_state(std::move(last)), step(at_step) {}
  State last_finite_state;
  int step = 0;
};

// ---------------------------------------------------------------------------
// Angles.
// ---------------------------------------------------------------------------

// Wrap any finite angle to [-pi, pi).
inline double wrap_angle(double theta) {
  double w = std::remainder(theta, kTwoPi);  // (-pi, pi]
  if (w >= kPi) w -= kTwoPi;
  return w;
}

// Wrap any finite angle to [0, 2*pi).
inline double wrap_angle_2pi(double theta) {
  double w = std::fmod(theta, kTwoPi);
  if (w < 0.0) w += kTwoPi;
  if (w >= kTwoPi) w = 0.0;
  return w;
}

// ---------------------------------------------------------------------------
// Counter-based RNG.  A keyed SplitMix64 permutation of an incrementing
// counter: the stream is a pure function of (key, counter), so runs are
// reproducible regardless of call interleaving, and independent substreams
// are derived by re-keying rather than by sharing mutable state.
// ---------------------------------------------------------------------------

inline std::uint64_t mix_u64(std::uint64_t key, std::uint64_t counter) {
  std::uint64_t z = key + 0x9e3779b97f4a7c15ull * (counter + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix_u64(seed ^ 0x5851f42d4c957f2dull, stream)) {}

  // Derive an independent generator; deterministic in (seed, stream) only.
  CounterRng substream(std::uint64_t stream) const {
    CounterRng r(0);
    r.key_ = mix_u64(key_, 0x8000000000000000ull | stream);
    r.counter_ = 0;
    return r;
  }

  std::uint64_t next_u64() { return mix_u64(key_, counter_++); }

  // Uniform in (0, 1]; never returns 0 so log() is safe.
  double uniform() {
    const std::uint64_t bits = next_u64() >> 11;  // 53 bits
    return (static_cast<double>(bits) + 1.0) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * (uniform() - 0x1.0p-53); }

  // Unbiased-enough integer in [0, n); multiply-shift keeps it branch-free
  // and platform-deterministic.
  std::uint64_t uniform_index(std::uint64_t n) {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller (cosine branch only, so each draw
  // consumes exactly two counter values).
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Smooth positivity transforms used for constrained parameters.
// ---------------------------------------------------------------------------

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Inverse of softplus; defined for y > 0.
inline double softplus_inv(double y) {
  if (y <= 0.0) throw NumericalError("softplus_inv: argument must be positive");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// ---------------------------------------------------------------------------
// Deterministic shortest-round-trip double formatting for file output.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------
// Minimal blocked parallel-for.  Each worker owns a contiguous index range,
// so writes to distinct slots are race-free and results do not depend on
// scheduling.  threads <= 1 runs inline.
// ---------------------------------------------------------------------------

template <class Fn>
void parallel_for(std::size_t n, int threads, Fn &&fn) {
  if (n == 0) return;
  const int hw = static_cast<int>(std::thread::hardware_concurrency());
  int workers = threads <= 0 ? std::max(1, hw) : threads;
  workers = static_cast<int>(std::min<std::size_t>(workers, n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const std::size_t lo = static_cast<std::size_t>(w) * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto &t : pool) t.join();
}

}  // namespace tgp

#endif  // TGP_COMMON_HPP
