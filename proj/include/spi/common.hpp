#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>

namespace spi {

/// Thrown by SPI_CHECK failures and explicit error paths.
class Error : public std::runtime_error {
  public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
[[noreturn]] inline void check_failed(const char* expr, const char* file, int line,
                                      const std::string& msg) {
    std::ostringstream os;
    os << "check failed: " << expr;
    if (!msg.empty()) os << " (" << msg << ")";
    os << " at " << file << ":" << line;
    throw Error(os.str());
}
} // namespace detail

#define SPI_CHECK(cond, ...)                                                                       \
    do {                                                                                           \
        if (!(cond)) {                                                                             \
            ::spi::detail::check_failed(#cond, __FILE__, __LINE__, std::string{__VA_ARGS__});      \
        }                                                                                          \
    } while (0)

// ---------------------------------------------------------------------------
// Deterministic counter-based RNG. All stochastic choices in the project hash
// a (seed, indices...) tuple through splitmix64 so results never depend on
// call order or thread scheduling.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

/// Uniform double in [0, 1) from a 64-bit hash state.
inline double u64_to_unit(std::uint64_t h) {
    return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
}

/// Small sequential PRNG seeded from a hash; used where a stream is natural.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(splitmix64(seed)) {}

    std::uint64_t next_u64() {
        state_ = splitmix64(state_);
        return state_;
    }
    double uniform() { return u64_to_unit(next_u64()); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Standard normal via Box-Muller.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }
    int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n)); }

  private:
    std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Data parallelism. SPI_THREADS caps the worker count; a value of 1 (or a
// serial request) runs inline on the calling thread so serial runs are
// bit-reproducible.

/// Number of workers parallel_for may use (>= 1). Reads SPI_THREADS once.
int max_threads();

/// Overrides the SPI_THREADS-derived worker count for this process.
void set_max_threads(int n);

/// Splits [0, n) into contiguous blocks and runs fn(begin, end) on each.
/// Partitioning depends only on (n, workers), not on scheduling.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

/// Number of blocks parallel_for would split [0, n) into.
int parallel_block_count(std::int64_t n);

/// Like parallel_for but hands each callback its block index, for
/// per-block accumulators that reduce deterministically in block order.
void parallel_for_blocks(std::int64_t n,
                         const std::function<void(int, std::int64_t, std::int64_t)>& fn);

/// FNV-1a over raw bytes; used for parameter-freeze assertions.
std::uint64_t fnv1a(const void* data, std::size_t bytes);

} // namespace spi
