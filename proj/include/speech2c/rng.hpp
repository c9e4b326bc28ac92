#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace s2c {

// Deterministic RNG used everywhere instead of std distributions, whose
// output is implementation-defined. All randomness in a run flows from one
// master seed split per component via derive_seed.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
    std::uint64_t below(std::uint64_t n);

    // Standard normal via Box-Muller (spare value cached).
    double normal();

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Fisher-Yates over the whole vector.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct values from [0, n), order arbitrary but deterministic.
    std::vector<int> sample_without_replacement(int n, int k);

  private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Splits a master seed into per-component streams. FNV-1a over the tag,
// mixed with the master seed (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t master, std::string_view tag);

}  // namespace s2c
