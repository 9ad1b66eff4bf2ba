#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mscg/tensor.hpp"

namespace mscg {

// Counter-based generator: draw k is SplitMix64's finalizer applied to
// seed + k * golden gamma. Identical (seed, counter) gives identical streams
// on every platform; random access via set_counter.
class CounterRng {
  public:
    static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

    explicit CounterRng(std::uint64_t seed = 0, std::uint64_t counter = 0) : seed_(seed), counter_(counter) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }
    void set_counter(std::uint64_t c) { counter_ = c; }

    // Independent substream keyed off this generator's seed.
    CounterRng fork(std::uint64_t key) const { return CounterRng(mix(seed_ ^ mix(key))); }

    std::uint64_t next_u64() {
        ++counter_;
        return mix(seed_ + counter_ * kGamma);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    std::uint64_t next_below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    // One standard normal draw via Box-Muller (consumes two uniforms).
    double next_normal() {
        const double u1 = next_uniform();
        const double u2 = next_uniform();
        const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        return r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    template <typename T>
    void fill_normal(Tensor<T>& t, double mean = 0.0, double stddev = 1.0) {
        for (auto& v : t.data) v = static_cast<T>(mean + stddev * next_normal());
    }

    template <typename T>
    void fill_uniform(Tensor<T>& t, double lo, double hi) {
        for (auto& v : t.data) v = static_cast<T>(lo + (hi - lo) * next_uniform());
    }

    static std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ull;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBull;
        z ^= z >> 31;
        return z;
    }

  private:
    std::uint64_t seed_;
    std::uint64_t counter_;
};

} // namespace mscg
