// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace hivt5 {

// Deterministic 64-bit generator: SplitMix64 (Steele, Lea, Flood 2014).
// Chosen because the whole sequence is a pure function of the seed with no
// platform-dependent state, so corpora, training runs and checkpoints are
// bit-reproducible everywhere.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform integer in [0, n). Modulo reduction; the bias is < n / 2^64 and
    // irrelevant at the n used here.
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Box-Muller without a cached spare: always consumes two uniforms, so the
    // draw sequence is independent of call interleaving.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586 * u2);
    }

    // Geometric number of trials with success probability p: support {1,2,...},
    // mean 1/p.
    std::uint64_t geometric(double p) {
        if (p >= 1.0) return 1;
        if (p <= 0.0) return 1;
        double u = 1.0 - uniform();
        auto k = static_cast<std::uint64_t>(std::ceil(std::log(u) / std::log(1.0 - p)));
        return k < 1 ? 1 : k;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derives an independent child stream. Splitting rule: the label is FNV-1a
    // hashed and mixed into the parent seed through one SplitMix64 round, so
    // every subsystem gets a documented, order-independent stream.
    Rng split(std::string_view label) const {
        std::uint64_t h = 0xCBF29CE484222325ull;
        for (char c : label) {
            h ^= static_cast<std::uint8_t>(c);
            h *= 0x100000001B3ull;
        }
        Rng child(state_ ^ h);
        child.next_u64();
        return child;
    }

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

private:
    std::uint64_t state_;
};

}  // namespace hivt5
