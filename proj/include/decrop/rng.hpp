#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace decrop {

// Deterministic counter-style RNG. Substreams are derived by hashing the
// parent seed with stream indices, so draws are independent of batching and
// thread schedule, and identical across platforms.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(mix(seed ^ 0x9e3779b97f4a7c15ULL)) {}

    // Derived substream for (seed, ids...); order of ids matters.
    Rng derive(std::initializer_list<uint64_t> ids) const {
        uint64_t h = state_;
        for (uint64_t id : ids) h = mix(h ^ mix(id + 0x632be59bd9b4e019ULL));
        return Rng(from_state{}, h);
    }
    Rng derive(uint64_t a) const { return derive({a}); }
    Rng derive(uint64_t a, uint64_t b) const { return derive({a, b}); }
    Rng derive(uint64_t a, uint64_t b, uint64_t c) const { return derive({a, b, c}); }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix(state_);
    }

    // Uniform in [0,1), 53-bit resolution.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n), n >= 1.
    uint64_t below(uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller (no cached spare; draw parity stays
    // irrelevant to downstream consumers).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    void fill_normal(float* out, size_t n, double sigma) {
        for (size_t i = 0; i < n; ++i) out[i] = float(sigma * normal());
    }

    // Fisher-Yates shuffle of indices.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    struct from_state {};
    Rng(from_state, uint64_t s) : state_(s) {}

    // splitmix64 finalizer
    static uint64_t mix(uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    uint64_t state_;
};

} // namespace decrop
