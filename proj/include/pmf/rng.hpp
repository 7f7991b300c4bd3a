#pragma once

#include <cmath>
#include <cstdint>

#include "pmf/tensor.hpp"

namespace pmf {

// Counter-based generator (splitmix64 over seed/counter), so every stream is
// reproducible from (seed, counter) alone and independent of call history of
// other streams.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t tag) { return mix64(mix64(seed) ^ mix64(tag)); }

class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t stream = 0)
        : base_(derive_seed(seed, stream)) {}

    uint64_t next_u64() { return mix64(base_ ^ (0xd1b54a32d192ed03ULL * ++counter_)); }

    // uniform in (0,1)
    double next_uniform() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
    }

    double next_normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = next_uniform();
        double u2 = next_uniform();
        double rad = std::sqrt(-2.0 * std::log(u1));
        double ang = 6.283185307179586476925286766559 * u2;
        cached_ = rad * std::sin(ang);
        have_cached_ = true;
        return rad * std::cos(ang);
    }

    uint64_t next_below(uint64_t n) { return next_u64() % n; }

private:
    uint64_t base_;
    uint64_t counter_ = 0;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

inline Tensor randn(const Shape& s, Rng& rng) {
    Tensor t = Tensor::uninit(s);
    double* p = t.mut();
    for (int64_t i = 0, n = s.numel(); i < n; ++i) p[i] = rng.next_normal();
    return t;
}

inline Tensor rand_uniform(const Shape& s, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor t = Tensor::uninit(s);
    double* p = t.mut();
    for (int64_t i = 0, n = s.numel(); i < n; ++i) p[i] = lo + (hi - lo) * rng.next_uniform();
    return t;
}

}  // namespace pmf
