// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

namespace cktwam {

namespace detail {
inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}
}  // namespace detail

/// Counter-based random stream keyed by (seed, op id, step). Two streams built
/// from the same key produce identical draws, which keeps stochastic ops
/// (dropout masks, router noise, data sampling) reproducible per call site
/// independent of evaluation order.
class RngStream {
public:
    RngStream(uint64_t seed, uint64_t op_id, uint64_t step) {
        uint64_t s = seed;
        state_ = detail::splitmix64(s);
        s = state_ ^ (op_id * 0x9e3779b97f4a7c15ull);
        state_ = detail::splitmix64(s);
        s = state_ ^ (step * 0xc2b2ae3d27d4eb4full);
        state_ = detail::splitmix64(s);
    }

    uint64_t next_u64() { return detail::splitmix64(state_); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in (0, 1]; safe as a log argument.
    double uniform_pos() { return 1.0 - uniform(); }

    /// Standard normal via Box-Muller.
    double gaussian() {
        double u1 = uniform_pos();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

private:
    uint64_t state_;
};

}  // namespace cktwam
