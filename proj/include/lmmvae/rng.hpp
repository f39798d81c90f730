#pragma once

#include <array>
#include <cstdint>
#include <string_view>

#include "lmmvae/tensor.hpp"

namespace lmmvae {

/// Seeded pseudo-random stream with a fixed, documented algorithm:
/// xoshiro256++ state initialized via splitmix64, uniforms from the top
/// 53 bits, normals via the Box-Muller transform (pairs, spare cached).
/// A given seed therefore yields the same draw sequence on every run;
/// normals additionally depend on libm's log/cos/sin rounding, which is
/// stable for a fixed toolchain.
///
/// fork(label) derives an independent substream from the *seed* (not the
/// stream position), so forks are order-independent.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    double uniform();  // [0, 1)
    double normal();   // N(0, 1)
    bool bernoulli(double p);
    std::uint64_t below(std::uint64_t n);  // uniform in [0, n)

    Rng fork(std::string_view label) const;
    Rng fork(std::string_view label, std::uint64_t index) const;

    Tensor draw_normal(Shape shape);
    Tensor draw_uniform(Shape shape);
    Tensor draw_bernoulli(Shape shape, double p);

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_ = 0;
    std::array<std::uint64_t, 4> state_{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace lmmvae
