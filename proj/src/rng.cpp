#include "lmmvae/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace lmmvae {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t s = seed;
    for (auto& w : state_) w = splitmix64(s);
}

std::uint64_t Rng::next_u64() {
    // xoshiro256++
    std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // u1 in (0, 1] so the log is finite.
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double angle = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(angle);
    has_spare_ = true;
    return r * std::cos(angle);
}

bool Rng::bernoulli(double p) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("bernoulli: p must be in [0, 1]");
    return uniform() < p;
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("rng: below(0)");
    // Lemire's multiply-shift; the tiny modulo bias is irrelevant here and
    // the mapping is fixed, which is what reproducibility needs.
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

Rng Rng::fork(std::string_view label) const {
    std::uint64_t x = seed_ ^ rotl(fnv1a(label), 31);
    return Rng(splitmix64(x));
}

Rng Rng::fork(std::string_view label, std::uint64_t index) const {
    std::uint64_t x = seed_ ^ rotl(fnv1a(label), 31);
    x = splitmix64(x) ^ rotl(index + 0x632be59bd9b4e019ULL, 17);
    return Rng(splitmix64(x));
}

Tensor Rng::draw_normal(Shape shape) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = normal();
    return t;
}

Tensor Rng::draw_uniform(Shape shape) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = uniform();
    return t;
}

Tensor Rng::draw_bernoulli(Shape shape, double p) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("bernoulli: p must be in [0, 1]");
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = uniform() < p ? 1.0 : 0.0;
    return t;
}

}  // namespace lmmvae
