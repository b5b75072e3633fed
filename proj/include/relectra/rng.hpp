#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace relectra {

// PCG32 (Melissa O'Neill's pcg32_random_r). Small serializable state so
// checkpoints can persist the generator exactly. No cached gaussian spare:
// state is just (state, inc) and every draw is a pure state transition.
class Rng {
public:
    Rng() : Rng(0x853c49e6748fea9bULL) {}

    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0xda3e39cb94b95bdbULL) {
        state_ = 0u;
        inc_ = (stream << 1u) | 1u;
        next_u32();
        state_ += seed;
        next_u32();
    }

    std::uint32_t next_u32() {
        std::uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        std::uint32_t xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
        std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    std::uint64_t next_u64() {
        std::uint64_t hi = next_u32();
        return (hi << 32) | next_u32();
    }

    // Unbiased bounded draw (rejection sampling).
    std::uint32_t bounded(std::uint32_t n) {
        if (n <= 1) return 0;
        std::uint32_t threshold = (0u - n) % n;
        for (;;) {
            std::uint32_t r = next_u32();
            if (r >= threshold) return r % n;
        }
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() {
        std::uint64_t a = next_u32() >> 5;   // 27 bits
        std::uint64_t b = next_u32() >> 6;   // 26 bits
        return (static_cast<double>(a) * 67108864.0 + static_cast<double>(b)) / 9007199254740992.0;
    }

    // Box-Muller without the cached spare (keeps state minimal).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    template <typename It>
    void shuffle(It first, It last) {
        // Fisher-Yates, self-contained so results do not depend on the
        // standard library's std::shuffle implementation.
        auto n = static_cast<std::uint32_t>(last - first);
        for (std::uint32_t i = n; i > 1; --i) {
            std::uint32_t j = bounded(i);
            std::swap(first[i - 1], first[j]);
        }
    }

    std::array<std::uint64_t, 2> state() const { return {state_, inc_}; }
    void set_state(const std::array<std::uint64_t, 2>& s) {
        state_ = s[0];
        inc_ = s[1];
    }

private:
    std::uint64_t state_;
    std::uint64_t inc_;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Root-seed -> component-seed derivation: one root seed controls every
// seeded subsystem, each component drawing from its own named stream.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view component) {
    return splitmix64(root ^ fnv1a64(component));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view component, std::uint64_t index) {
    return splitmix64(derive_seed(root, component) + 0x9e3779b97f4a7c15ULL * (index + 1));
}

}  // namespace relectra
