#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace crmt {

// Portable counter-based generator (SplitMix64). The integer stream is
// bit-identical on every platform, which makes dataset generation and all
// seeded experiments reproducible byte-for-byte. Each next() advances the
// state by the golden-ratio increment and returns a mixed output.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform double in [0, 1) with 53 bits of precision.
    double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Standard normal via Box-Muller. Consumes exactly two raw draws per
    // call (the sine branch is discarded so the stream layout stays simple
    // to re-implement).
    double gaussian() {
        double u1 = uniform01();
        double u2 = uniform01();
        double r = std::sqrt(-2.0 * std::log(1.0 - u1)); // 1-u1 in (0,1]
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next() % n; }

private:
    std::uint64_t state_;
};

inline std::uint64_t mix_u64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Derive an independent stream seed from a base seed, a textual tag and an
// index. Used so that e.g. the batch shuffler and the attack initializer
// never share a stream.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                 std::uint64_t index = 0) {
    std::uint64_t h = 0xcbf29ce484222325ULL; // FNV-1a over the tag
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return mix_u64(base ^ mix_u64(h + 0x9e3779b97f4a7c15ULL * (index + 1)));
}

} // namespace crmt
