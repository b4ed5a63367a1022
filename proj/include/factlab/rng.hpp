#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace factlab {

// Deterministic draws layered over mt19937_64. The std:: distribution
// adaptors are implementation-defined, so every sample here is derived from
// raw engine words; identical seeds give identical streams on any toolchain.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t word() { return engine_(); }

    // [0, 1) with 53 random bits
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // [0, n), multiply-shift bounded draw
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(engine_()) * static_cast<unsigned __int128>(n)) >> 64);
    }

    // standard normal, Box-Muller with a cached spare
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u = 1.0 - uniform01();  // (0, 1], keeps log finite
        const double v = uniform01();
        const double radius = std::sqrt(-2.0 * std::log(u));
        constexpr double two_pi = 6.283185307179586476925286766559;
        spare_ = radius * std::sin(two_pi * v);
        has_spare_ = true;
        return radius * std::cos(two_pi * v);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// splitmix64-style mixer for deriving per-phase seeds from one run seed
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace factlab
