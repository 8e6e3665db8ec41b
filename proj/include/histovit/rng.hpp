#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace histovit::rng {

// All randomness in the pipeline flows from one user seed. Stage seeds are
// derived by hashing (seed, tag[, index]) so stages cannot alias each other
// and reordering stages never shifts another stage's stream.

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t derive(std::uint64_t seed, std::string_view tag) {
    std::uint64_t state = seed ^ fnv1a(tag);
    splitmix64(state);
    return splitmix64(state);
}

inline std::uint64_t derive(std::uint64_t seed, std::string_view tag, std::uint64_t index) {
    std::uint64_t state = derive(seed, tag) ^ (0x94d049bb133111ebULL * (index + 1));
    splitmix64(state);
    return splitmix64(state);
}

// Deterministic draw stream. mt19937_64 raw output is pinned by the standard;
// the distributions are hand-rolled because the std:: ones are not.
class Stream {
  public:
    explicit Stream(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t bits() { return eng_(); }

    // [0, bound), unbiased
    std::uint64_t integer(std::uint64_t bound) {
        const std::uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            std::uint64_t r = eng_();
            if (r >= threshold) return r % bound;
        }
    }

    // [0, 1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Normal clipped by rejection to +-clip standard deviations.
    double truncated_normal(double stddev, double clip = 2.0) {
        for (;;) {
            double z = normal();
            if (std::fabs(z) <= clip) return z * stddev;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(integer(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace histovit::rng
