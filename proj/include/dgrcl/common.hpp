#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace dgrcl {

// Base for all library errors; subclasses carry the contract name of the
// failure so callers can catch precisely.
struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

struct ShapeMismatch : Error { using Error::Error; };
struct NonFinite : Error { using Error::Error; };
struct NotScalar : Error { using Error::Error; };
struct DetachedTensor : Error { using Error::Error; };

struct MalformedRow : Error { using Error::Error; };
struct CalendarMismatch : Error { using Error::Error; };
struct NegativePrice : Error { using Error::Error; };
struct TooShort : Error { using Error::Error; };
struct BadFractions : Error { using Error::Error; };
struct EmptySplit : BadFractions { using BadFractions::BadFractions; };
struct UnknownTicker : Error { using Error::Error; };
struct SelfRelation : Error { using Error::Error; };

struct EmptySeries : Error { using Error::Error; };
struct NoRoot : Error { using Error::Error; };

struct UnknownMetric : Error { using Error::Error; };
struct Infeasible : Error { using Error::Error; };

struct AsymmetricInput : Error { using Error::Error; };
struct Misaligned : Error { using Error::Error; };

struct EmptyEvaluation : Error { using Error::Error; };

struct ConfigInvalid : Error { using Error::Error; };
struct StageFailed : Error { using Error::Error; };

// Deterministic RNG. mt19937_64 is bit-specified by the standard; the
// distribution transforms below are our own so streams are reproducible
// across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // Derives an independent stream from a base seed and a stream id.
    static Rng stream(std::uint64_t seed, std::uint64_t stream_id) {
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream_id + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return Rng(z ^ (z >> 31));
    }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        return n == 0 ? 0 : engine_() % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a, used for artifact cache keys.
inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a(s.data(), s.size(), h);
}

}  // namespace dgrcl
