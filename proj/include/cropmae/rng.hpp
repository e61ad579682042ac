#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string_view>
#include <utility>

namespace cropmae {

namespace detail {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace detail

/// Counter-based SplitMix64 stream.
///
/// Output i of a stream is mix64(base + (i + 1) * golden), so a stream is fully
/// described by (seed, stream_id, counter) and can be reproduced on any host
/// or worker. Only our own distribution code is used on top of it; the std
/// distributions are implementation-defined and would break reproducibility.
class Rng {
public:
    static constexpr std::string_view kAlgorithm = "splitmix64-stream-v1";

    using result_type = std::uint64_t;

    Rng() : Rng(0, 0) {}

    Rng(std::uint64_t seed, std::uint64_t stream_id)
        : seed_(seed), stream_(stream_id),
          base_(detail::mix64(seed ^ detail::mix64(stream_id * detail::kGolden + 0x632BE59BD9B4E019ULL))) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
    result_type operator()() { return next_u64(); }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_; }
    std::uint64_t counter() const { return counter_; }
    void set_counter(std::uint64_t counter) {
        counter_ = counter;
        has_spare_normal_ = false;
    }

    /// Independent child stream; depends only on this stream's identity, not its counter.
    Rng derive(std::uint64_t sub_stream) const {
        return Rng(seed_, detail::mix64(stream_ ^ detail::mix64(sub_stream + 0x1D8E4E27C47D124FULL)));
    }

    std::uint64_t next_u64() {
        ++counter_;
        return detail::mix64(base_ + counter_ * detail::kGolden);
    }

    // [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) (Lemire's multiply-shift with rejection).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
        auto low = static_cast<std::uint64_t>(m);
        if (low < n) {
            const std::uint64_t threshold = (0 - n) % n;
            while (low < threshold) {
                m = static_cast<unsigned __int128>(next_u64()) * n;
                low = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    // Inclusive integer range.
    std::int64_t range(std::int64_t lo, std::int64_t hi) {
        if (hi <= lo) return lo;
        return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo) + 1));
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        if (has_spare_normal_) {
            has_spare_normal_ = false;
            return spare_normal_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_normal_ = r * std::sin(theta);
        has_spare_normal_ = true;
        return r * std::cos(theta);
    }

    // Normal(0, std) resampled until it lies within +-2 std.
    double truncated_normal(double std_dev) {
        for (;;) {
            const double z = normal();
            if (std::abs(z) <= 2.0) return z * std_dev;
        }
    }

    template <class T>
    void shuffle(std::span<T> values) {
        for (std::size_t i = values.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(values[i - 1], values[j]);
        }
    }

private:
    std::uint64_t seed_ = 0;
    std::uint64_t stream_ = 0;
    std::uint64_t base_ = 0;
    std::uint64_t counter_ = 0;
    double spare_normal_ = 0.0;
    bool has_spare_normal_ = false;
};

}  // namespace cropmae
