#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace mose {

std::uint64_t fnv1a64(const void* data, std::size_t len,
                      std::uint64_t h = 14695981039346656037ull);
std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 14695981039346656037ull);

// Deterministic splittable generator. Every consumer derives its own stream
// from (root seed, label) so draws never depend on call order elsewhere.
// Core is splitmix64; distributions are implemented here rather than with
// <random> so sequences are identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    // Independent child stream; depends only on the seed this Rng was
    // constructed with and the label, not on how much was drawn so far.
    Rng stream(std::string_view label) const;

    std::uint64_t next_u64();
    double uniform();                 // [0, 1)
    double uniform(double lo, double hi);
    double normal();                  // N(0, 1)
    double normal(double mean, double stddev);
    int uniform_int(int lo, int hi);  // [lo, hi)

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<int>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t seed_;   // identity, used for splitting
    std::uint64_t state_;  // position
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace mose
