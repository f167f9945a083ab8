#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace abd {

/// Data / validation failure. The CLI maps this to exit code 2.
struct AbdError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// FNV-1a, used wherever a stable (platform-independent) hash is needed.
uint64_t stable_hash64(std::string_view s);

/// Derives a sub-seed from a master seed and a purpose string, so that
/// independent consumers of randomness never share a stream.
uint64_t mix_seed(uint64_t seed, std::string_view purpose);

/// xoshiro256++ with splitmix64 seeding. All distributions are implemented
/// here rather than via <random> so that output is identical across
/// standard libraries.
class Rng {
  public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64();
    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi);
    /// Inclusive bounds.
    int uniform_int(int lo, int hi);
    /// Box-Muller.
    double normal(double mean = 0.0, double sd = 1.0);
    double log_normal(double mu_log, double sigma_log);
    /// Index sampled proportionally to probs (need not be normalized).
    int categorical(std::span<const double> probs);
    bool bernoulli(double p) { return uniform() < p; }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_u64() % i);
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    uint64_t s_[4];
};

/// Round-trip-exact decimal rendering (17 significant digits).
std::string format_g17(double v);

/// Linear-interpolation percentile over an already sorted sample,
/// p in [0, 1]. rank = p * (n - 1), interpolate between neighbours.
double percentile_sorted(std::span<const double> sorted, double p);

double mean_of(std::span<const double> v);
/// Population standard deviation (divide by n).
double pop_std(std::span<const double> v);
/// Sample standard deviation (divide by n - 1); 0 when n < 2.
double sample_std(std::span<const double> v);
/// Median; averages the two middle elements for even n. Copies and sorts.
double median_of(std::vector<double> v);

/// Lowercase hash hex of a sorted id list, used for provenance tags.
std::string ids_digest(std::vector<std::string> ids);

} // namespace abd
