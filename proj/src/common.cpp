#include "abd/common.hpp"

#include <algorithm>
#include <cstdio>

namespace abd {

uint64_t stable_hash64(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

namespace {

uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

} // namespace

uint64_t mix_seed(uint64_t seed, std::string_view purpose) {
    uint64_t x = seed ^ stable_hash64(purpose);
    return splitmix64(x);
}

Rng::Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& s : s_) s = splitmix64(x);
}

uint64_t Rng::next_u64() {
    uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int lo, int hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
}

double Rng::normal(double mean, double sd) {
    double u1 = 1.0 - uniform(); // (0, 1]
    double u2 = uniform();
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    return mean + sd * z;
}

double Rng::log_normal(double mu_log, double sigma_log) {
    return std::exp(normal(mu_log, sigma_log));
}

int Rng::categorical(std::span<const double> probs) {
    double total = 0.0;
    for (double p : probs) total += p;
    double r = uniform() * total;
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (r < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
}

std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double percentile_sorted(std::span<const double> sorted, double p) {
    if (sorted.empty()) throw AbdError("percentile of empty sample");
    if (sorted.size() == 1) return sorted[0];
    double rank = p * static_cast<double>(sorted.size() - 1);
    size_t lo = static_cast<size_t>(rank);
    if (lo >= sorted.size() - 1) return sorted.back();
    double frac = rank - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

double mean_of(std::span<const double> v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double pop_std(std::span<const double> v) {
    if (v.empty()) return 0.0;
    double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
}

double sample_std(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

double median_of(std::vector<double> v) {
    if (v.empty()) throw AbdError("median of empty sample");
    std::sort(v.begin(), v.end());
    size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string ids_digest(std::vector<std::string> ids) {
    std::sort(ids.begin(), ids.end());
    uint64_t h = 1469598103934665603ull;
    for (const auto& id : ids) {
        h ^= stable_hash64(id);
        h *= 1099511628211ull;
    }
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace abd
