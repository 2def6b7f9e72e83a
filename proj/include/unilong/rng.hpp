#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace unilong {

// Seeded RNG for reproducible experiments. std::mt19937_64 is fully
// specified by the standard, but the std distributions are not, so the
// transforms live here. Same seed -> same stream on every platform.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1) with 53-bit resolution
    double uniform01() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + uniform01() * (hi - lo);
    }

    // Box-Muller; one value per call, no caching, to keep the stream
    // position independent of call parity.
    double gaussian(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform01();
        double u2 = uniform01();
        if (u1 < 1e-300) u1 = 1e-300;
        double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
        return mean + z * stddev;
    }

    // integer in [0, n)
    uint64_t below(uint64_t n) {
        // modulo bias is irrelevant at our n << 2^64
        return engine_() % n;
    }

    std::vector<double> gaussian_vec(std::size_t n, double stddev = 1.0) {
        std::vector<double> v(n);
        for (auto& x : v) x = gaussian(0.0, stddev);
        return v;
    }

    // random direction on the unit sphere in R^n
    std::vector<double> unit_vec(std::size_t n) {
        std::vector<double> v = gaussian_vec(n);
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-12) { v.assign(n, 0.0); v[0] = 1.0; return v; }
        for (double& x : v) x /= norm;
        return v;
    }

private:
    std::mt19937_64 engine_;
};

} // namespace unilong
