#include "petdiff/rng.hpp"

#include <cmath>
#include <sstream>

#include "petdiff/errors.hpp"

namespace petdiff {

double Rng::uniform() {
    // 53 random bits -> [0, 1), the usual double mantissa construction.
    return (engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

int64_t Rng::uniform_int(int64_t n) {
    if (n <= 0) throw ContractError("uniform_int: n must be positive");
    // Rejection-free would bias; rejection keeps it exact.
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return static_cast<int64_t>(x % un);
}

double Rng::normal() {
    // Box-Muller, cosine branch only. u1 shifted away from 0 for log().
    const double u1 = ((engine_() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = (engine_() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

int64_t Rng::poisson(double mean) {
    if (mean < 0.0 || !std::isfinite(mean)) {
        throw DataError("poisson: mean must be finite and non-negative");
    }
    if (mean == 0.0) return 0;
    if (mean < 10.0) {
        // Knuth: count uniforms until their product drops below exp(-mean).
        const double limit = std::exp(-mean);
        int64_t k = 0;
        double prod = uniform();
        while (prod > limit) {
            ++k;
            prod *= uniform();
        }
        return k;
    }
    // PTRS (Hoermann 1993), valid for mean >= 10.
    const double b = 0.931 + 2.53 * std::sqrt(mean);
    const double a = -0.059 + 0.02483 * b;
    const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    const double v_r = 0.9277 - 3.6224 / (b - 2.0);
    const double log_mean = std::log(mean);
    for (;;) {
        const double u = uniform() - 0.5;
        const double v = uniform();
        const double us = 0.5 - std::fabs(u);
        const double kf = std::floor((2.0 * a / us + b) * u + mean + 0.43);
        if (us >= 0.07 && v <= v_r) return static_cast<int64_t>(kf);
        if (kf < 0.0 || (us < 0.013 && v > us)) continue;
        const double lhs = std::log(v * inv_alpha / (a / (us * us) + b));
        const double rhs = kf * log_mean - mean - std::lgamma(kf + 1.0);
        if (lhs <= rhs) return static_cast<int64_t>(kf);
    }
}

std::string Rng::state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) throw FormatError("rng state: unparsable engine state");
}

}  // namespace petdiff
