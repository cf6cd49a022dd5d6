#pragma once

#include <cstdint>
#include <vector>

namespace petdiff::ref {

// Brute-force SSIM: per-pixel 11x11 Gaussian window evaluated with direct 2D
// loops and two-pass moments, f64 throughout. Shares only the metric
// definition (window, constants, joint data range, border renormalization)
// with the production code, none of the algebra or code.
double ssim_brute(const std::vector<float>& ref, const std::vector<float>& test, int slices,
                  int h, int w, const std::vector<uint8_t>& mask = {});

struct WilcoxonRef {
    double w_pos = 0.0;
    double p_greater = 1.0;
    double p_two_sided = 1.0;
    int n = 0;
};

// Explicit enumeration of all 2^n sign assignments (n <= ~22). Zero
// differences dropped, tied |d| get average ranks.
WilcoxonRef wilcoxon_enumerate(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace petdiff::ref
