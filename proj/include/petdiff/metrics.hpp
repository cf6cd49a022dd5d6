#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "petdiff/phantom.hpp"
#include "petdiff/tensor.hpp"

namespace petdiff {

// Image quality metrics over activity images. Images are [H,W] or [S,H,W];
// with a leading slice axis each slice is scored in-plane and pixels pool
// across slices. Masks are 0/1 bytes over the same layout; an empty vector
// means "no mask", a supplied mask with no live pixel is a MetricError.

// 10*log10(MAX^2/MSE), MAX = max over the whole reference image even when a
// mask restricts the MSE. Zero MSE reports +infinity.
double psnr(const Tensor& ref, const Tensor& test, const std::vector<uint8_t>& mask = {});

// Mean local SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, data
// range = joint min/max of the pair (symmetric in ref/test). Window weights
// renormalize where the window overhangs the border, so the map covers every
// pixel; the masked variant averages the map over mask pixels. Both images
// the same constant -> 1.0.
double ssim(const Tensor& ref, const Tensor& test, const std::vector<uint8_t>& mask = {});

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimK1 = 0.01;
constexpr double kSsimK2 = 0.03;

struct OrganScores {
    double psnr = 0.0;
    double ssim = 0.0;
};

// Masked psnr/ssim per organ present in the label mask; organs without any
// pixel are omitted (absent, not zero). Labels outside the table are a
// DataError.
std::map<std::string, OrganScores> organ_metrics(const Tensor& ref, const Tensor& test,
                                                 const std::vector<int32_t>& mask,
                                                 const std::vector<OrganSpec>& organs);

enum class Alternative { TwoSided, Greater };

struct WilcoxonResult {
    double statistic = 0.0;  // W = sum of positive-difference ranks
    double p_value = 1.0;
    int n_effective = 0;
};

// Paired signed-rank test. Zero differences are dropped, tied |d| get average
// ranks. n <= 20 uses the exact null distribution (rank-sum enumeration via
// dynamic programming, ties included); larger n uses the normal approximation
// with tie and continuity corrections. Fewer than 5 effective pairs is an
// InsufficientDataError.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                    Alternative alternative = Alternative::TwoSided);

}  // namespace petdiff
