#include "petdiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "petdiff/errors.hpp"

namespace petdiff {

namespace {

void check_pair(const Tensor& ref, const Tensor& test, const std::vector<uint8_t>& mask) {
    if (ref.shape() != test.shape()) throw DimError("metric images must share a shape");
    if (!mask.empty() && mask.size() != ref.numel())
        throw DimError("mask size does not match the images");
}

// [H,W] -> S=1; [S,H,W] -> leading slices. Anything else is unsupported.
void plane_dims(const Shape& s, int& slices, int& h, int& w) {
    if (s.size() == 2) {
        slices = 1;
        h = s[0];
        w = s[1];
    } else if (s.size() == 3) {
        slices = s[0];
        h = s[1];
        w = s[2];
    } else {
        throw DimError("metrics expect [H,W] or [S,H,W] images");
    }
}

// Separable weighted local mean with border renormalization; weights then sum
// to 1 over the in-bounds part of every window.
void window_mean(const double* src, double* dst, int h, int w, const double* k, int radius) {
    std::vector<double> tmp(static_cast<size_t>(h) * w);
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            double s = 0, wsum = 0;
            for (int d = -radius; d <= radius; ++d) {
                const int jj = j + d;
                if (jj < 0 || jj >= w) continue;
                s += k[d + radius] * src[static_cast<size_t>(i) * w + jj];
                wsum += k[d + radius];
            }
            tmp[static_cast<size_t>(i) * w + j] = s / wsum;
        }
    }
    for (int j = 0; j < w; ++j) {
        for (int i = 0; i < h; ++i) {
            double s = 0, wsum = 0;
            for (int d = -radius; d <= radius; ++d) {
                const int ii = i + d;
                if (ii < 0 || ii >= h) continue;
                s += k[d + radius] * tmp[static_cast<size_t>(ii) * w + j];
                wsum += k[d + radius];
            }
            dst[static_cast<size_t>(i) * w + j] = s / wsum;
        }
    }
}

// Dense SSIM map for one slice pair.
void ssim_map_slice(const float* x, const float* y, int h, int w, double c1, double c2,
                    double* out) {
    constexpr int R = (kSsimWindow - 1) / 2;
    double k[kSsimWindow];
    for (int i = -R; i <= R; ++i) k[i + R] = std::exp(-0.5 * i * i / (kSsimSigma * kSsimSigma));

    const size_t n = static_cast<size_t>(h) * w;
    std::vector<double> fx(n), fy(n), fxx(n), fyy(n), fxy(n);
    for (size_t i = 0; i < n; ++i) {
        const double a = x[i], b = y[i];
        fx[i] = a;
        fy[i] = b;
        fxx[i] = a * a;
        fyy[i] = b * b;
        fxy[i] = a * b;
    }
    std::vector<double> mx(n), my(n), mxx(n), myy(n), mxy(n);
    window_mean(fx.data(), mx.data(), h, w, k, R);
    window_mean(fy.data(), my.data(), h, w, k, R);
    window_mean(fxx.data(), mxx.data(), h, w, k, R);
    window_mean(fyy.data(), myy.data(), h, w, k, R);
    window_mean(fxy.data(), mxy.data(), h, w, k, R);

    for (size_t i = 0; i < n; ++i) {
        const double vx = mxx[i] - mx[i] * mx[i];
        const double vy = myy[i] - my[i] * my[i];
        const double cxy = mxy[i] - mx[i] * my[i];
        out[i] = ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) /
                 ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
}

double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace

double psnr(const Tensor& ref, const Tensor& test, const std::vector<uint8_t>& mask) {
    check_pair(ref, test, mask);
    const auto& r = ref.data();
    const auto& t = test.data();

    double mx = -std::numeric_limits<double>::infinity();
    for (float v : r) mx = std::max(mx, static_cast<double>(v));

    double se = 0;
    size_t n = 0;
    for (size_t i = 0; i < r.size(); ++i) {
        if (!mask.empty() && mask[i] == 0) continue;
        const double d = static_cast<double>(r[i]) - static_cast<double>(t[i]);
        se += d * d;
        ++n;
    }
    if (n == 0) throw MetricError("psnr: mask has no pixels");
    const double mse = se / static_cast<double>(n);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(mx * mx / mse);
}

double ssim(const Tensor& ref, const Tensor& test, const std::vector<uint8_t>& mask) {
    check_pair(ref, test, mask);
    int slices, h, w;
    plane_dims(ref.shape(), slices, h, w);
    if (h < kSsimWindow || w < kSsimWindow)
        throw MetricError("ssim: image smaller than the " + std::to_string(kSsimWindow) + "x" +
                          std::to_string(kSsimWindow) + " window");

    const auto& r = ref.data();
    const auto& t = test.data();
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (size_t i = 0; i < r.size(); ++i) {
        lo = std::min({lo, static_cast<double>(r[i]), static_cast<double>(t[i])});
        hi = std::max({hi, static_cast<double>(r[i]), static_cast<double>(t[i])});
    }
    const double L = hi - lo;
    if (L == 0.0) return 1.0;  // both images the same constant
    const double c1 = (kSsimK1 * L) * (kSsimK1 * L);
    const double c2 = (kSsimK2 * L) * (kSsimK2 * L);

    const size_t hw = static_cast<size_t>(h) * w;
    std::vector<double> map(static_cast<size_t>(slices) * hw);
    for (int s = 0; s < slices; ++s)
        ssim_map_slice(r.data() + s * hw, t.data() + s * hw, h, w, c1, c2, map.data() + s * hw);

    double sum = 0;
    size_t n = 0;
    for (size_t i = 0; i < map.size(); ++i) {
        if (!mask.empty() && mask[i] == 0) continue;
        sum += map[i];
        ++n;
    }
    if (n == 0) throw MetricError("ssim: mask has no pixels");
    return sum / static_cast<double>(n);
}

std::map<std::string, OrganScores> organ_metrics(const Tensor& ref, const Tensor& test,
                                                 const std::vector<int32_t>& mask,
                                                 const std::vector<OrganSpec>& organs) {
    if (mask.size() != ref.numel()) throw DimError("label mask size does not match the images");
    std::set<int32_t> known;
    for (const auto& o : organs) known.insert(o.label);
    for (int32_t m : mask)
        if (m != 0 && known.count(m) == 0)
            throw DataError("mask label " + std::to_string(m) + " is not in the organ table");

    std::map<std::string, OrganScores> out;
    std::vector<uint8_t> bin(mask.size());
    for (const auto& o : organs) {
        size_t live = 0;
        for (size_t i = 0; i < mask.size(); ++i) {
            bin[i] = mask[i] == o.label ? 1 : 0;
            live += bin[i];
        }
        if (live == 0) continue;  // absent organ: no entry rather than zeros
        out[o.name] = {psnr(ref, test, bin), ssim(ref, test, bin)};
    }
    return out;
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                    Alternative alternative) {
    if (a.size() != b.size()) throw DimError("wilcoxon: paired samples must have equal length");
    std::vector<double> d;
    d.reserve(a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        const double di = a[i] - b[i];
        if (!std::isfinite(di)) throw DataError("wilcoxon: non-finite difference");
        if (di != 0.0) d.push_back(di);
    }
    const int n = static_cast<int>(d.size());
    if (n < 5)
        throw InsufficientDataError("wilcoxon: " + std::to_string(n) +
                                    " nonzero differences, need at least 5");

    // Average ranks of |d|.
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int i, int j) { return std::abs(d[i]) < std::abs(d[j]); });
    std::vector<double> rank(n);
    std::vector<int> tie_sizes;
    for (int i = 0; i < n;) {
        int j = i;
        while (j < n && std::abs(d[order[j]]) == std::abs(d[order[i]])) ++j;
        const double avg = 0.5 * (i + 1 + j);  // mean of ranks i+1 .. j
        for (int k = i; k < j; ++k) rank[order[k]] = avg;
        tie_sizes.push_back(j - i);
        i = j;
    }

    double w_pos = 0;
    for (int i = 0; i < n; ++i)
        if (d[i] > 0) w_pos += rank[i];

    WilcoxonResult res;
    res.statistic = w_pos;
    res.n_effective = n;

    if (n <= 20) {
        // Exact null: distribution of the positive-rank sum over all 2^n sign
        // assignments. Doubled ranks are integers even with .5 average ranks.
        std::vector<int64_t> r2(n);
        int64_t total = 0;
        for (int i = 0; i < n; ++i) {
            r2[i] = std::llround(2.0 * rank[i]);
            total += r2[i];
        }
        std::vector<double> count(static_cast<size_t>(total) + 1, 0.0);
        count[0] = 1.0;
        for (int i = 0; i < n; ++i)
            for (int64_t s = total; s >= r2[i]; --s) count[s] += count[s - r2[i]];

        const int64_t w2 = std::llround(2.0 * w_pos);
        const double denom = std::pow(2.0, n);
        double p_le = 0, p_ge = 0;
        for (int64_t s = 0; s <= total; ++s) {
            if (s <= w2) p_le += count[s];
            if (s >= w2) p_ge += count[s];
        }
        p_le /= denom;
        p_ge /= denom;
        res.p_value = alternative == Alternative::Greater
                          ? p_ge
                          : std::min(1.0, 2.0 * std::min(p_le, p_ge));
    } else {
        const double nn = n;
        const double mean = nn * (nn + 1.0) / 4.0;
        double tie_corr = 0;
        for (int t : tie_sizes) tie_corr += static_cast<double>(t) * t * t - t;
        const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_corr / 48.0;
        const double sd = std::sqrt(var);
        if (alternative == Alternative::Greater) {
            res.p_value = normal_sf((w_pos - mean - 0.5) / sd);
        } else {
            const double dev = w_pos - mean;
            const double z = dev == 0.0 ? 0.0 : (dev - 0.5 * (dev > 0 ? 1.0 : -1.0)) / sd;
            res.p_value = std::min(1.0, 2.0 * normal_sf(std::abs(z)));
        }
    }
    return res;
}

}  // namespace petdiff
