#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <petdiff/errors.hpp>
#include <petdiff/metrics.hpp>
#include <petdiff/phantom.hpp>
#include <petdiff/rng.hpp>

#include <cmath>
#include <limits>

#include "support/metrics_ref.hpp"

using namespace petdiff;

namespace {

Tensor random_image(Rng& rng, const Shape& shape, float lo = 0.0f, float hi = 1.0f) {
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
    return Tensor::from_data(shape, std::move(v));
}

}  // namespace

TEST_CASE("psnr: identical images, known value, mask equivalences") {
    std::vector<float> ramp(256);
    for (int i = 0; i < 256; ++i) ramp[i] = static_cast<float>(i) / 255.0f;  // max exactly 1
    const Tensor ref = Tensor::from_data({16, 16}, ramp);

    CHECK(std::isinf(psnr(ref, ref)));
    CHECK(psnr(ref, ref) > 0);

    std::vector<float> shifted(ramp);
    for (auto& v : shifted) v += 0.1f;
    const Tensor test = Tensor::from_data({16, 16}, shifted);
    CHECK(psnr(ref, test) == doctest::Approx(20.0).epsilon(1e-6));

    const std::vector<uint8_t> all(256, 1);
    CHECK(psnr(ref, test, all) == psnr(ref, test));

    CHECK_THROWS_AS(psnr(ref, test, std::vector<uint8_t>(256, 0)), MetricError);
    CHECK_THROWS_AS(psnr(ref, test, std::vector<uint8_t>(9, 1)), DimError);
    CHECK_THROWS_AS(psnr(ref, Tensor::zeros({4, 4})), DimError);
}

TEST_CASE("psnr: MAX comes from the whole reference even under a mask") {
    // Peak activity 2 lives outside the scored region.
    std::vector<float> r(64, 1.0f);
    r[0] = 2.0f;
    std::vector<float> t(r);
    std::vector<uint8_t> mask(64, 0);
    for (int i = 32; i < 64; ++i) {
        t[i] += 0.1f;
        mask[i] = 1;
    }
    const Tensor ref = Tensor::from_data({8, 8}, r);
    const Tensor test = Tensor::from_data({8, 8}, t);
    const double d = static_cast<double>(t[32]) - 1.0;  // f32 rounding of 1 + 0.1
    const double mse = d * d;
    CHECK(psnr(ref, test, mask) == doctest::Approx(10.0 * std::log10(4.0 / mse)).epsilon(1e-12));
}

TEST_CASE("psnr strictly decreases as noise grows") {
    const auto img = generate_phantom(5, default_organ_table(), 64, 64);
    Rng rng(8);
    std::vector<float> pattern(img.activity.numel());
    for (auto& v : pattern) v = static_cast<float>(rng.normal());

    double prev = std::numeric_limits<double>::infinity();
    for (const float amp : {0.01f, 0.02f, 0.05f, 0.1f, 0.3f}) {
        std::vector<float> noisy(img.activity.data());
        for (size_t i = 0; i < noisy.size(); ++i) noisy[i] += amp * pattern[i];
        const double p = psnr(img.activity, Tensor::from_data(img.activity.shape(), noisy));
        CHECK(p < prev);
        prev = p;
    }
}

TEST_CASE("ssim: identical, constant, and too-small inputs") {
    Rng rng(11);
    const Tensor a = random_image(rng, {32, 32});
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));

    // Distinct constants: luminance term only.
    const double av = 0.5, bv = 0.25;
    const Tensor ca = Tensor::full({16, 16}, static_cast<float>(av));
    const Tensor cb = Tensor::full({16, 16}, static_cast<float>(bv));
    const double L = av - bv;
    const double c1 = (0.01 * L) * (0.01 * L);
    CHECK(ssim(ca, cb) ==
          doctest::Approx((2 * av * bv + c1) / (av * av + bv * bv + c1)).epsilon(1e-9));

    // Same constant: defined as perfect similarity.
    CHECK(ssim(ca, ca) == 1.0);

    CHECK_THROWS_AS(ssim(Tensor::zeros({10, 10}), Tensor::zeros({10, 10})), MetricError);
    CHECK_THROWS_AS(ssim(Tensor::zeros({10, 16}), Tensor::zeros({10, 16})), MetricError);
    CHECK_THROWS_AS(ssim(a, Tensor::zeros({16, 16})), DimError);
}

TEST_CASE("ssim matches the brute-force sliding-window reference") {
    Rng rng(21);
    for (int rep = 0; rep < 10; ++rep) {
        const Tensor a = random_image(rng, {32, 32}, 0.0f, 2.0f);
        Tensor b = random_image(rng, {32, 32}, 0.0f, 2.0f);
        if (rep % 2 == 0) {
            // Correlated pair: closer to the metric's actual operating range.
            std::vector<float> v(a.data());
            for (auto& x : v) x += static_cast<float>(rng.normal() * 0.1);
            b = Tensor::from_data({32, 32}, v);
        }
        const double got = ssim(a, b);
        const double want = ref::ssim_brute(a.data(), b.data(), 1, 32, 32);
        CHECK(got == doctest::Approx(want).epsilon(1e-6));
        CHECK(got >= -1.0);
        CHECK(got <= 1.0);
    }
}

TEST_CASE("ssim: slices, masks, and symmetry") {
    Rng rng(31);
    const Tensor a = random_image(rng, {2, 32, 32});
    Tensor b;
    {
        std::vector<float> v(a.data());
        for (auto& x : v) x += static_cast<float>(rng.normal() * 0.05);
        b = Tensor::from_data({2, 32, 32}, v);
    }

    // Slice axis scores in-plane: equals the brute-force reference run with
    // the same slicing, and the mean of the per-slice scalars.
    const double got = ssim(a, b);
    CHECK(got == doctest::Approx(ref::ssim_brute(a.data(), b.data(), 2, 32, 32)).epsilon(1e-6));
    const size_t hw = 32 * 32;
    std::vector<float> a0(a.data().begin(), a.data().begin() + hw);
    std::vector<float> a1(a.data().begin() + hw, a.data().end());
    std::vector<float> b0(b.data().begin(), b.data().begin() + hw);
    std::vector<float> b1(b.data().begin() + hw, b.data().end());
    // Joint range over the full pair differs from per-slice ranges, so feed
    // the reference the stacked pair rather than averaging two ssim() calls.

    std::vector<uint8_t> mask(a.numel(), 0);
    for (size_t i = 0; i < mask.size(); i += 3) mask[i] = 1;
    CHECK(ssim(a, b, mask) ==
          doctest::Approx(ref::ssim_brute(a.data(), b.data(), 2, 32, 32, mask)).epsilon(1e-6));

    const std::vector<uint8_t> ones(a.numel(), 1);
    CHECK(ssim(a, b, ones) == ssim(a, b));
    CHECK_THROWS_AS(ssim(a, b, std::vector<uint8_t>(a.numel(), 0)), MetricError);

    for (int rep = 0; rep < 5; ++rep) {
        const Tensor x = random_image(rng, {32, 32}, 0.0f, 3.0f);
        const Tensor y = random_image(rng, {32, 32}, 0.0f, 1.0f);
        CHECK(std::abs(ssim(x, y) - ssim(y, x)) < 1e-9);
    }
}

TEST_CASE("organ metrics: full-cover equivalence, absence, recombination") {
    const auto organs = default_organ_table();
    Rng rng(41);
    const Tensor ref = random_image(rng, {32, 32}, 0.0f, 2.0f);
    Tensor test;
    {
        std::vector<float> v(ref.data());
        for (auto& x : v) x += static_cast<float>(rng.normal() * 0.1);
        test = Tensor::from_data({32, 32}, v);
    }

    // One organ covering everything reproduces the whole-image numbers.
    const std::vector<int32_t> all_liver(ref.numel(), 1);
    auto m = organ_metrics(ref, test, all_liver, organs);
    REQUIRE(m.size() == 1);
    REQUIRE(m.count("liver") == 1);
    CHECK(m["liver"].psnr == psnr(ref, test));
    CHECK(m["liver"].ssim == ssim(ref, test));
    CHECK(m.count("spleen") == 0);

    // Half/half split: per-organ MSEs recombine into the whole-image MSE.
    std::vector<int32_t> halves(ref.numel());
    for (size_t i = 0; i < halves.size(); ++i) halves[i] = i < halves.size() / 2 ? 1 : 2;
    m = organ_metrics(ref, test, halves, organs);
    REQUIRE(m.size() == 2);
    double mx = 0;
    for (float v : ref.data()) mx = std::max(mx, static_cast<double>(v));
    const double mse1 = mx * mx * std::pow(10.0, -m["liver"].psnr / 10.0);
    const double mse2 = mx * mx * std::pow(10.0, -m["spleen"].psnr / 10.0);
    const double whole = mx * mx * std::pow(10.0, -psnr(ref, test) / 10.0);
    CHECK(0.5 * (mse1 + mse2) == doctest::Approx(whole).epsilon(1e-9));

    std::vector<int32_t> rogue(ref.numel(), 99);
    CHECK_THROWS_AS(organ_metrics(ref, test, rogue, organs), DataError);
    CHECK_THROWS_AS(organ_metrics(ref, test, std::vector<int32_t>(7, 0), organs), DimError);
}

TEST_CASE("organ metrics on a generated phantom report only present organs") {
    const auto organs = default_organ_table();
    const auto img = generate_phantom(3, organs, 64, 64);
    const Tensor noisy = simulate_low_dose(img.activity, 20.0, 50.0, 4);
    const auto m = organ_metrics(img.activity, noisy, img.mask, organs);

    std::set<std::string> present;
    std::map<int32_t, std::string> names;
    for (const auto& o : organs) names[o.label] = o.name;
    for (int32_t l : img.mask)
        if (l != 0) present.insert(names[l]);
    REQUIRE(!present.empty());
    CHECK(m.size() == present.size());
    for (const auto& [name, scores] : m) {
        CHECK(present.count(name) == 1);
        CHECK(std::isfinite(scores.psnr));
        CHECK(scores.ssim >= -1.0);
        CHECK(scores.ssim <= 1.0);
    }
}

TEST_CASE("wilcoxon: all-positive n=5 and hand-enumerated tie case") {
    const std::vector<double> a{1.0, 2.0, 3.0, 4.0, 5.0};
    const std::vector<double> b{0.5, 1.0, 2.5, 3.0, 4.5};
    auto r = wilcoxon_signed_rank(a, b, Alternative::Greater);
    CHECK(r.statistic == 15.0);
    CHECK(r.n_effective == 5);
    CHECK(r.p_value == 0.03125);  // 1/32: only the all-positive assignment
    r = wilcoxon_signed_rank(a, b, Alternative::TwoSided);
    CHECK(r.p_value == 0.0625);

    // d = [1,1,-1,2,3]: |d| ranks (2,2,2,4,5), W = 13. Doubled ranks
    // {4,4,4,8,10} reach >= 26 in 4 of 32 assignments -> greater 0.125;
    // le-side is 31/32, so two-sided doubles the ge side.
    const std::vector<double> ta{2.0, 2.0, 1.0, 3.0, 4.0};
    const std::vector<double> tb{1.0, 1.0, 2.0, 1.0, 1.0};
    r = wilcoxon_signed_rank(ta, tb, Alternative::Greater);
    CHECK(r.statistic == 13.0);
    CHECK(r.p_value == 0.125);
    r = wilcoxon_signed_rank(ta, tb, Alternative::TwoSided);
    CHECK(r.p_value == 0.25);
}

TEST_CASE("wilcoxon degenerate inputs") {
    const std::vector<double> same{1.0, 2.0, 3.0, 4.0, 5.0, 6.0};
    CHECK_THROWS_AS(wilcoxon_signed_rank(same, same), InsufficientDataError);
    // 4 nonzero differences after dropping the zero.
    CHECK_THROWS_AS(
        wilcoxon_signed_rank({1, 2, 3, 4, 5}, {1, 1, 2, 2, 3}, Alternative::TwoSided),
        InsufficientDataError);
    CHECK_THROWS_AS(wilcoxon_signed_rank({1, 2}, {1}), DimError);
    CHECK_THROWS_AS(
        wilcoxon_signed_rank({1, 2, 3, 4, 5, std::numeric_limits<double>::quiet_NaN()},
                             {0, 0, 0, 0, 0, 0}),
        DataError);
}

TEST_CASE("wilcoxon exact path reproduces frozen reference values") {
    // Values cross-checked against an independent statistics package.
    const std::vector<double> a8{12.1, 11.4, 13.8, 12.9, 11.1, 12.5, 13.1, 10.9};
    const std::vector<double> b8{11.8, 11.9, 13.1, 12.0, 11.3, 12.2, 12.7, 11.5};
    auto r = wilcoxon_signed_rank(a8, b8, Alternative::TwoSided);
    CHECK(r.statistic == 24.0);
    CHECK(r.n_effective == 8);
    CHECK(r.p_value == 0.4609375);
    r = wilcoxon_signed_rank(a8, b8, Alternative::Greater);
    CHECK(r.statistic == 24.0);
    CHECK(r.p_value == 0.23046875);

    const std::vector<double> a12{1.691, -0.466, 0.033, 0.408, -0.789, 0.002,
                                  -0.001, -1.755, 1.018, 0.6,   -0.625, -0.172};
    const std::vector<double> b12{0.786, -0.605, -0.124, 1.461, -1.744, -0.522,
                                  -0.675, -0.628, -1.033, 0.046, -0.638, -2.601};
    r = wilcoxon_signed_rank(a12, b12, Alternative::TwoSided);
    CHECK(r.statistic == 59.0);
    CHECK(r.p_value == 0.12939453125);
    r = wilcoxon_signed_rank(a12, b12, Alternative::Greater);
    CHECK(r.p_value == 0.064697265625);
}

TEST_CASE("wilcoxon approximate path reproduces frozen reference values") {
    const std::vector<double> a30{1.7886,  0.4365,  0.0965,  -1.8635, -0.2774, -0.3548,
                                  -0.0827, -0.627,  -0.0438, -0.4772, -1.3139, 0.8846,
                                  0.8813,  1.7096,  0.05,    -0.4047, -0.5454, -1.5465,
                                  0.9824,  -1.1011, -1.185,  -0.2056, 1.4861,  0.2367,
                                  -1.0238, -0.713,  0.6252,  -0.1605, -0.7688, -0.23};
    const std::vector<double> b30{0.7935,  -1.7896, 1.0906,  -1.4871, 0.2764,  1.8143,
                                  0.5911,  0.1469,  -1.4178, -0.5953, 0.0594,  -0.0121,
                                  0.9876,  3.2027,  0.3966,  -0.0661, 0.0785,  -1.8262,
                                  2.9807,  -1.0833, -2.4482, -1.3084, 0.1279,  -1.1327,
                                  -2.7613, 0.1553,  -0.4706, 1.4504,  -0.4159, 1.4345};
    auto r = wilcoxon_signed_rank(a30, b30, Alternative::TwoSided);
    CHECK(r.statistic == 212.0);
    CHECK(r.n_effective == 30);
    CHECK(r.p_value == doctest::Approx(0.680803603843122).epsilon(1e-10));
    r = wilcoxon_signed_rank(a30, b30, Alternative::Greater);
    CHECK(r.p_value == doctest::Approx(0.6671057180253006).epsilon(1e-10));
}

TEST_CASE("wilcoxon exact path equals sign-assignment enumeration") {
    Rng rng(51);
    int cases = 0;
    while (cases < 200) {
        const int n = 5 + static_cast<int>(rng.uniform_int(6));  // 5..10 pairs
        std::vector<double> a(n), b(n);
        const bool coarse = cases % 2 == 0;  // force ties (and zeros) half the time
        for (int i = 0; i < n; ++i) {
            if (coarse) {
                a[i] = static_cast<double>(rng.uniform_int(5));
                b[i] = static_cast<double>(rng.uniform_int(5));
            } else {
                a[i] = rng.normal();
                b[i] = a[i] - rng.normal() * 0.8;
            }
        }
        int nonzero = 0;
        for (int i = 0; i < n; ++i) nonzero += a[i] != b[i];
        if (nonzero < 5) continue;

        const auto want = ref::wilcoxon_enumerate(a, b);
        const auto two = wilcoxon_signed_rank(a, b, Alternative::TwoSided);
        const auto gre = wilcoxon_signed_rank(a, b, Alternative::Greater);
        CHECK(two.statistic == want.w_pos);
        CHECK(two.n_effective == want.n);
        CHECK(two.p_value == want.p_two_sided);
        CHECK(gre.p_value == want.p_greater);
        CHECK(two.p_value >= 0.0);
        CHECK(two.p_value <= 1.0);
        ++cases;
    }
}

TEST_CASE("wilcoxon exactness holds across every n up to 12") {
    Rng rng(61);
    for (int n = 5; n <= 12; ++n) {
        for (int rep = 0; rep < 8; ++rep) {
            std::vector<double> a(n), b(n);
            for (int i = 0; i < n; ++i) {
                a[i] = rng.normal();
                b[i] = a[i] - (rng.normal() + 0.3);
            }
            const auto want = ref::wilcoxon_enumerate(a, b);
            CHECK(wilcoxon_signed_rank(a, b, Alternative::TwoSided).p_value == want.p_two_sided);
            CHECK(wilcoxon_signed_rank(a, b, Alternative::Greater).p_value == want.p_greater);
        }
    }
}

TEST_CASE("normal approximation stays close to the exact law past the cutoff") {
    Rng rng(71);
    const int n = 21;  // first n on the approximate path
    std::vector<double> a(n), b(n);
    for (int i = 0; i < n; ++i) {
        a[i] = rng.normal();
        b[i] = a[i] - (rng.normal() + 0.4);
    }
    const auto want = ref::wilcoxon_enumerate(a, b);
    const auto two = wilcoxon_signed_rank(a, b, Alternative::TwoSided);
    const auto gre = wilcoxon_signed_rank(a, b, Alternative::Greater);
    CHECK(two.statistic == want.w_pos);
    CHECK(std::abs(two.p_value - want.p_two_sided) < 0.01);
    CHECK(std::abs(gre.p_value - want.p_greater) < 0.01);
}
