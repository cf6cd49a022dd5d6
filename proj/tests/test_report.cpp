#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <petdiff/errors.hpp>
#include <petdiff/io.hpp>
#include <petdiff/metrics.hpp>
#include <petdiff/phantom.hpp>
#include <petdiff/report.hpp>
#include <petdiff/sampler.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "support/tempdir.hpp"

using namespace petdiff;
using petdiff::testing::TempDir;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kAllMethods = {"low", "unet-regression", "ddpm", "text-ddpm"};

// Dataset whose "denoised" outputs are the reference plus mode-dependent
// noise, so text-ddpm > ddpm > unet-regression in fidelity by construction.
fs::path make_scored_dataset(const TempDir& tmp) {
    DatasetConfig dc;
    dc.root = tmp / "ds";
    dc.n_samples = 12;
    dc.h = 32;
    dc.w = 32;
    dc.seed = 300;
    dc.encoder_seed = 66;
    dc.n_train = 5;
    dc.n_val = 1;
    dc.n_test = 6;
    generate_dataset(dc, default_organ_table());

    const DatasetSplit split = load_split(dc.root / "split.txt");
    const std::vector<std::pair<TrainMode, float>> noise = {
        {TrainMode::TextDdpm, 0.01f},
        {TrainMode::Ddpm, 0.05f},
        {TrainMode::UnetRegression, 0.15f},
    };
    for (const int64_t id : split.test) {
        const fs::path dir = dc.root / sample_dir_name(id);
        const PhantomSample s = read_sample(dir);
        for (size_t m = 0; m < noise.size(); ++m) {
            Rng rng(9000 + static_cast<uint64_t>(id) * 10 + m);
            std::vector<float> data = s.normal_dose.data();
            for (float& v : data) v += noise[m].second * static_cast<float>(rng.normal());
            write_denoised(dir, noise[m].first,
                           Tensor::from_data(s.normal_dose.shape(), std::move(data)));
        }
    }
    return dc.root;
}

std::vector<std::string> read_lines(const fs::path& file) {
    std::ifstream in(file);
    REQUIRE(static_cast<bool>(in));
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

std::string read_bytes(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    REQUIRE(static_cast<bool>(in));
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("star annotation follows the 0.001/0.01/0.05 thresholds") {
    CHECK(significance_stars(0.0004) == "***");
    CHECK(significance_stars(0.004) == "**");
    CHECK(significance_stars(0.04) == "*");
    CHECK(significance_stars(0.4) == "ns");
    CHECK(significance_stars(0.001) == "**");
    CHECK(significance_stars(0.01) == "*");
    CHECK(significance_stars(0.05) == "ns");
}

TEST_CASE("build_report scores every cell and reproduces direct metric calls") {
    TempDir tmp("report");
    const fs::path root = make_scored_dataset(tmp);
    const MetricReport rep = build_report(root, kAllMethods, tmp / "out");

    const std::vector<OrganSpec> organs = default_organ_table();
    REQUIRE(rep.regions.size() == organs.size() + 1);
    CHECK(rep.regions[0] == "whole");
    for (size_t i = 0; i < organs.size(); ++i) CHECK(rep.regions[i + 1] == organs[i].name);
    REQUIRE(rep.sample_ids.size() == 6);
    CHECK(rep.missing.empty());

    for (const int64_t id : rep.sample_ids) {
        const PhantomSample s = read_sample(root / sample_dir_name(id));
        REQUIRE(rep.cells.count(id) == 1);
        const auto& by_method = rep.cells.at(id);
        REQUIRE(by_method.size() == kAllMethods.size());

        // low is scored straight off the stored input
        const auto& low_cell = by_method.at("low");
        CHECK(low_cell.at("whole").psnr == psnr(s.normal_dose, s.low_dose));
        CHECK(low_cell.at("whole").ssim == ssim(s.normal_dose, s.low_dose));

        // organ regions present exactly when the organ has mask pixels
        std::set<int32_t> labels;
        for (const int32_t v : s.mask)
            if (v > 0) labels.insert(v);
        for (const auto& o : organs)
            CHECK(low_cell.count(o.name) == (labels.count(o.label) ? 1u : 0u));

        // fidelity ordering built into the fixture
        const double p_text = by_method.at("text-ddpm").at("whole").psnr;
        const double p_ddpm = by_method.at("ddpm").at("whole").psnr;
        const double p_unet = by_method.at("unet-regression").at("whole").psnr;
        CHECK(p_text > p_ddpm);
        CHECK(p_ddpm > p_unet);
    }

    // pairwise tests: 2 metrics x regions x method pairs, p in [0,1]
    const size_t n_pairs = kAllMethods.size() * (kAllMethods.size() - 1) / 2;
    REQUIRE(rep.tests.size() == 2 * rep.regions.size() * n_pairs);
    for (const PairTest& t : rep.tests) {
        if (!t.valid) continue;
        CHECK(t.p_value >= 0.0);
        CHECK(t.p_value <= 1.0);
    }

    // a whole-image test matches a direct wilcoxon call on the same cells
    for (const PairTest& t : rep.tests) {
        if (t.metric != "psnr" || t.region != "whole") continue;
        if (t.method_a != "ddpm" || t.method_b != "text-ddpm") continue;
        std::vector<double> a, b;
        for (const int64_t id : rep.sample_ids) {
            a.push_back(rep.cells.at(id).at("ddpm").at("whole").psnr);
            b.push_back(rep.cells.at(id).at("text-ddpm").at("whole").psnr);
        }
        const WilcoxonResult w = wilcoxon_signed_rank(a, b);
        REQUIRE(t.valid);
        CHECK(t.statistic == w.statistic);
        CHECK(t.p_value == w.p_value);
        CHECK(t.n_effective == w.n_effective);
    }
}

TEST_CASE("the machine-readable table is rectangular and byte-deterministic") {
    TempDir tmp("reportcsv");
    const fs::path root = make_scored_dataset(tmp);
    const MetricReport rep = build_report(root, kAllMethods, tmp / "out");

    const std::vector<std::string> lines = read_lines(tmp / "out" / "metrics.csv");
    CHECK(lines[0] == "sample_id,method,region,psnr,ssim");
    // one row per sample x method x region
    REQUIRE(lines.size() == 1 + 6 * kAllMethods.size() * rep.regions.size());

    size_t absent_rows = 0;
    size_t absent_cells = 0;
    for (size_t i = 1; i < lines.size(); ++i) {
        CHECK(std::count(lines[i].begin(), lines[i].end(), ',') == 4);
        if (lines[i].find(",absent,absent") != std::string::npos) ++absent_rows;
    }
    for (const auto& [id, by_method] : rep.cells)
        for (const auto& [method, regions] : by_method)
            absent_cells += rep.regions.size() - regions.size();
    CHECK(absent_rows == absent_cells);

    build_report(root, kAllMethods, tmp / "out2");
    CHECK(read_bytes(tmp / "out" / "metrics.csv") == read_bytes(tmp / "out2" / "metrics.csv"));
    CHECK(read_bytes(tmp / "out" / "summary.txt") == read_bytes(tmp / "out2" / "summary.txt"));

    const std::string summary = read_bytes(tmp / "out" / "summary.txt");
    CHECK(summary.find("== scores (mean +- std [n]) ==") != std::string::npos);
    CHECK(summary.find("== pairwise wilcoxon signed-rank ==") != std::string::npos);
    CHECK(summary.find("none") != std::string::npos);
}

TEST_CASE("missing outputs are listed and the rest of the report survives") {
    TempDir tmp("reportmiss");
    const fs::path root = make_scored_dataset(tmp);
    const DatasetSplit split = load_split(root / "split.txt");
    const int64_t victim = split.test.front();
    fs::remove(denoised_path(root / sample_dir_name(victim), TrainMode::TextDdpm));

    const MetricReport rep = build_report(root, kAllMethods, tmp / "out");
    REQUIRE(rep.missing.size() == 1);
    CHECK(rep.missing[0].first == victim);
    CHECK(rep.missing[0].second == "text-ddpm");
    CHECK(rep.cells.at(victim).count("text-ddpm") == 0);
    CHECK(rep.cells.at(victim).count("ddpm") == 1);

    const std::vector<std::string> lines = read_lines(tmp / "out" / "metrics.csv");
    CHECK(lines.size() == 1 + (6 * kAllMethods.size() - 1) * rep.regions.size());
    const std::string summary = read_bytes(tmp / "out" / "summary.txt");
    CHECK(summary.find("sample " + std::to_string(victim) + ": text-ddpm") != std::string::npos);

    // the text-ddpm tests now pair over the remaining five samples
    for (const PairTest& t : rep.tests)
        if (t.region == "whole" && t.method_b == "text-ddpm") CHECK(t.n_effective <= 5);
}

TEST_CASE("identical method outputs yield no informative pairs") {
    TempDir tmp("reportsame");
    const fs::path root = make_scored_dataset(tmp);
    const DatasetSplit split = load_split(root / "split.txt");
    for (const int64_t id : split.test) {
        const fs::path dir = root / sample_dir_name(id);
        fs::copy_file(denoised_path(dir, TrainMode::TextDdpm), denoised_path(dir, TrainMode::Ddpm),
                      fs::copy_options::overwrite_existing);
    }
    const MetricReport rep = build_report(root, {"ddpm", "text-ddpm"}, tmp / "out");
    for (const PairTest& t : rep.tests) {
        CHECK_FALSE(t.valid);
        CHECK(t.n_effective == 0);
    }
}

TEST_CASE("a bit-perfect restoration reports infinite psnr as the inf token") {
    TempDir tmp("reportinf");
    const fs::path root = make_scored_dataset(tmp);
    const DatasetSplit split = load_split(root / "split.txt");
    const int64_t id = split.test.front();
    const fs::path dir = root / sample_dir_name(id);
    const PhantomSample s = read_sample(dir);
    write_denoised(dir, TrainMode::UnetRegression, s.normal_dose);

    const MetricReport rep = build_report(root, kAllMethods, tmp / "out");
    CHECK(std::isinf(rep.cells.at(id).at("unet-regression").at("whole").psnr));

    bool found = false;
    for (const std::string& line : read_lines(tmp / "out" / "metrics.csv"))
        if (line.find("unet-regression,whole,inf,") != std::string::npos) found = true;
    CHECK(found);

    // the infinite-psnr sample drops out of that method's psnr pairs
    for (const PairTest& t : rep.tests)
        if (t.metric == "psnr" && t.region == "whole" && t.method_b == "unet-regression")
            CHECK(t.n_effective == 5);
}

TEST_CASE("report input validation") {
    TempDir tmp("reportbad");
    const fs::path root = make_scored_dataset(tmp);
    CHECK_THROWS_AS(build_report(root, {}, tmp / "out"), ConfigError);
    CHECK_THROWS_AS(build_report(root, {"low", "low"}, tmp / "out"), ConfigError);
    CHECK_THROWS_AS(build_report(root, {"cnn"}, tmp / "out"), ConfigError);
    CHECK_THROWS_AS(build_report(tmp / "nowhere", {"low"}, tmp / "out"), IoError);

    DatasetConfig dc;
    dc.root = tmp / "no_test";
    dc.n_samples = 3;
    dc.h = 32;
    dc.w = 32;
    dc.seed = 1;
    dc.encoder_seed = 2;
    dc.n_train = 2;
    dc.n_val = 1;
    dc.n_test = 0;
    generate_dataset(dc, default_organ_table());
    CHECK_THROWS_AS(build_report(dc.root, {"low"}, tmp / "out"), DataError);
}
