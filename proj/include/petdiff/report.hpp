#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "petdiff/metrics.hpp"
#include "petdiff/phantom.hpp"

namespace petdiff {

// Fig.-5-style star convention: *** / ** / * below 0.001 / 0.01 / 0.05,
// otherwise "ns".
std::string significance_stars(double p);

struct PairTest {
    std::string method_a, method_b;
    std::string metric;  // "psnr" | "ssim"
    std::string region;
    int n_effective = 0;   // pairs left after dropping equal-valued ones
    bool valid = false;    // false: fewer than 5 informative pairs
    double statistic = 0.0;
    double p_value = 0.0;
};

struct MetricReport {
    std::vector<std::string> methods;
    std::vector<std::string> regions;  // "whole", then the organ table order
    std::vector<int64_t> sample_ids;   // the test split, ascending
    // sample -> method -> region -> scores. A method with no output on disk
    // has no entry; an organ with no pixels in the sample's mask has no
    // region entry (absent, not zero).
    std::map<int64_t, std::map<std::string, std::map<std::string, OrganScores>>> cells;
    std::vector<std::pair<int64_t, std::string>> missing;  // outputs absent on disk
    std::vector<PairTest> tests;
};

// Scores every test-split sample for each method against the normal-dose
// reference, whole-image and per organ, then runs pairwise Wilcoxon
// signed-rank tests per metric and region. Writes out_dir/metrics.csv (one
// row per sample x method x region; organ cells empty in the mask carry the
// token `absent`, +infinity PSNR the token `inf`) and out_dir/summary.txt
// (mean +- std per method/region plus star-annotated tests). Both files are
// byte-deterministic for identical inputs.
//
// The reserved method name "low" scores the stored low-dose input itself;
// any other method must be a train mode name and reads the sample's
// denoised_<method>.f32raw. Missing files are collected in `missing`, their
// cells skipped, and the report still emitted. Pairs where exactly one value
// is non-finite are excluded from the tests; equal values drop as zero
// differences.
MetricReport build_report(const std::filesystem::path& dataset_root,
                          const std::vector<std::string>& methods,
                          const std::filesystem::path& out_dir,
                          Alternative alternative = Alternative::TwoSided);

}  // namespace petdiff
