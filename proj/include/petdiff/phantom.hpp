#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "petdiff/tensor.hpp"

namespace petdiff {

// Procedural 2-slice activity phantoms: an elliptical body at constant
// background activity, elliptical organs painted over it (later table entries
// overwrite earlier ones where they overlap), activity blurred with a sigma=1
// Gaussian, labels kept crisp. Slice 1 repeats slice 0 with organ axes
// perturbed by <= 10% to mimic adjacent-slice correlation. Low-dose images
// come from per-pixel Poisson count thinning.

struct OrganSpec {
    int32_t label = 0;           // positive, unique within a table
    std::string name;            // lowercase word, becomes a vocabulary token
    double mean_activity = 0.0;  // must exceed kBackgroundActivity
    // Ellipse parameter ranges as fractions of image size (x-like of W, y-like of H).
    double cx_min = 0, cx_max = 0;
    double cy_min = 0, cy_max = 0;
    double ax_min = 0, ax_max = 0;
    double ay_min = 0, ay_max = 0;
    double include_prob = 1.0;
};

constexpr double kBackgroundActivity = 0.4;
// Body ellipse semi-axes as fractions of W / H, centered in the image.
constexpr double kBodyAxisX = 0.42;
constexpr double kBodyAxisY = 0.46;
constexpr int kPlacementRetries = 100;

std::vector<OrganSpec> default_organ_table();

// One line per organ: label name activity cx_min cx_max cy_min cy_max
// ax_min ax_max ay_min ay_max include_prob. '#' comments and blank lines skipped.
void save_organs(const std::filesystem::path& file, const std::vector<OrganSpec>& organs);
std::vector<OrganSpec> load_organs(const std::filesystem::path& file);

// Table sanity: unique positive labels, lowercase names, activity above
// background, ordered in-range fraction bounds. Throws DataError.
void validate_organs(const std::vector<OrganSpec>& organs);

struct PhantomImage {
    Tensor activity;            // [2,H,W], blurred, >= 0
    std::vector<int32_t> mask;  // [2,H,W] organ labels, 0 = background/body
    int h = 0, w = 0;
};

// Deterministic in (seed, organs, h, w). Organs that cannot be placed inside
// the body after kPlacementRetries attempts raise DataError.
PhantomImage generate_phantom(uint64_t seed, const std::vector<OrganSpec>& organs, int h, int w);

// Per pixel: k ~ Poisson(v * counts_per_unit / dose_factor), scaled back by
// dose_factor / counts_per_unit. Unbiased; variance inflated by dose_factor.
Tensor simulate_low_dose(const Tensor& normal, double dose_factor, double counts_per_unit,
                         uint64_t seed);

struct PhantomSample {
    int64_t sample_id = 0;
    uint64_t seed = 0;
    double dose_factor = 20.0;
    double counts_per_unit = 50.0;
    uint64_t encoder_seed = 0;
    int h = 0, w = 0;
    Tensor normal_dose;         // [2,H,W]
    Tensor low_dose;            // [2,H,W]
    std::vector<int32_t> mask;  // [2,H,W]
    std::string prompt;         // build_prompt over the union of both slices' labels
};

// Directory layout: normal.f32raw, low.f32raw, mask.i32raw, header.txt, meta.txt.
void write_sample(const PhantomSample& sample, const std::filesystem::path& dir);
PhantomSample read_sample(const std::filesystem::path& dir);

std::string sample_dir_name(int64_t id);

struct DatasetSplit {
    std::vector<int64_t> train, val, test;
};

// Largest-remainder apportionment of n into 90:5:20.
void ratio_split_counts(int64_t n, int64_t& n_train, int64_t& n_val, int64_t& n_test);

// Seeded shuffle of 0..n-1, contiguous cut, buckets sorted ascending.
DatasetSplit split_ids(int64_t n, uint64_t seed, int64_t n_train, int64_t n_val, int64_t n_test);

void save_split(const std::filesystem::path& file, const DatasetSplit& split);
DatasetSplit load_split(const std::filesystem::path& file);

struct DatasetConfig {
    std::filesystem::path root;
    int64_t n_samples = 156;
    int h = 64, w = 64;
    double dose_factor = 20.0;
    double counts_per_unit = 50.0;
    uint64_t seed = 0;       // sample i draws from seed + i
    uint64_t encoder_seed = 0;
    // -1 means: apportion n_samples by the 90:5:20 ratio.
    int64_t n_train = -1, n_val = -1, n_test = -1;
    int workers = 1;
};

// Writes organs.txt, vocab.txt, split.txt, dataset.txt and one directory per
// sample under cfg.root. Parallel across samples; output independent of
// worker count.
void generate_dataset(const DatasetConfig& cfg, const std::vector<OrganSpec>& organs);

// key=value file with the DatasetConfig fields except `root`, which callers
// supply separately. Unknown keys are rejected; missing keys keep defaults.
DatasetConfig load_dataset_config(const std::filesystem::path& file);
void save_dataset_config(const DatasetConfig& cfg, const std::filesystem::path& file);

}  // namespace petdiff
