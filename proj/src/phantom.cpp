#include "petdiff/phantom.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "petdiff/errors.hpp"
#include "petdiff/io.hpp"
#include "petdiff/parallel.hpp"
#include "petdiff/rng.hpp"
#include "petdiff/text.hpp"

namespace petdiff {

namespace {

// Decorrelates the Poisson thinning stream from the geometry stream at equal
// seeds (splitmix64 odd constants).
constexpr uint64_t kDoseSeedSalt = 0x94D049BB133111EBull;
constexpr uint64_t kSplitSeedSalt = 0xD1B54A32D192ED03ull;

struct Ellipse {
    double cx, cy, ax, ay;  // pixel units
};

// Conservative containment: the organ's bounding extent must fit inside the
// body ellipse, so every organ pixel lands on body pixels.
bool inside_body(const Ellipse& e, int h, int w) {
    const double bx = 0.5 * w, by = 0.5 * h;
    const double Ax = kBodyAxisX * w, Ay = kBodyAxisY * h;
    const double dx = (std::abs(e.cx - bx) + e.ax) / Ax;
    const double dy = (std::abs(e.cy - by) + e.ay) / Ay;
    return dx * dx + dy * dy <= 1.0;
}

void paint(float* act, int32_t* mask, int h, int w, const Ellipse& e, float value,
           int32_t label) {
    const int i0 = std::max(0, static_cast<int>(std::floor(e.cy - e.ay - 1)));
    const int i1 = std::min(h - 1, static_cast<int>(std::ceil(e.cy + e.ay + 1)));
    const int j0 = std::max(0, static_cast<int>(std::floor(e.cx - e.ax - 1)));
    const int j1 = std::min(w - 1, static_cast<int>(std::ceil(e.cx + e.ax + 1)));
    for (int i = i0; i <= i1; ++i) {
        for (int j = j0; j <= j1; ++j) {
            const double px = (j + 0.5 - e.cx) / e.ax;
            const double py = (i + 0.5 - e.cy) / e.ay;
            if (px * px + py * py <= 1.0) {
                act[static_cast<size_t>(i) * w + j] = value;
                mask[static_cast<size_t>(i) * w + j] = label;
            }
        }
    }
}

// Separable Gaussian, radius-3 kernel, border-renormalized so a constant
// image stays exactly constant.
void gaussian_blur(float* img, int h, int w, double sigma) {
    constexpr int R = 3;
    double k[2 * R + 1];
    for (int i = -R; i <= R; ++i) k[i + R] = std::exp(-0.5 * i * i / (sigma * sigma));

    std::vector<double> tmp(static_cast<size_t>(h) * w);
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            double s = 0, wsum = 0;
            for (int d = -R; d <= R; ++d) {
                const int jj = j + d;
                if (jj < 0 || jj >= w) continue;
                s += k[d + R] * img[static_cast<size_t>(i) * w + jj];
                wsum += k[d + R];
            }
            tmp[static_cast<size_t>(i) * w + j] = s / wsum;
        }
    }
    for (int j = 0; j < w; ++j) {
        for (int i = 0; i < h; ++i) {
            double s = 0, wsum = 0;
            for (int d = -R; d <= R; ++d) {
                const int ii = i + d;
                if (ii < 0 || ii >= h) continue;
                s += k[d + R] * tmp[static_cast<size_t>(ii) * w + j];
                wsum += k[d + R];
            }
            img[static_cast<size_t>(i) * w + j] = static_cast<float>(s / wsum);
        }
    }
}

bool lowercase_word(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s)
        if (!(std::islower(static_cast<unsigned char>(c)) || std::isdigit(static_cast<unsigned char>(c)) || c == '_'))
            return false;
    return true;
}

std::string u64_str(uint64_t v) { return std::to_string(v); }

uint64_t parse_u64(const std::string& s, const std::string& what) {
    try {
        size_t pos = 0;
        const uint64_t v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw FormatError("bad unsigned integer for " + what + ": '" + s + "'");
    }
}

}  // namespace

std::vector<OrganSpec> default_organ_table() {
    // Anatomical row layout. Several neighbors share geometry ranges and are
    // told apart mainly by activity, so the prompt carries real signal once
    // low-dose noise drowns the contrast.
    return {
        {1, "liver", 2.0, 0.30, 0.40, 0.46, 0.58, 0.100, 0.125, 0.100, 0.125, 0.90},
        {2, "spleen", 1.3, 0.62, 0.72, 0.44, 0.56, 0.080, 0.095, 0.080, 0.095, 0.80},
        {3, "heart", 2.4, 0.46, 0.54, 0.28, 0.38, 0.085, 0.105, 0.085, 0.105, 0.85},
        {4, "lung_left", 0.7, 0.62, 0.72, 0.26, 0.36, 0.065, 0.085, 0.065, 0.085, 0.85},
        {5, "lung_right", 0.7, 0.28, 0.38, 0.26, 0.36, 0.065, 0.085, 0.065, 0.085, 0.85},
        {6, "pancreas", 1.0, 0.44, 0.56, 0.56, 0.66, 0.075, 0.090, 0.075, 0.090, 0.70},
        {7, "kidney_left", 1.6, 0.58, 0.68, 0.66, 0.76, 0.080, 0.095, 0.080, 0.095, 0.75},
        {8, "kidney_right", 1.6, 0.32, 0.42, 0.66, 0.76, 0.080, 0.095, 0.080, 0.095, 0.75},
    };
}

void validate_organs(const std::vector<OrganSpec>& organs) {
    if (organs.empty()) throw DataError("organ table is empty");
    std::set<int32_t> labels;
    std::set<std::string> names;
    for (const auto& o : organs) {
        if (o.label <= 0) throw DataError("organ '" + o.name + "': label must be positive");
        if (!labels.insert(o.label).second)
            throw DataError("duplicate organ label " + std::to_string(o.label));
        if (!lowercase_word(o.name))
            throw DataError("organ name '" + o.name + "' is not a lowercase word");
        if (!names.insert(o.name).second) throw DataError("duplicate organ name '" + o.name + "'");
        if (!(o.mean_activity > kBackgroundActivity))
            throw DataError("organ '" + o.name + "': mean activity must exceed background");
        auto range = [&](double lo, double hi, const char* what) {
            if (!(lo <= hi) || !(lo > 0.0) || !(hi < 1.0))
                throw DataError("organ '" + o.name + "': bad " + what + " range");
        };
        range(o.cx_min, o.cx_max, "cx");
        range(o.cy_min, o.cy_max, "cy");
        range(o.ax_min, o.ax_max, "ax");
        range(o.ay_min, o.ay_max, "ay");
        if (o.include_prob < 0.0 || o.include_prob > 1.0)
            throw DataError("organ '" + o.name + "': include_prob outside [0,1]");
    }
}

void save_organs(const std::filesystem::path& file, const std::vector<OrganSpec>& organs) {
    std::ostringstream os;
    os << "# label name activity cx_min cx_max cy_min cy_max ax_min ax_max ay_min ay_max p\n";
    for (const auto& o : organs) {
        os << o.label << ' ' << o.name << ' ' << format_f64(o.mean_activity) << ' '
           << format_f64(o.cx_min) << ' ' << format_f64(o.cx_max) << ' ' << format_f64(o.cy_min)
           << ' ' << format_f64(o.cy_max) << ' ' << format_f64(o.ax_min) << ' '
           << format_f64(o.ax_max) << ' ' << format_f64(o.ay_min) << ' ' << format_f64(o.ay_max)
           << ' ' << format_f64(o.include_prob) << '\n';
    }
    write_text_file(file, os.str());
}

std::vector<OrganSpec> load_organs(const std::filesystem::path& file) {
    std::istringstream is(read_text_file(file));
    std::vector<OrganSpec> organs;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        OrganSpec o;
        if (!(ls >> o.label >> o.name >> o.mean_activity >> o.cx_min >> o.cx_max >> o.cy_min >>
              o.cy_max >> o.ax_min >> o.ax_max >> o.ay_min >> o.ay_max >> o.include_prob))
            throw FormatError(file.string() + ": bad organ line '" + line + "'");
        std::string extra;
        if (ls >> extra) throw FormatError(file.string() + ": trailing fields in '" + line + "'");
        organs.push_back(std::move(o));
    }
    validate_organs(organs);
    return organs;
}

PhantomImage generate_phantom(uint64_t seed, const std::vector<OrganSpec>& organs, int h, int w) {
    if (h < 32 || w < 32) throw ConfigError("phantom images must be at least 32x32");
    validate_organs(organs);

    const size_t hw = static_cast<size_t>(h) * w;
    std::vector<float> act(2 * hw, 0.0f);
    std::vector<int32_t> mask(2 * hw, 0);

    const double bx = 0.5 * w, by = 0.5 * h;
    const double Ax = kBodyAxisX * w, Ay = kBodyAxisY * h;
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            const double px = (j + 0.5 - bx) / Ax;
            const double py = (i + 0.5 - by) / Ay;
            if (px * px + py * py <= 1.0) {
                act[static_cast<size_t>(i) * w + j] = static_cast<float>(kBackgroundActivity);
                act[hw + static_cast<size_t>(i) * w + j] = static_cast<float>(kBackgroundActivity);
            }
        }
    }

    Rng rng(seed);
    for (const auto& o : organs) {
        // One inclusion draw per organ regardless of outcome keeps the stream
        // layout stable across tables that differ only in probabilities.
        const bool included = rng.uniform() < o.include_prob;
        if (!included) continue;

        Ellipse s0{}, s1{};
        bool placed = false;
        for (int attempt = 0; attempt < kPlacementRetries; ++attempt) {
            s0.cx = rng.uniform(o.cx_min, o.cx_max) * w;
            s0.cy = rng.uniform(o.cy_min, o.cy_max) * h;
            s0.ax = rng.uniform(o.ax_min, o.ax_max) * w;
            s0.ay = rng.uniform(o.ay_min, o.ay_max) * h;
            s1 = s0;
            s1.ax *= 1.0 + 0.1 * rng.uniform(-1.0, 1.0);
            s1.ay *= 1.0 + 0.1 * rng.uniform(-1.0, 1.0);
            if (inside_body(s0, h, w) && inside_body(s1, h, w)) {
                placed = true;
                break;
            }
        }
        if (!placed)
            throw DataError("organ '" + o.name + "' could not be placed inside the body after " +
                            std::to_string(kPlacementRetries) + " attempts");

        const float a = static_cast<float>(o.mean_activity * (1.0 + 0.1 * rng.uniform(-1.0, 1.0)));
        paint(act.data(), mask.data(), h, w, s0, a, o.label);
        paint(act.data() + hw, mask.data() + hw, h, w, s1, a, o.label);
    }

    gaussian_blur(act.data(), h, w, 1.0);
    gaussian_blur(act.data() + hw, h, w, 1.0);

    PhantomImage out;
    out.activity = Tensor::from_data({2, h, w}, std::move(act));
    out.mask = std::move(mask);
    out.h = h;
    out.w = w;
    return out;
}

Tensor simulate_low_dose(const Tensor& normal, double dose_factor, double counts_per_unit,
                         uint64_t seed) {
    if (dose_factor < 1.0) throw ConfigError("dose_factor must be >= 1");
    if (!(counts_per_unit > 0.0)) throw ConfigError("counts_per_unit must be positive");
    const auto& v = normal.data();
    for (float x : v) {
        if (!std::isfinite(x)) throw DataError("simulate_low_dose: non-finite activity");
        if (x < 0.0f) throw DataError("simulate_low_dose: negative activity");
    }
    Rng rng(seed);
    const double scale = counts_per_unit / dose_factor;
    std::vector<float> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) {
        const double lam = v[i] * scale;
        const int64_t k = lam > 0.0 ? rng.poisson(lam) : 0;
        out[i] = static_cast<float>(k / scale);
    }
    return Tensor::from_data(normal.shape(), std::move(out));
}

void write_sample(const PhantomSample& sample, const std::filesystem::path& dir) {
    const size_t n = 2 * static_cast<size_t>(sample.h) * sample.w;
    if (sample.normal_dose.numel() != n || sample.low_dose.numel() != n ||
        sample.mask.size() != n)
        throw DimError("write_sample: array sizes disagree with h/w");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    KvFile header;
    header.set_i64("slices", 2);
    header.set_i64("h", sample.h);
    header.set_i64("w", sample.w);
    header.set("dtype", "f32");
    header.set("mask_dtype", "i32");
    header.set("units", "activity");
    header.save(dir / "header.txt");

    KvFile meta;
    meta.set_i64("sample_id", sample.sample_id);
    meta.set("seed", u64_str(sample.seed));
    meta.set_f64("dose_factor", sample.dose_factor);
    meta.set_f64("counts_per_unit", sample.counts_per_unit);
    meta.set("prompt", sample.prompt);
    meta.set("encoder_seed", u64_str(sample.encoder_seed));
    meta.save(dir / "meta.txt");

    write_f32raw(dir / "normal.f32raw", sample.normal_dose.data());
    write_f32raw(dir / "low.f32raw", sample.low_dose.data());
    write_i32raw(dir / "mask.i32raw", sample.mask);
}

PhantomSample read_sample(const std::filesystem::path& dir) {
    const KvFile header = KvFile::load(dir / "header.txt");
    if (header.get("dtype") != "f32")
        throw FormatError((dir / "header.txt").string() + ": unsupported dtype");
    if (header.get("mask_dtype") != "i32")
        throw FormatError((dir / "header.txt").string() + ": unsupported mask_dtype");
    if (header.get_i64("slices") != 2)
        throw FormatError((dir / "header.txt").string() + ": expected 2 slices");
    const int64_t h = header.get_i64("h"), w = header.get_i64("w");
    if (h < 1 || w < 1) throw FormatError((dir / "header.txt").string() + ": bad image size");
    const size_t n = 2 * static_cast<size_t>(h) * static_cast<size_t>(w);

    PhantomSample s;
    s.h = static_cast<int>(h);
    s.w = static_cast<int>(w);
    s.normal_dose = Tensor::from_data({2, s.h, s.w}, read_f32raw(dir / "normal.f32raw", n));
    s.low_dose = Tensor::from_data({2, s.h, s.w}, read_f32raw(dir / "low.f32raw", n));
    s.mask = read_i32raw(dir / "mask.i32raw", n);

    const KvFile meta = KvFile::load(dir / "meta.txt");
    s.sample_id = meta.get_i64("sample_id");
    s.seed = parse_u64(meta.get("seed"), "seed");
    s.dose_factor = meta.get_f64("dose_factor");
    s.counts_per_unit = meta.get_f64("counts_per_unit");
    s.prompt = meta.get("prompt");
    s.encoder_seed = parse_u64(meta.get("encoder_seed"), "encoder_seed");
    return s;
}

std::string sample_dir_name(int64_t id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "sample_%05lld", static_cast<long long>(id));
    return buf;
}

void ratio_split_counts(int64_t n, int64_t& n_train, int64_t& n_val, int64_t& n_test) {
    if (n < 1) throw ConfigError("dataset needs at least one sample");
    const double quota[3] = {n * 90.0 / 115.0, n * 5.0 / 115.0, n * 20.0 / 115.0};
    int64_t c[3];
    double frac[3];
    int64_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        c[i] = static_cast<int64_t>(std::floor(quota[i]));
        frac[i] = quota[i] - static_cast<double>(c[i]);
        assigned += c[i];
    }
    for (int64_t left = n - assigned; left > 0; --left) {
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (frac[i] > frac[best]) best = i;
        ++c[best];
        frac[best] = -1.0;
    }
    n_train = c[0];
    n_val = c[1];
    n_test = c[2];
}

DatasetSplit split_ids(int64_t n, uint64_t seed, int64_t n_train, int64_t n_val, int64_t n_test) {
    if (n_train < 0 || n_val < 0 || n_test < 0)
        throw ConfigError("split counts must be non-negative");
    if (n_train + n_val + n_test != n)
        throw ConfigError("split counts sum to " + std::to_string(n_train + n_val + n_test) +
                          ", dataset has " + std::to_string(n));
    std::vector<int64_t> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(seed);
    for (int64_t i = n - 1; i > 0; --i) {
        const int64_t j = rng.uniform_int(i + 1);
        std::swap(ids[i], ids[j]);
    }
    DatasetSplit split;
    split.train.assign(ids.begin(), ids.begin() + n_train);
    split.val.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
    split.test.assign(ids.begin() + n_train + n_val, ids.end());
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

void save_split(const std::filesystem::path& file, const DatasetSplit& split) {
    std::ostringstream os;
    for (int64_t id : split.train) os << id << " train\n";
    for (int64_t id : split.val) os << id << " val\n";
    for (int64_t id : split.test) os << id << " test\n";
    write_text_file(file, os.str());
}

DatasetSplit load_split(const std::filesystem::path& file) {
    std::istringstream is(read_text_file(file));
    DatasetSplit split;
    std::set<int64_t> seen;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        int64_t id = -1;
        std::string bucket;
        if (!(ls >> id >> bucket)) throw FormatError(file.string() + ": bad split line '" + line + "'");
        if (!seen.insert(id).second)
            throw FormatError(file.string() + ": duplicate sample id " + std::to_string(id));
        if (bucket == "train")
            split.train.push_back(id);
        else if (bucket == "val")
            split.val.push_back(id);
        else if (bucket == "test")
            split.test.push_back(id);
        else
            throw FormatError(file.string() + ": unknown split bucket '" + bucket + "'");
    }
    return split;
}

void generate_dataset(const DatasetConfig& cfg, const std::vector<OrganSpec>& organs) {
    if (cfg.n_samples < 1) throw ConfigError("n_samples must be positive");
    validate_organs(organs);

    int64_t n_train = cfg.n_train, n_val = cfg.n_val, n_test = cfg.n_test;
    if (n_train < 0 && n_val < 0 && n_test < 0) {
        ratio_split_counts(cfg.n_samples, n_train, n_val, n_test);
    } else if (n_train < 0 || n_val < 0 || n_test < 0) {
        throw ConfigError("specify all of n_train/n_val/n_test or none");
    }
    const DatasetSplit split =
        split_ids(cfg.n_samples, cfg.seed ^ kSplitSeedSalt, n_train, n_val, n_test);

    std::error_code ec;
    std::filesystem::create_directories(cfg.root, ec);
    if (ec) throw IoError("cannot create " + cfg.root.string() + ": " + ec.message());

    std::vector<std::string> names;
    std::map<int, std::string> label_names;
    for (const auto& o : organs) {
        names.push_back(o.name);
        label_names[o.label] = o.name;
    }
    const Vocabulary vocab = Vocabulary::build(names);

    save_organs(cfg.root / "organs.txt", organs);
    vocab.save((cfg.root / "vocab.txt").string());
    save_split(cfg.root / "split.txt", split);

    KvFile ds;
    ds.set_i64("n_samples", cfg.n_samples);
    ds.set_i64("h", cfg.h);
    ds.set_i64("w", cfg.w);
    ds.set_f64("dose_factor", cfg.dose_factor);
    ds.set_f64("counts_per_unit", cfg.counts_per_unit);
    ds.set("seed", u64_str(cfg.seed));
    ds.set("encoder_seed", u64_str(cfg.encoder_seed));
    ds.set_i64("n_train", n_train);
    ds.set_i64("n_val", n_val);
    ds.set_i64("n_test", n_test);
    ds.save(cfg.root / "dataset.txt");

    parallel_for(static_cast<int>(cfg.n_samples), cfg.workers, [&](int id, int /*worker*/) {
        const uint64_t seed = cfg.seed + static_cast<uint64_t>(id);
        PhantomImage img = generate_phantom(seed, organs, cfg.h, cfg.w);
        PhantomSample s;
        s.sample_id = id;
        s.seed = seed;
        s.dose_factor = cfg.dose_factor;
        s.counts_per_unit = cfg.counts_per_unit;
        s.encoder_seed = cfg.encoder_seed;
        s.h = cfg.h;
        s.w = cfg.w;
        s.normal_dose = img.activity;
        s.low_dose = simulate_low_dose(img.activity, cfg.dose_factor, cfg.counts_per_unit,
                                       seed ^ kDoseSeedSalt);
        s.mask = std::move(img.mask);
        s.prompt = build_prompt(s.mask, label_names);
        write_sample(s, cfg.root / sample_dir_name(id));
    });
}

DatasetConfig load_dataset_config(const std::filesystem::path& file) {
    const KvFile kv = KvFile::load(file);
    DatasetConfig cfg;
    for (const auto& [key, value] : kv.entries) {
        if (key == "n_samples") cfg.n_samples = kv.get_i64(key);
        else if (key == "h") cfg.h = static_cast<int>(kv.get_i64(key));
        else if (key == "w") cfg.w = static_cast<int>(kv.get_i64(key));
        else if (key == "dose_factor") cfg.dose_factor = kv.get_f64(key);
        else if (key == "counts_per_unit") cfg.counts_per_unit = kv.get_f64(key);
        else if (key == "seed") cfg.seed = parse_u64(value, key);
        else if (key == "encoder_seed") cfg.encoder_seed = parse_u64(value, key);
        else if (key == "n_train") cfg.n_train = kv.get_i64(key);
        else if (key == "n_val") cfg.n_val = kv.get_i64(key);
        else if (key == "n_test") cfg.n_test = kv.get_i64(key);
        else if (key == "workers") cfg.workers = static_cast<int>(kv.get_i64(key));
        else throw ConfigError("dataset config: unknown key '" + key + "'");
    }
    return cfg;
}

void save_dataset_config(const DatasetConfig& cfg, const std::filesystem::path& file) {
    KvFile kv;
    kv.set_i64("n_samples", cfg.n_samples);
    kv.set_i64("h", cfg.h);
    kv.set_i64("w", cfg.w);
    kv.set_f64("dose_factor", cfg.dose_factor);
    kv.set_f64("counts_per_unit", cfg.counts_per_unit);
    kv.set("seed", u64_str(cfg.seed));
    kv.set("encoder_seed", u64_str(cfg.encoder_seed));
    kv.set_i64("n_train", cfg.n_train);
    kv.set_i64("n_val", cfg.n_val);
    kv.set_i64("n_test", cfg.n_test);
    kv.set_i64("workers", cfg.workers);
    kv.save(file);
}

}  // namespace petdiff
