#include "petdiff/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <system_error>

#include "petdiff/errors.hpp"
#include "petdiff/io.hpp"
#include "petdiff/sampler.hpp"

namespace petdiff {

namespace fs = std::filesystem;

namespace {

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

Tensor method_image(const PhantomSample& s, const fs::path& dir, const std::string& method) {
    if (method == "low") return s.low_dose;
    const fs::path file = denoised_path(dir, parse_mode(method));
    return Tensor::from_data(s.normal_dose.shape(), read_f32raw(file, s.normal_dose.numel()));
}

struct Moments {
    int n = 0;
    double mean = 0.0;
    double stddev = 0.0;
};

Moments moments_of(const std::vector<double>& v) {
    Moments m;
    m.n = static_cast<int>(v.size());
    if (m.n == 0) return m;
    double sum = 0.0;
    for (const double x : v) sum += x;
    m.mean = sum / m.n;
    if (m.n > 1) {
        double ss = 0.0;
        for (const double x : v) ss += (x - m.mean) * (x - m.mean);
        m.stddev = std::sqrt(ss / (m.n - 1));
    }
    return m;
}

}  // namespace

std::string significance_stars(double p) {
    if (p < 0.001) return "***";
    if (p < 0.01) return "**";
    if (p < 0.05) return "*";
    return "ns";
}

MetricReport build_report(const fs::path& dataset_root, const std::vector<std::string>& methods,
                          const fs::path& out_dir, Alternative alternative) {
    if (methods.empty()) throw ConfigError("report: methods list is empty");
    std::set<std::string> seen;
    for (const auto& m : methods) {
        if (!seen.insert(m).second) throw ConfigError("report: duplicate method: " + m);
        if (m != "low") parse_mode(m);
    }

    const std::vector<OrganSpec> organs = load_organs(dataset_root / "organs.txt");
    const DatasetSplit split = load_split(dataset_root / "split.txt");
    if (split.test.empty()) throw DataError("report: dataset split has no test samples");

    MetricReport rep;
    rep.methods = methods;
    rep.regions.push_back("whole");
    for (const auto& o : organs) rep.regions.push_back(o.name);
    rep.sample_ids = split.test;
    std::sort(rep.sample_ids.begin(), rep.sample_ids.end());

    for (const int64_t id : rep.sample_ids) {
        const fs::path dir = dataset_root / sample_dir_name(id);
        const PhantomSample s = read_sample(dir);
        for (const auto& method : methods) {
            Tensor img;
            try {
                img = method_image(s, dir, method);
            } catch (const IoError&) {
                rep.missing.emplace_back(id, method);
                continue;
            }
            auto& cell = rep.cells[id][method];
            OrganScores whole;
            whole.psnr = psnr(s.normal_dose, img);
            whole.ssim = ssim(s.normal_dose, img);
            cell["whole"] = whole;
            for (const auto& [name, scores] : organ_metrics(s.normal_dose, img, s.mask, organs))
                cell[name] = scores;
        }
    }

    const auto cell_value = [&rep](int64_t id, const std::string& method,
                                   const std::string& region, bool want_psnr) -> const double* {
        const auto sit = rep.cells.find(id);
        if (sit == rep.cells.end()) return nullptr;
        const auto mit = sit->second.find(method);
        if (mit == sit->second.end()) return nullptr;
        const auto rit = mit->second.find(region);
        if (rit == mit->second.end()) return nullptr;
        return want_psnr ? &rit->second.psnr : &rit->second.ssim;
    };

    for (const bool want_psnr : {true, false}) {
        for (const auto& region : rep.regions) {
            for (size_t i = 0; i < methods.size(); ++i) {
                for (size_t j = i + 1; j < methods.size(); ++j) {
                    PairTest t;
                    t.method_a = methods[i];
                    t.method_b = methods[j];
                    t.metric = want_psnr ? "psnr" : "ssim";
                    t.region = region;
                    std::vector<double> va, vb;
                    for (const int64_t id : rep.sample_ids) {
                        const double* a = cell_value(id, methods[i], region, want_psnr);
                        const double* b = cell_value(id, methods[j], region, want_psnr);
                        if (!a || !b) continue;
                        if (*a == *b) continue;  // zero difference, would drop anyway
                        if (!std::isfinite(*a) || !std::isfinite(*b)) continue;
                        va.push_back(*a);
                        vb.push_back(*b);
                    }
                    t.n_effective = static_cast<int>(va.size());
                    if (t.n_effective >= 5) {
                        const WilcoxonResult w = wilcoxon_signed_rank(va, vb, alternative);
                        t.valid = true;
                        t.statistic = w.statistic;
                        t.p_value = w.p_value;
                    }
                    rep.tests.push_back(std::move(t));
                }
            }
        }
    }

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("report: cannot create " + out_dir.string() + ": " + ec.message());

    {
        const fs::path csv_path = out_dir / "metrics.csv";
        std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
        if (!csv) throw IoError("report: cannot write " + csv_path.string());
        csv << "sample_id,method,region,psnr,ssim\n";
        for (const int64_t id : rep.sample_ids) {
            for (const auto& method : methods) {
                const auto sit = rep.cells.find(id);
                if (sit == rep.cells.end()) continue;
                const auto mit = sit->second.find(method);
                if (mit == sit->second.end()) continue;
                for (const auto& region : rep.regions) {
                    csv << id << ',' << method << ',' << region << ',';
                    const auto rit = mit->second.find(region);
                    if (rit == mit->second.end()) {
                        csv << "absent,absent\n";
                    } else {
                        csv << format_f64(rit->second.psnr) << ','
                            << format_f64(rit->second.ssim) << '\n';
                    }
                }
            }
        }
    }

    std::ostringstream sum;
    sum << "test samples: " << rep.sample_ids.size() << "\n";
    sum << "methods:";
    for (size_t i = 0; i < methods.size(); ++i) sum << (i ? ", " : " ") << methods[i];
    sum << "\nalternative: " << (alternative == Alternative::TwoSided ? "two-sided" : "greater")
        << "\n\n";

    sum << "== scores (mean +- std [n]) ==\n";
    for (const auto& region : rep.regions) {
        for (const auto& method : methods) {
            std::vector<double> ps, ss;
            for (const int64_t id : rep.sample_ids) {
                const double* p = cell_value(id, method, region, true);
                const double* s = cell_value(id, method, region, false);
                if (p) ps.push_back(*p);
                if (s) ss.push_back(*s);
            }
            sum << region << " / " << method << ": ";
            if (ps.empty()) {
                sum << "no data\n";
                continue;
            }
            const Moments mp = moments_of(ps);
            const Moments ms = moments_of(ss);
            sum << "psnr " << fmt("%.3f", mp.mean) << " +- " << fmt("%.3f", mp.stddev) << " ["
                << mp.n << "], ssim " << fmt("%.4f", ms.mean) << " +- " << fmt("%.4f", ms.stddev)
                << " [" << ms.n << "]\n";
        }
    }

    sum << "\n== pairwise wilcoxon signed-rank ==\n";
    for (const PairTest& t : rep.tests) {
        sum << t.metric << " " << t.region << ": " << t.method_a << " vs " << t.method_b << ": ";
        if (!t.valid) {
            sum << "insufficient data (n=" << t.n_effective << ")\n";
        } else {
            sum << "W=" << fmt("%.1f", t.statistic) << " n=" << t.n_effective << " p="
                << fmt("%.4g", t.p_value) << " " << significance_stars(t.p_value) << "\n";
        }
    }

    sum << "\n== missing outputs ==\n";
    if (rep.missing.empty()) {
        sum << "none\n";
    } else {
        for (const auto& [id, method] : rep.missing)
            sum << "sample " << id << ": " << method << "\n";
    }

    const fs::path sum_path = out_dir / "summary.txt";
    std::ofstream sf(sum_path, std::ios::binary | std::ios::trunc);
    if (!sf) throw IoError("report: cannot write " + sum_path.string());
    sf << sum.str();

    return rep;
}

}  // namespace petdiff
