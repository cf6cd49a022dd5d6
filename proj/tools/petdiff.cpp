// Single-binary pipeline driver: gen-data, train, denoise, eval.
//
// Exit codes: 0 success, 2 config (incl. unsupported versions), 3 i/o or
// malformed data, 4 numeric failure, 5 missing inputs, 1 anything else.

#include <cstdint>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <string>
#include <system_error>
#include <vector>

#include <CLI11.hpp>

#include "petdiff/errors.hpp"
#include "petdiff/io.hpp"
#include "petdiff/metrics.hpp"
#include "petdiff/phantom.hpp"
#include "petdiff/report.hpp"
#include "petdiff/sampler.hpp"
#include "petdiff/text.hpp"
#include "petdiff/train.hpp"

namespace fs = std::filesystem;
using namespace petdiff;

namespace {

#ifndef PETDIFF_VERSION
#define PETDIFF_VERSION "v0.1.0"
#endif

constexpr const char* kVersion = PETDIFF_VERSION;
constexpr int kReferenceT = 1000;

std::string now_utc() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string u64_str(uint64_t v) { return std::to_string(v); }

uint64_t parse_u64(const std::string& s, const std::string& what) {
    try {
        size_t pos = 0;
        const uint64_t v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw FormatError(what + ": not an unsigned integer: '" + s + "'");
    }
}

// Overwrite protection: a fresh command refuses an existing target unless
// --force, which clears it first.
void claim_target(const fs::path& target, bool force) {
    if (!fs::exists(target)) return;
    if (!force) throw IoError(target.string() + " already exists (use --force)");
    std::error_code ec;
    fs::remove_all(target, ec);
    if (ec) throw IoError("cannot clear " + target.string() + ": " + ec.message());
}

// The manifest lands last, atomically, so a complete directory always holds
// exactly one.
void write_manifest(const fs::path& dir, const KvFile& kv) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    const fs::path tmp = dir / "manifest.txt.tmp";
    kv.save(tmp);
    fs::rename(tmp, dir / "manifest.txt", ec);
    if (ec) throw IoError("cannot write manifest in " + dir.string() + ": " + ec.message());
}

std::string join_paths(const std::vector<std::string>& parts) {
    std::string out;
    for (const std::string& p : parts) {
        if (!out.empty()) out += ";";
        out += p;
    }
    return out;
}

struct GenDataArgs {
    std::string config, out;
    bool force = false;
};

int run_gen_data(const GenDataArgs& a) {
    DatasetConfig cfg = load_dataset_config(a.config);
    cfg.root = a.out;
    claim_target(cfg.root, a.force);

    const std::string started = now_utc();
    generate_dataset(cfg, default_organ_table());

    KvFile m;
    m.set("command", "gen-data");
    m.set("config", a.config);
    m.set("seed", u64_str(cfg.seed));
    m.set("encoder_seed", u64_str(cfg.encoder_seed));
    m.set_i64("n_samples", cfg.n_samples);
    m.set("outputs", cfg.root.string());
    m.set("version", kVersion);
    m.set("started", started);
    m.set("finished", now_utc());
    write_manifest(cfg.root, m);
    return 0;
}

struct TrainArgs {
    std::string config, out, resume;
    bool force = false;
};

int run_train(const TrainArgs& a) {
    const TrainConfig cfg = load_train_config(a.config);
    // Resuming appends to an existing run directory; a fresh run claims it.
    if (a.resume.empty()) claim_target(a.out, a.force);

    const std::string started = now_utc();
    const TrainResult result = train_run(cfg, a.out, a.resume);

    KvFile m;
    m.set("command", "train");
    m.set("config", a.config);
    m.set("seed", u64_str(cfg.seed));
    if (!a.resume.empty()) m.set("resumed_from", a.resume);
    m.set_i64("steps_completed", result.steps_completed);
    m.set("outputs", join_paths({result.final_checkpoint.string(),
                                 (fs::path(a.out) / "train_log.txt").string()}));
    if (cfg.mode != TrainMode::UnetRegression && cfg.T != kReferenceT)
        m.set("deviations", "T=" + std::to_string(cfg.T) + " (reference " +
                                std::to_string(kReferenceT) + ")");
    m.set("version", kVersion);
    m.set("started", started);
    m.set("finished", now_utc());
    write_manifest(a.out, m);
    return 0;
}

struct DenoiseArgs {
    std::string checkpoint, dataset, split = "test", out;
    uint64_t seed = 0;
    bool force = false;
};

const std::vector<int64_t>& split_ids_for(const DatasetSplit& split, const std::string& name) {
    if (name == "train") return split.train;
    if (name == "val") return split.val;
    return split.test;
}

int run_denoise(const DenoiseArgs& a) {
    const ModelCheckpoint ckpt = load_checkpoint(a.checkpoint);
    const fs::path root = a.dataset.empty() ? ckpt.config.dataset_root : fs::path(a.dataset);

    const KvFile ds = KvFile::load(root / "dataset.txt");
    const uint64_t encoder_seed = parse_u64(ds.get("encoder_seed"), "dataset encoder_seed");
    if (encoder_seed != ckpt.encoder_seed)
        throw ConfigError("dataset encoder seed " + u64_str(encoder_seed) +
                          " does not match checkpoint encoder seed " +
                          u64_str(ckpt.encoder_seed));
    const Vocabulary vocab = Vocabulary::load((root / "vocab.txt").string());
    const TrainSetup setup(ckpt.config, vocab, encoder_seed);

    const DatasetSplit split = load_split(root / "split.txt");
    const std::vector<int64_t>& ids = split_ids_for(split, a.split);
    if (ids.empty()) throw DataError("split '" + a.split + "' is empty");

    const TrainMode mode = ckpt.config.mode;
    const fs::path out_dir =
        a.out.empty() ? root / ("denoise_" + mode_name(mode)) : fs::path(a.out);
    claim_target(out_dir, a.force);
    if (!a.force) {
        for (const int64_t id : ids) {
            const fs::path p = denoised_path(root / sample_dir_name(id), mode);
            if (fs::exists(p)) throw IoError(p.string() + " already exists (use --force)");
        }
    }

    const std::string started = now_utc();
    std::vector<std::string> outputs;
    for (const int64_t id : ids) {
        const fs::path dir = root / sample_dir_name(id);
        const PhantomSample sample = read_sample(dir);
        const Tensor img =
            restore_sample(sample, ckpt.params, ckpt.config, setup, a.seed + static_cast<uint64_t>(id));
        write_denoised(dir, mode, img);
        outputs.push_back(fs::relative(denoised_path(dir, mode), root).string());
    }

    KvFile m;
    m.set("command", "denoise");
    m.set("checkpoint", a.checkpoint);
    m.set("dataset", root.string());
    m.set("split", a.split);
    m.set("mode", mode_name(mode));
    m.set("seed", u64_str(a.seed));
    m.set("outputs", join_paths(outputs));
    m.set("version", kVersion);
    m.set("started", started);
    m.set("finished", now_utc());
    write_manifest(out_dir, m);
    return 0;
}

struct EvalArgs {
    std::string dataset, methods, out;
    bool one_sided = false;
    bool force = false;
};

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        const size_t comma = s.find(',', start);
        out.push_back(s.substr(start, comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

int run_eval(const EvalArgs& a) {
    const std::vector<std::string> methods = split_csv(a.methods);
    claim_target(a.out, a.force);
    const Alternative alt = a.one_sided ? Alternative::Greater : Alternative::TwoSided;

    const std::string started = now_utc();
    const MetricReport report = build_report(a.dataset, methods, a.out, alt);

    KvFile m;
    m.set("command", "eval");
    m.set("dataset", a.dataset);
    m.set("methods", a.methods);
    m.set("alternative", a.one_sided ? "greater" : "two-sided");
    m.set("outputs", join_paths({(fs::path(a.out) / "metrics.csv").string(),
                                 (fs::path(a.out) / "summary.txt").string()}));
    m.set("version", kVersion);
    m.set("started", started);
    m.set("finished", now_utc());
    write_manifest(a.out, m);

    // Reports and manifest are on disk either way; gaps still fail the run.
    if (!report.missing.empty()) {
        std::string msg = "missing denoised outputs:";
        for (const auto& [id, method] : report.missing)
            msg += "\n  sample " + std::to_string(id) + ": " + method;
        throw MissingInputsError(msg);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"paired-phantom diffusion pipeline: data, training, restoration, reports"};
    app.require_subcommand(1);

    GenDataArgs gen;
    CLI::App* gen_cmd = app.add_subcommand("gen-data", "generate a paired low/normal-dose dataset");
    gen_cmd->add_option("--config", gen.config, "dataset config file")->required();
    gen_cmd->add_option("--out", gen.out, "dataset root to create")->required();
    gen_cmd->add_flag("--force", gen.force, "replace an existing target");

    TrainArgs train;
    CLI::App* train_cmd = app.add_subcommand("train", "train a restoration model");
    train_cmd->add_option("--config", train.config, "train config file")->required();
    train_cmd->add_option("--out", train.out, "run directory for log + checkpoints")->required();
    train_cmd->add_option("--resume", train.resume, "checkpoint directory to continue from");
    train_cmd->add_flag("--force", train.force, "replace an existing run directory");

    DenoiseArgs den;
    CLI::App* den_cmd = app.add_subcommand("denoise", "restore a dataset split with a checkpoint");
    den_cmd->add_option("--checkpoint", den.checkpoint, "checkpoint directory")->required();
    den_cmd->add_option("--dataset", den.dataset,
                        "dataset root (default: the checkpoint's training dataset)");
    den_cmd->add_option("--split", den.split, "train, val, or test (default test)")
        ->check(CLI::IsMember({"train", "val", "test"}));
    den_cmd->add_option("--seed", den.seed, "base seed; sample id is added per chain");
    den_cmd->add_option("--out", den.out,
                        "manifest directory (default <dataset>/denoise_<mode>)");
    den_cmd->add_flag("--force", den.force, "overwrite existing restored images");

    EvalArgs ev;
    CLI::App* eval_cmd = app.add_subcommand("eval", "score methods and run paired tests");
    eval_cmd->add_option("--dataset", ev.dataset, "dataset root")->required();
    eval_cmd->add_option("--methods", ev.methods, "comma-separated: low and/or train modes")
        ->required();
    eval_cmd->add_option("--out", ev.out, "report directory")->required();
    eval_cmd->add_flag("--one-sided", ev.one_sided,
                       "one-sided tests (first-listed method greater)");
    eval_cmd->add_flag("--force", ev.force, "replace an existing report directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen_cmd->parsed()) return run_gen_data(gen);
        if (train_cmd->parsed()) return run_train(train);
        if (den_cmd->parsed()) return run_denoise(den);
        return run_eval(ev);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const MissingInputsError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
}
