#include "petdiff/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <system_error>
#include <thread>
#include <utility>
#include <vector>

#include "petdiff/errors.hpp"
#include "petdiff/io.hpp"
#include "petdiff/parallel.hpp"

namespace petdiff {

namespace fs = std::filesystem;

namespace {

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

int checked_int(const KvFile& kv, const std::string& key) {
    const int64_t v = kv.get_i64(key);
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
        throw ConfigError("train config: key " + key + " out of range: " + std::to_string(v));
    return static_cast<int>(v);
}

std::string multipliers_str(const std::vector<int>& m) {
    std::string out;
    for (size_t i = 0; i < m.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(m[i]);
    }
    return out;
}

std::vector<int> parse_multipliers(const std::string& s) {
    std::vector<int> out;
    size_t start = 0;
    while (start <= s.size()) {
        const size_t comma = s.find(',', start);
        const size_t end = comma == std::string::npos ? s.size() : comma;
        const std::string piece = s.substr(start, end - start);
        try {
            size_t pos = 0;
            const long v = std::stol(piece, &pos);
            if (pos != piece.size()) throw std::invalid_argument(piece);
            out.push_back(static_cast<int>(v));
        } catch (const std::exception&) {
            throw ConfigError("train config: bad channel_multipliers entry: '" + piece + "'");
        }
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

// Fields that must agree between a checkpoint and a resuming run; total
// steps, checkpoint interval, and the dataset path are free to change.
void check_resume_compat(const TrainConfig& saved, const TrainConfig& now) {
    const auto fail = [](const std::string& field) {
        throw ConfigError("train_run: resume config mismatch: " + field);
    };
    if (saved.mode != now.mode) fail("mode");
    if (saved.T != now.T) fail("T");
    if (saved.beta_start != now.beta_start) fail("beta_start");
    if (saved.beta_end != now.beta_end) fail("beta_end");
    if (saved.lr != now.lr) fail("lr");
    if (saved.batch_size != now.batch_size) fail("batch_size");
    if (saved.seed != now.seed) fail("seed");
    if (saved.unet.in_channels != now.unet.in_channels) fail("in_channels");
    if (saved.unet.base_channels != now.unet.base_channels) fail("base_channels");
    if (saved.unet.channel_multipliers != now.unet.channel_multipliers)
        fail("channel_multipliers");
    if (saved.unet.attention_heads != now.unet.attention_heads) fail("attention_heads");
    if (saved.unet.d_text != now.unet.d_text) fail("d_text");
    if (saved.unet.time_embed_dim != now.unet.time_embed_dim) fail("time_embed_dim");
}

std::vector<float> flatten(const std::vector<std::vector<float>>& vs) {
    std::vector<float> out;
    size_t total = 0;
    for (const auto& v : vs) total += v.size();
    out.reserve(total);
    for (const auto& v : vs) out.insert(out.end(), v.begin(), v.end());
    return out;
}

}  // namespace

std::string mode_name(TrainMode mode) {
    switch (mode) {
        case TrainMode::TextDdpm: return "text-ddpm";
        case TrainMode::Ddpm: return "ddpm";
        case TrainMode::UnetRegression: return "unet-regression";
    }
    throw ContractError("mode_name: bad enum value");
}

TrainMode parse_mode(const std::string& name) {
    if (name == "text-ddpm") return TrainMode::TextDdpm;
    if (name == "ddpm") return TrainMode::Ddpm;
    if (name == "unet-regression") return TrainMode::UnetRegression;
    throw ConfigError("unknown train mode: '" + name +
                      "' (expected text-ddpm, ddpm, or unet-regression)");
}

void TrainConfig::validate() const {
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("train config: lr must be positive");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (total_steps < 1) throw ConfigError("train config: total_steps must be >= 1");
    if (checkpoint_interval < 0)
        throw ConfigError("train config: checkpoint_interval must be >= 0");
    if (dataset_root.empty()) throw ConfigError("train config: dataset_root is required");
    if (mode != TrainMode::UnetRegression) {
        if (T < 1) throw ConfigError("train config: T must be >= 1");
        if (!(beta_start > 0) || !(beta_start <= beta_end) || !(beta_end < 1))
            throw ConfigError("train config: need 0 < beta_start <= beta_end < 1");
    }
    unet.validate();
}

TrainConfig load_train_config(const fs::path& file) {
    const KvFile kv = KvFile::load(file);
    TrainConfig cfg;
    for (const auto& [key, value] : kv.entries) {
        if (key == "mode") cfg.mode = parse_mode(value);
        else if (key == "T") cfg.T = checked_int(kv, key);
        else if (key == "beta_start") cfg.beta_start = kv.get_f64(key);
        else if (key == "beta_end") cfg.beta_end = kv.get_f64(key);
        else if (key == "lr") cfg.lr = kv.get_f64(key);
        else if (key == "batch_size") cfg.batch_size = checked_int(kv, key);
        else if (key == "total_steps") cfg.total_steps = kv.get_i64(key);
        else if (key == "seed") cfg.seed = parse_u64(value, key);
        else if (key == "checkpoint_interval") cfg.checkpoint_interval = kv.get_i64(key);
        else if (key == "dataset_root") cfg.dataset_root = value;
        else if (key == "in_channels") cfg.unet.in_channels = checked_int(kv, key);
        else if (key == "base_channels") cfg.unet.base_channels = checked_int(kv, key);
        else if (key == "channel_multipliers") cfg.unet.channel_multipliers = parse_multipliers(value);
        else if (key == "attention_heads") cfg.unet.attention_heads = checked_int(kv, key);
        else if (key == "d_text") cfg.unet.d_text = checked_int(kv, key);
        else if (key == "time_embed_dim") cfg.unet.time_embed_dim = checked_int(kv, key);
        else throw ConfigError("train config: unknown key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

void save_train_config(const TrainConfig& config, const fs::path& file) {
    KvFile kv;
    kv.set("mode", mode_name(config.mode));
    kv.set_i64("T", config.T);
    kv.set_f64("beta_start", config.beta_start);
    kv.set_f64("beta_end", config.beta_end);
    kv.set_f64("lr", config.lr);
    kv.set_i64("batch_size", config.batch_size);
    kv.set_i64("total_steps", config.total_steps);
    kv.set("seed", u64_str(config.seed));
    kv.set_i64("checkpoint_interval", config.checkpoint_interval);
    kv.set("dataset_root", config.dataset_root.string());
    kv.set_i64("in_channels", config.unet.in_channels);
    kv.set_i64("base_channels", config.unet.base_channels);
    kv.set("channel_multipliers", multipliers_str(config.unet.channel_multipliers));
    kv.set_i64("attention_heads", config.unet.attention_heads);
    kv.set_i64("d_text", config.unet.d_text);
    kv.set_i64("time_embed_dim", config.unet.time_embed_dim);
    kv.save(file);
}

int draw_timestep(Rng& rng, int T) {
    return 1 + static_cast<int>(rng.uniform_int(T));
}

TrainSetup::TrainSetup(const TrainConfig& config, const Vocabulary& vocab_,
                       uint64_t encoder_seed_)
    : schedule(config.mode == TrainMode::UnetRegression
                   ? NoiseSchedule{}
                   : build_schedule(config.T, config.beta_start, config.beta_end)),
      vocab(vocab_),
      encoder(encoder_seed_, vocab_.size(), config.unet.d_text),
      pad_prompt(pad_only_embedding(encoder)),
      encoder_seed(encoder_seed_) {}

PromptEmbedding embed_prompt(const std::string& text, const Vocabulary& vocab,
                             const TextEncoder& encoder) {
    PromptEmbedding p;
    p.prompt_text = text;
    p.token_ids = tokenize(text, vocab);
    p.embedding = encoder.encode(p.token_ids);
    return p;
}

double train_step(const std::vector<const PhantomSample*>& batch, UNetParams& params,
                  AdamState& opt, const TrainConfig& config, const TrainSetup& setup, Rng& rng) {
    if (batch.empty()) throw ContractError("train_step: batch must be nonempty");
    const Shape ref_shape = batch[0]->normal_dose.shape();
    for (const PhantomSample* s : batch) {
        if (s->normal_dose.shape() != ref_shape || s->low_dose.shape() != ref_shape)
            throw DataError("train_step: batch samples must share one image shape");
    }

    // Draw everything up front, in batch order, so the rng stream is consumed
    // identically no matter how the forward/backward work is scheduled.
    const int b_count = static_cast<int>(batch.size());
    std::vector<int> steps(static_cast<size_t>(b_count), 0);
    std::vector<Tensor> noises(static_cast<size_t>(b_count));
    std::vector<PromptEmbedding> own_prompts(static_cast<size_t>(b_count));
    std::vector<const PromptEmbedding*> prompts(static_cast<size_t>(b_count), &setup.pad_prompt);
    if (config.mode != TrainMode::UnetRegression) {
        for (int b = 0; b < b_count; ++b) {
            steps[static_cast<size_t>(b)] = draw_timestep(rng, config.T);
            noises[static_cast<size_t>(b)] = Tensor::randn(ref_shape, rng);
            if (config.mode == TrainMode::TextDdpm) {
                own_prompts[static_cast<size_t>(b)] =
                    embed_prompt(batch[static_cast<size_t>(b)]->prompt, setup.vocab,
                                 setup.encoder);
                prompts[static_cast<size_t>(b)] = &own_prompts[static_cast<size_t>(b)];
            }
        }
    }

    std::vector<GradStore> stores(static_cast<size_t>(b_count));
    std::vector<double> losses(static_cast<size_t>(b_count), 0.0);
    const unsigned workers = std::min(static_cast<unsigned>(b_count),
                                      std::max(2u, std::thread::hardware_concurrency()));
    parallel_for(static_cast<size_t>(b_count), workers, [&](size_t b, unsigned) {
        const PhantomSample& s = *batch[b];
        Tensor loss;
        if (config.mode == TrainMode::UnetRegression) {
            const Tensor x0 = Tensor::zeros(ref_shape);
            const Tensor pred =
                predict_noise(x0, s.low_dose, 0, setup.pad_prompt, params, config.unet);
            loss = noise_loss(s.normal_dose, pred);
        } else {
            const int t = steps[b];
            const Tensor x_t = q_sample(s.normal_dose, t, noises[b], setup.schedule);
            const Tensor pred = predict_noise(x_t, s.low_dose, t, *prompts[b], params, config.unet);
            loss = noise_loss(noises[b], pred);
        }
        backward(loss, &stores[b]);
        losses[b] = static_cast<double>(loss.item());
    });
    double loss_sum = 0.0;
    for (int b = 0; b < b_count; ++b) loss_sum += losses[static_cast<size_t>(b)];

    // Average the per-sample gradients in batch order so the result is
    // independent of everything but the sample sequence.
    std::vector<Tensor> plist = params.all();
    const float inv_b = 1.0f / static_cast<float>(b_count);
    for (Tensor& p : plist) {
        const Node* node = p.node().get();
        std::vector<float>& grad = p.node()->grad;
        grad.assign(p.numel(), 0.0f);
        for (const GradStore& store : stores) {
            const auto it = store.grads.find(node);
            if (it == store.grads.end()) continue;
            const std::vector<float>& g = it->second;
            for (size_t k = 0; k < g.size(); ++k) grad[k] += g[k];
        }
        for (float& v : grad) v *= inv_b;
    }
    adam_step(plist, opt);
    return loss_sum / static_cast<double>(b_count);
}

void save_checkpoint(const ModelCheckpoint& ckpt, const fs::path& dir) {
    if (ckpt.version != 1)
        throw VersionError("checkpoint: unsupported version " + std::to_string(ckpt.version));

    fs::path tmp = dir;
    tmp += ".tmp";
    std::error_code ec;
    fs::remove_all(tmp, ec);
    fs::create_directories(tmp, ec);
    if (ec) throw IoError("checkpoint: cannot create " + tmp.string() + ": " + ec.message());

    KvFile meta;
    meta.set_i64("version", ckpt.version);
    meta.set_i64("steps_completed", ckpt.steps_completed);
    meta.set("encoder_seed", u64_str(ckpt.encoder_seed));
    meta.set("rng", ckpt.rng_state);
    meta.save(tmp / "meta.txt");

    save_train_config(ckpt.config, tmp / "config.txt");

    KvFile header;
    std::vector<float> blob;
    for (const auto& [name, tensor] : ckpt.params.named()) {
        header.set_i64(name, static_cast<int64_t>(tensor.numel()));
        const std::vector<float>& d = tensor.data();
        blob.insert(blob.end(), d.begin(), d.end());
    }
    header.save(tmp / "params.txt");
    write_f32raw(tmp / "params.f32raw", blob);

    KvFile okv;
    okv.set_i64("step_count", ckpt.opt.step_count);
    okv.set_f64("lr", static_cast<double>(ckpt.opt.lr));
    okv.set_f64("beta1", static_cast<double>(ckpt.opt.beta1));
    okv.set_f64("beta2", static_cast<double>(ckpt.opt.beta2));
    okv.set_f64("epsilon", static_cast<double>(ckpt.opt.epsilon));
    okv.save(tmp / "opt.txt");
    write_f32raw(tmp / "adam_m.f32raw", flatten(ckpt.opt.first_moment));
    write_f32raw(tmp / "adam_v.f32raw", flatten(ckpt.opt.second_moment));

    fs::remove_all(dir, ec);
    fs::rename(tmp, dir, ec);
    if (ec) throw IoError("checkpoint: cannot move " + tmp.string() + " into place: " +
                          ec.message());
}

ModelCheckpoint load_checkpoint(const fs::path& dir) {
    if (!fs::is_directory(dir))
        throw IoError("checkpoint: no such directory: " + dir.string());

    const KvFile meta = KvFile::load(dir / "meta.txt");
    const int64_t version = meta.get_i64("version");
    if (version != 1)
        throw VersionError("checkpoint: unsupported version " + std::to_string(version));

    ModelCheckpoint ckpt;
    ckpt.version = version;
    ckpt.steps_completed = meta.get_i64("steps_completed");
    ckpt.encoder_seed = parse_u64(meta.get("encoder_seed"), "encoder_seed");
    ckpt.rng_state = meta.get("rng");
    ckpt.config = load_train_config(dir / "config.txt");

    Rng scratch(0);
    ckpt.params = init_params(ckpt.config.unet, scratch);

    const KvFile header = KvFile::load(dir / "params.txt");
    auto named = ckpt.params.named();
    if (header.entries.size() != named.size())
        throw FormatError("checkpoint: params header lists " +
                          std::to_string(header.entries.size()) + " arrays, expected " +
                          std::to_string(named.size()));
    size_t total = 0;
    for (size_t i = 0; i < named.size(); ++i) {
        const auto& [hkey, hval] = header.entries[i];
        if (hkey != named[i].first)
            throw FormatError("checkpoint: params header entry " + std::to_string(i) + " is '" +
                              hkey + "', expected '" + named[i].first + "'");
        if (header.get_i64(hkey) != static_cast<int64_t>(named[i].second.numel()))
            throw FormatError("checkpoint: array " + hkey + " has size " + hval + ", expected " +
                              std::to_string(named[i].second.numel()));
        total += named[i].second.numel();
    }
    const std::vector<float> blob = read_f32raw(dir / "params.f32raw", total);
    size_t off = 0;
    for (auto& [name, tensor] : named) {
        std::vector<float>& dst = tensor.mutable_data();
        std::copy(blob.begin() + static_cast<ptrdiff_t>(off),
                  blob.begin() + static_cast<ptrdiff_t>(off + tensor.numel()), dst.begin());
        off += tensor.numel();
    }

    const KvFile okv = KvFile::load(dir / "opt.txt");
    std::vector<Tensor> plist = ckpt.params.all();
    ckpt.opt = AdamState::init(plist, static_cast<float>(okv.get_f64("lr")));
    ckpt.opt.step_count = okv.get_i64("step_count");
    ckpt.opt.beta1 = static_cast<float>(okv.get_f64("beta1"));
    ckpt.opt.beta2 = static_cast<float>(okv.get_f64("beta2"));
    ckpt.opt.epsilon = static_cast<float>(okv.get_f64("epsilon"));
    const std::vector<float> m_blob = read_f32raw(dir / "adam_m.f32raw", total);
    const std::vector<float> v_blob = read_f32raw(dir / "adam_v.f32raw", total);
    size_t moff = 0;
    for (size_t i = 0; i < ckpt.opt.first_moment.size(); ++i) {
        const size_t n = ckpt.opt.first_moment[i].size();
        std::copy(m_blob.begin() + static_cast<ptrdiff_t>(moff),
                  m_blob.begin() + static_cast<ptrdiff_t>(moff + n),
                  ckpt.opt.first_moment[i].begin());
        std::copy(v_blob.begin() + static_cast<ptrdiff_t>(moff),
                  v_blob.begin() + static_cast<ptrdiff_t>(moff + n),
                  ckpt.opt.second_moment[i].begin());
        moff += n;
    }
    return ckpt;
}

TrainResult train_run(const TrainConfig& config, const fs::path& run_dir,
                      const fs::path& resume_from) {
    config.validate();
    const fs::path root = config.dataset_root;
    const KvFile ds = KvFile::load(root / "dataset.txt");
    const uint64_t encoder_seed = parse_u64(ds.get("encoder_seed"), "encoder_seed");
    const Vocabulary vocab = Vocabulary::load((root / "vocab.txt").string());
    const DatasetSplit split = load_split(root / "split.txt");
    if (split.train.empty()) throw DataError("train_run: dataset split has no training samples");

    std::vector<PhantomSample> samples;
    samples.reserve(split.train.size());
    for (const int64_t id : split.train) samples.push_back(read_sample(root / sample_dir_name(id)));

    const TrainSetup setup(config, vocab, encoder_seed);

    UNetParams params;
    AdamState opt;
    Rng rng(config.seed);
    int64_t start_step = 0;

    if (!resume_from.empty()) {
        ModelCheckpoint ckpt = load_checkpoint(resume_from);
        if (ckpt.encoder_seed != encoder_seed)
            throw ConfigError("train_run: checkpoint encoder seed " + u64_str(ckpt.encoder_seed) +
                              " does not match dataset encoder seed " + u64_str(encoder_seed));
        check_resume_compat(ckpt.config, config);
        if (ckpt.steps_completed >= config.total_steps)
            throw ConfigError("train_run: checkpoint already at step " +
                              std::to_string(ckpt.steps_completed) +
                              "; raise total_steps to resume");
        params = std::move(ckpt.params);
        opt = std::move(ckpt.opt);
        rng.set_state(ckpt.rng_state);
        start_step = ckpt.steps_completed;
    } else {
        params = init_params(config.unet, rng);
        opt = AdamState::init(params.all(), static_cast<float>(config.lr));
    }

    std::error_code ec;
    fs::create_directories(run_dir, ec);
    if (ec) throw IoError("train_run: cannot create " + run_dir.string() + ": " + ec.message());
    const fs::path log_path = run_dir / "train_log.txt";
    std::ofstream log(log_path, std::ios::app);
    if (!log) throw IoError("train_run: cannot open log: " + log_path.string());

    const auto t0 = std::chrono::steady_clock::now();
    TrainResult result;
    const int64_t n_train = static_cast<int64_t>(samples.size());
    for (int64_t step = start_step + 1; step <= config.total_steps; ++step) {
        std::vector<const PhantomSample*> batch;
        batch.reserve(static_cast<size_t>(config.batch_size));
        for (int b = 0; b < config.batch_size; ++b)
            batch.push_back(&samples[static_cast<size_t>(rng.uniform_int(n_train))]);
        const double loss = train_step(batch, params, opt, config, setup, rng);
        if (!std::isfinite(loss))
            throw NumericError("train_run: non-finite loss at step " + std::to_string(step));
        result.losses.push_back(loss);

        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char line[96];
        std::snprintf(line, sizeof(line), "%lld, %.9g, %.3f\n", static_cast<long long>(step),
                      loss, secs);
        log << line;
        log.flush();

        const bool at_interval =
            config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0;
        if (at_interval || step == config.total_steps) {
            ModelCheckpoint ckpt;
            ckpt.version = 1;
            ckpt.config = config;
            ckpt.params = params;
            ckpt.opt = opt;
            ckpt.rng_state = rng.state();
            ckpt.steps_completed = step;
            ckpt.encoder_seed = encoder_seed;
            char name[32];
            std::snprintf(name, sizeof(name), "ckpt_%06lld", static_cast<long long>(step));
            const fs::path cdir = run_dir / name;
            save_checkpoint(ckpt, cdir);
            result.final_checkpoint = cdir;
        }
    }
    result.steps_completed = config.total_steps;
    return result;
}

}  // namespace petdiff
