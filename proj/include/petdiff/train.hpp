#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "petdiff/diffusion.hpp"
#include "petdiff/phantom.hpp"
#include "petdiff/tensor.hpp"
#include "petdiff/text.hpp"
#include "petdiff/unet.hpp"

namespace petdiff {

// The three model modes under comparison. All share one architecture:
// "ddpm" feeds a constant all-PAD prompt so parameter counts match and the
// ablation isolates the text signal; "unet-regression" is a single
// deterministic pass (x_t = 0, t = 0) trained to regress the normal-dose
// image directly.
enum class TrainMode {
    TextDdpm,
    Ddpm,
    UnetRegression,
};

std::string mode_name(TrainMode mode);
TrainMode parse_mode(const std::string& name);  // ConfigError on unknown name

struct TrainConfig {
    TrainMode mode = TrainMode::TextDdpm;
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    double lr = 1e-4;
    int batch_size = 8;
    int64_t total_steps = 1;
    uint64_t seed = 0;
    int64_t checkpoint_interval = 0;  // 0: only the final checkpoint
    std::filesystem::path dataset_root;
    UNetConfig unet;

    // ConfigError on violation. Schedule fields are checked only for the
    // diffusion modes; unet-regression ignores them.
    void validate() const;
};

// Plain-text key=value config. Every TrainConfig field has a key; unknown
// keys are rejected (ConfigError), missing keys keep defaults. The loaded
// config is validated.
TrainConfig load_train_config(const std::filesystem::path& file);
void save_train_config(const TrainConfig& config, const std::filesystem::path& file);

// Uniform draw from {1..T}; one rng step.
int draw_timestep(Rng& rng, int T);

// Immutable per-run context shared by every step: the schedule (empty for
// unet-regression), the frozen text encoder, and the all-PAD embedding.
struct TrainSetup {
    NoiseSchedule schedule;
    Vocabulary vocab;
    TextEncoder encoder;
    PromptEmbedding pad_prompt;
    uint64_t encoder_seed = 0;

    TrainSetup(const TrainConfig& config, const Vocabulary& vocab_, uint64_t encoder_seed_);
};

// Tokenize against the run vocabulary and encode with the frozen tables.
PromptEmbedding embed_prompt(const std::string& text, const Vocabulary& vocab,
                             const TextEncoder& encoder);

// One optimizer step over a batch. Diffusion modes draw (t_i, eps_i) per
// sample in batch order; gradients of the per-sample losses are averaged
// and fed to Adam. unet-regression consumes no rng draws. Returns the mean
// loss. DataError on shape heterogeneity.
double train_step(const std::vector<const PhantomSample*>& batch, UNetParams& params,
                  AdamState& opt, const TrainConfig& config, const TrainSetup& setup, Rng& rng);

struct ModelCheckpoint {
    int64_t version = 1;
    TrainConfig config;
    UNetParams params;
    AdamState opt;
    std::string rng_state;
    int64_t steps_completed = 0;
    uint64_t encoder_seed = 0;
};

// Container directory: meta.txt / config.txt / params.txt + params.f32raw /
// opt.txt + adam_m.f32raw + adam_v.f32raw. The write is atomic (temp dir,
// then rename over the target). load_checkpoint restores everything bitwise;
// VersionError on an unsupported version tag, FormatError on a payload that
// does not match its header.
void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& dir);
ModelCheckpoint load_checkpoint(const std::filesystem::path& dir);

struct TrainResult {
    std::vector<double> losses;  // steps run by this call, in order
    std::filesystem::path final_checkpoint;
    int64_t steps_completed = 0;
};

// Full training driver. Reads the dataset at config.dataset_root (vocab,
// split, train samples, encoder seed), initializes or resumes, runs to
// config.total_steps, appends "step, loss, seconds" lines to
// run_dir/train_log.txt, and writes ckpt_<step> directories at the
// checkpoint interval plus a final one. Resuming refuses a checkpoint whose
// encoder seed or model-relevant config fields disagree (ConfigError);
// total_steps, checkpoint_interval, and dataset_root may differ.
// NumericError if the loss stops being finite.
TrainResult train_run(const TrainConfig& config, const std::filesystem::path& run_dir,
                      const std::filesystem::path& resume_from = {});

}  // namespace petdiff
