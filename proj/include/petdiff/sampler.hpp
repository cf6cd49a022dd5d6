#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>

#include "petdiff/diffusion.hpp"
#include "petdiff/phantom.hpp"
#include "petdiff/tensor.hpp"
#include "petdiff/train.hpp"

namespace petdiff {

using NoisePredictor = std::function<Tensor(const Tensor& x_t, int t)>;

// Reverse ancestral chain: x_T ~ N(0, I) from the seed, then for t = T..1
// one posterior_step with eps from the supplied predictor and z ~ N(0, I)
// (z = 0 at t = 1). The result is clamped to >= 0, since activity is
// physically non-negative. NumericError naming the step index if the chain
// state stops being finite; ContractError on an empty schedule.
Tensor denoise_with(const Shape& shape, const NoiseSchedule& sched, uint64_t seed,
                    const NoisePredictor& eps_fn);

// The conditional chain: eps = predict_noise(x_t, low, t, prompt, ...).
Tensor denoise(const Tensor& low, const PromptEmbedding& prompt, const UNetParams& params,
               const UNetConfig& config, const NoiseSchedule& sched, uint64_t seed);

// One-pass restoration for the regression baseline (x_t = 0, t = 0, all-PAD
// prompt), clamped to >= 0. NumericError on a non-finite output.
Tensor regress(const Tensor& low, const PromptEmbedding& pad_prompt, const UNetParams& params,
               const UNetConfig& config);

// Mode dispatch over a stored sample: text-ddpm embeds the sample's own
// prompt, ddpm uses the all-PAD embedding, unet-regression runs the single
// deterministic pass (seed unused there).
Tensor restore_sample(const PhantomSample& sample, const UNetParams& params,
                      const TrainConfig& config, const TrainSetup& setup, uint64_t seed);

// Restored images live next to their sample as denoised_<mode>.f32raw.
std::filesystem::path denoised_path(const std::filesystem::path& sample_dir, TrainMode mode);
void write_denoised(const std::filesystem::path& sample_dir, TrainMode mode, const Tensor& img);

}  // namespace petdiff
