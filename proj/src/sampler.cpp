#include "petdiff/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "petdiff/errors.hpp"
#include "petdiff/io.hpp"
#include "petdiff/rng.hpp"

namespace petdiff {

namespace {

bool all_finite(const std::vector<float>& v) {
    for (const float x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

Tensor clamp_nonneg(const Tensor& t) {
    std::vector<float> out = t.data();
    for (float& v : out) v = std::max(0.0f, v);
    return Tensor::from_data(t.shape(), std::move(out));
}

}  // namespace

Tensor denoise_with(const Shape& shape, const NoiseSchedule& sched, uint64_t seed,
                    const NoisePredictor& eps_fn) {
    if (sched.T < 1) throw ContractError("denoise: schedule is empty");
    Rng rng(seed);
    Tensor x = Tensor::randn(shape, rng);
    for (int t = sched.T; t >= 1; --t) {
        const Tensor eps = eps_fn(x, t);
        const Tensor z = t > 1 ? Tensor::randn(shape, rng) : Tensor::zeros(shape);
        const Tensor next = posterior_step(x, eps, t, z, sched);
        if (!all_finite(next.data()))
            throw NumericError("denoise: non-finite state after step t=" + std::to_string(t));
        // detach: keep only the values, not the step's graph
        x = Tensor::from_data(next.shape(), next.data());
    }
    return clamp_nonneg(x);
}

Tensor denoise(const Tensor& low, const PromptEmbedding& prompt, const UNetParams& params,
               const UNetConfig& config, const NoiseSchedule& sched, uint64_t seed) {
    return denoise_with(low.shape(), sched, seed, [&](const Tensor& x_t, int t) {
        return predict_noise(x_t, low, t, prompt, params, config);
    });
}

Tensor regress(const Tensor& low, const PromptEmbedding& pad_prompt, const UNetParams& params,
               const UNetConfig& config) {
    const Tensor x0 = Tensor::zeros(low.shape());
    const Tensor pred = predict_noise(x0, low, 0, pad_prompt, params, config);
    if (!all_finite(pred.data()))
        throw NumericError("restore: non-finite output from the regression pass");
    return clamp_nonneg(pred);
}

Tensor restore_sample(const PhantomSample& sample, const UNetParams& params,
                      const TrainConfig& config, const TrainSetup& setup, uint64_t seed) {
    switch (config.mode) {
        case TrainMode::TextDdpm: {
            const PromptEmbedding prompt = embed_prompt(sample.prompt, setup.vocab, setup.encoder);
            return denoise(sample.low_dose, prompt, params, config.unet, setup.schedule, seed);
        }
        case TrainMode::Ddpm:
            return denoise(sample.low_dose, setup.pad_prompt, params, config.unet,
                           setup.schedule, seed);
        case TrainMode::UnetRegression:
            return regress(sample.low_dose, setup.pad_prompt, params, config.unet);
    }
    throw ContractError("restore_sample: bad mode enum value");
}

std::filesystem::path denoised_path(const std::filesystem::path& sample_dir, TrainMode mode) {
    return sample_dir / ("denoised_" + mode_name(mode) + ".f32raw");
}

void write_denoised(const std::filesystem::path& sample_dir, TrainMode mode, const Tensor& img) {
    write_f32raw(denoised_path(sample_dir, mode), img.data());
}

}  // namespace petdiff
