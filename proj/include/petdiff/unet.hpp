#pragma once

#include <string>
#include <utility>
#include <vector>

#include "petdiff/rng.hpp"
#include "petdiff/tensor.hpp"
#include "petdiff/text.hpp"

namespace petdiff {

// Group-norm group count used throughout the network.
constexpr int kGroups = 8;

struct UNetConfig {
    int in_channels = 4;  // 2*S: noisy target and conditioning image stacked
    int base_channels = 32;
    std::vector<int> channel_multipliers = {1, 2, 4};
    int attention_heads = 4;
    int d_text = 512;
    int time_embed_dim = 128;

    int levels() const { return static_cast<int>(channel_multipliers.size()); }
    int channels_at(int level) const {
        return base_channels * channel_multipliers[static_cast<size_t>(level)];
    }
    void validate() const;  // ConfigError on any violated invariant
};

// One residual block: norm-silu-conv, add projected time embedding, second
// norm-silu-conv, plus a 1x1-projected (or identity) skip.
struct ResBlockParams {
    Tensor gn1_gamma, gn1_beta;
    Tensor conv1_w, conv1_b;
    Tensor time_w, time_b;  // time_embed_dim -> c_out
    Tensor gn2_gamma, gn2_beta;
    Tensor conv2_w, conv2_b;
    bool has_skip = false;  // true iff c_in != c_out
    Tensor skip_w, skip_b;  // 1x1 conv, present when has_skip
};

struct AttnParams {
    Tensor wq;  // [C, C]
    Tensor wk;  // [d_text, C]
    Tensor wv;  // [d_text, C]
    Tensor wo;  // [C, C]
};

struct UNetParams {
    Tensor stem_w, stem_b;
    Tensor time_mlp1_w, time_mlp1_b;
    Tensor time_mlp2_w, time_mlp2_b;
    std::vector<ResBlockParams> enc;  // one per level
    std::vector<Tensor> down_w, down_b;  // levels-1 stride-2 convs
    ResBlockParams mid1, mid2;
    AttnParams attn1, attn2;  // cross-attention after each mid block
    std::vector<Tensor> up_w, up_b;  // levels-1 convs after nearest upsample
    std::vector<ResBlockParams> dec;  // levels-1 blocks, input = up + skip concat
    Tensor head_gn_gamma, head_gn_beta;
    Tensor head_w, head_b;

    // Flat views in a stable order (checkpoint layout and optimizer slots).
    std::vector<Tensor> all() const;
    std::vector<std::pair<std::string, Tensor>> named() const;
    size_t count() const;  // total scalar parameter count
};

// Fresh parameters; magnitudes ~1/sqrt(fan_in), output-side layers damped.
UNetParams init_params(const UNetConfig& config, Rng& rng);

// Interleaved sin/cos features: emb[2i] = sin(t*w_i), emb[2i+1] = cos(t*w_i),
// w_i = 10000^(-2i/dim). dim must be even, t >= 0.
Tensor timestep_embedding(int t, int dim);

// Scaled dot-product multi-head cross-attention with a residual add. Queries
// come from the flattened image features, keys/values from the text rows.
// mask_bias [77] is added to every score row (0 keeps a key, -1e30 mutes it).
Tensor cross_attention(const Tensor& image_feats, const Tensor& text_embed,
                       const Tensor& mask_bias, const AttnParams& p, int heads);

// Additive score mask for the prompt: PAD positions muted, except that an
// all-PAD prompt (the prompt-free mode) is left unmasked so the softmax
// stays well defined.
Tensor attention_mask_bias(const std::vector<int>& token_ids);

// The full conditional network: predicted noise, shape of x_t.
Tensor predict_noise(const Tensor& x_t, const Tensor& y, int t, const PromptEmbedding& prompt,
                     const UNetParams& params, const UNetConfig& config);

}  // namespace petdiff
