#include "petdiff/unet.hpp"

#include <cmath>

#include "petdiff/errors.hpp"

namespace petdiff {

namespace {

constexpr float kMaskMute = -1e30f;

Tensor conv_init(int co, int ci, int k, Rng& rng, float gain = 1.0f) {
    const float std = gain / std::sqrt(static_cast<float>(ci * k * k));
    Tensor w = Tensor::randn({co, ci, k, k}, rng, true);
    for (auto& v : w.mutable_data()) v *= std;
    return w;
}

Tensor linear_init(int in, int out, Rng& rng, float gain = 1.0f) {
    const float std = gain / std::sqrt(static_cast<float>(in));
    Tensor w = Tensor::randn({in, out}, rng, true);
    for (auto& v : w.mutable_data()) v *= std;
    return w;
}

Tensor bias_init(int n, Rng& rng) {
    // Small nonzero biases so every parameter moves from step one.
    Tensor b = Tensor::randn({n}, rng, true);
    for (auto& v : b.mutable_data()) v *= 0.01f;
    return b;
}

// Output-side layers damped so the residual paths start near identity.
constexpr float kOutGain = 0.2f;

ResBlockParams resblock_init(int c_in, int c_out, int time_dim, Rng& rng) {
    ResBlockParams p;
    p.gn1_gamma = Tensor::full({c_in}, 1.0f, true);
    p.gn1_beta = bias_init(c_in, rng);
    p.conv1_w = conv_init(c_out, c_in, 3, rng);
    p.conv1_b = bias_init(c_out, rng);
    p.time_w = linear_init(time_dim, c_out, rng);
    p.time_b = bias_init(c_out, rng);
    p.gn2_gamma = Tensor::full({c_out}, 1.0f, true);
    p.gn2_beta = bias_init(c_out, rng);
    p.conv2_w = conv_init(c_out, c_out, 3, rng, kOutGain);
    p.conv2_b = bias_init(c_out, rng);
    p.has_skip = (c_in != c_out);
    if (p.has_skip) {
        p.skip_w = conv_init(c_out, c_in, 1, rng);
        p.skip_b = bias_init(c_out, rng);
    }
    return p;
}

AttnParams attn_init(int c, int d_text, Rng& rng) {
    AttnParams p;
    p.wq = linear_init(c, c, rng);
    p.wk = linear_init(d_text, c, rng);
    p.wv = linear_init(d_text, c, rng);
    p.wo = linear_init(c, c, rng, kOutGain);
    return p;
}

void push_resblock(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                   const ResBlockParams& p) {
    out.emplace_back(prefix + ".gn1_gamma", p.gn1_gamma);
    out.emplace_back(prefix + ".gn1_beta", p.gn1_beta);
    out.emplace_back(prefix + ".conv1_w", p.conv1_w);
    out.emplace_back(prefix + ".conv1_b", p.conv1_b);
    out.emplace_back(prefix + ".time_w", p.time_w);
    out.emplace_back(prefix + ".time_b", p.time_b);
    out.emplace_back(prefix + ".gn2_gamma", p.gn2_gamma);
    out.emplace_back(prefix + ".gn2_beta", p.gn2_beta);
    out.emplace_back(prefix + ".conv2_w", p.conv2_w);
    out.emplace_back(prefix + ".conv2_b", p.conv2_b);
    if (p.has_skip) {
        out.emplace_back(prefix + ".skip_w", p.skip_w);
        out.emplace_back(prefix + ".skip_b", p.skip_b);
    }
}

void push_attn(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
               const AttnParams& p) {
    out.emplace_back(prefix + ".wq", p.wq);
    out.emplace_back(prefix + ".wk", p.wk);
    out.emplace_back(prefix + ".wv", p.wv);
    out.emplace_back(prefix + ".wo", p.wo);
}

Tensor resblock_forward(const Tensor& x, const ResBlockParams& p, const Tensor& time_feat) {
    Tensor h = add_channel_bias(
        conv2d(silu(group_norm(x, p.gn1_gamma, p.gn1_beta, kGroups)), p.conv1_w, 1), p.conv1_b);
    Tensor tb = add_row_bias(matmul(time_feat, p.time_w), p.time_b);  // [1, c_out]
    h = add_channel_bias(h, reshape(tb, {h.dim(0)}));
    h = add_channel_bias(
        conv2d(silu(group_norm(h, p.gn2_gamma, p.gn2_beta, kGroups)), p.conv2_w, 1), p.conv2_b);
    Tensor sk = p.has_skip ? add_channel_bias(conv2d(x, p.skip_w, 0), p.skip_b) : x;
    return add(sk, h);
}

}  // namespace

void UNetConfig::validate() const {
    if (in_channels < 2 || in_channels % 2 != 0) {
        throw ConfigError("unet: in_channels must be even and >= 2 (x_t and y stacked)");
    }
    if (channel_multipliers.empty()) throw ConfigError("unet: channel_multipliers empty");
    for (int m : channel_multipliers) {
        if (m < 1) throw ConfigError("unet: channel multipliers must be >= 1");
        if ((base_channels * m) % kGroups != 0) {
            throw ConfigError("unet: channel count " + std::to_string(base_channels * m) +
                              " not divisible by " + std::to_string(kGroups));
        }
    }
    const int bottleneck = base_channels * channel_multipliers.back();
    if (attention_heads < 1 || bottleneck % attention_heads != 0) {
        throw ConfigError("unet: bottleneck channels " + std::to_string(bottleneck) +
                          " not divisible by attention_heads");
    }
    if (d_text < 1) throw ConfigError("unet: d_text must be positive");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0) {
        throw ConfigError("unet: time_embed_dim must be even and >= 2");
    }
}

std::vector<std::pair<std::string, Tensor>> UNetParams::named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("stem_w", stem_w);
    out.emplace_back("stem_b", stem_b);
    out.emplace_back("time_mlp1_w", time_mlp1_w);
    out.emplace_back("time_mlp1_b", time_mlp1_b);
    out.emplace_back("time_mlp2_w", time_mlp2_w);
    out.emplace_back("time_mlp2_b", time_mlp2_b);
    for (size_t l = 0; l < enc.size(); ++l) {
        push_resblock(out, "enc" + std::to_string(l), enc[l]);
    }
    for (size_t l = 0; l < down_w.size(); ++l) {
        out.emplace_back("down" + std::to_string(l) + "_w", down_w[l]);
        out.emplace_back("down" + std::to_string(l) + "_b", down_b[l]);
    }
    push_resblock(out, "mid1", mid1);
    push_attn(out, "attn1", attn1);
    push_resblock(out, "mid2", mid2);
    push_attn(out, "attn2", attn2);
    for (size_t l = 0; l < up_w.size(); ++l) {
        out.emplace_back("up" + std::to_string(l) + "_w", up_w[l]);
        out.emplace_back("up" + std::to_string(l) + "_b", up_b[l]);
    }
    for (size_t l = 0; l < dec.size(); ++l) {
        push_resblock(out, "dec" + std::to_string(l), dec[l]);
    }
    out.emplace_back("head_gn_gamma", head_gn_gamma);
    out.emplace_back("head_gn_beta", head_gn_beta);
    out.emplace_back("head_w", head_w);
    out.emplace_back("head_b", head_b);
    return out;
}

std::vector<Tensor> UNetParams::all() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
}

size_t UNetParams::count() const {
    size_t n = 0;
    for (const auto& t : all()) n += t.numel();
    return n;
}

UNetParams init_params(const UNetConfig& config, Rng& rng) {
    config.validate();
    const int L = config.levels();
    const int ted = config.time_embed_dim;
    UNetParams p;
    p.stem_w = conv_init(config.channels_at(0), config.in_channels, 3, rng);
    p.stem_b = bias_init(config.channels_at(0), rng);
    p.time_mlp1_w = linear_init(ted, ted, rng);
    p.time_mlp1_b = bias_init(ted, rng);
    p.time_mlp2_w = linear_init(ted, ted, rng);
    p.time_mlp2_b = bias_init(ted, rng);
    for (int l = 0; l < L; ++l) {
        p.enc.push_back(resblock_init(config.channels_at(l), config.channels_at(l), ted, rng));
        if (l < L - 1) {
            p.down_w.push_back(conv_init(config.channels_at(l + 1), config.channels_at(l), 3, rng));
            p.down_b.push_back(bias_init(config.channels_at(l + 1), rng));
        }
    }
    const int cb = config.channels_at(L - 1);
    p.mid1 = resblock_init(cb, cb, ted, rng);
    p.attn1 = attn_init(cb, config.d_text, rng);
    p.mid2 = resblock_init(cb, cb, ted, rng);
    p.attn2 = attn_init(cb, config.d_text, rng);
    for (int l = L - 2; l >= 0; --l) {
        p.up_w.push_back(conv_init(config.channels_at(l), config.channels_at(l + 1), 3, rng));
        p.up_b.push_back(bias_init(config.channels_at(l), rng));
        p.dec.push_back(
            resblock_init(2 * config.channels_at(l), config.channels_at(l), ted, rng));
    }
    p.head_gn_gamma = Tensor::full({config.channels_at(0)}, 1.0f, true);
    p.head_gn_beta = bias_init(config.channels_at(0), rng);
    p.head_w = conv_init(config.in_channels / 2, config.channels_at(0), 3, rng, kOutGain);
    p.head_b = bias_init(config.in_channels / 2, rng);
    return p;
}

Tensor timestep_embedding(int t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw ConfigError("timestep_embedding: dim must be even");
    if (t < 0) throw IndexError("timestep_embedding: t must be >= 0");
    std::vector<float> emb(static_cast<size_t>(dim));
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double omega = std::pow(10000.0, -2.0 * i / dim);
        emb[static_cast<size_t>(2 * i)] = static_cast<float>(std::sin(t * omega));
        emb[static_cast<size_t>(2 * i + 1)] = static_cast<float>(std::cos(t * omega));
    }
    return Tensor::from_data({dim}, std::move(emb));
}

Tensor attention_mask_bias(const std::vector<int>& token_ids) {
    if (static_cast<int>(token_ids.size()) != kPromptLen) {
        throw DimError("attention mask: expected " + std::to_string(kPromptLen) + " ids");
    }
    std::vector<float> bias(static_cast<size_t>(kPromptLen), 0.0f);
    bool any_content = false;
    for (int i = 0; i < kPromptLen; ++i) {
        if (token_ids[static_cast<size_t>(i)] == Vocabulary::kPad) {
            bias[static_cast<size_t>(i)] = kMaskMute;
        } else {
            any_content = true;
        }
    }
    if (!any_content) std::fill(bias.begin(), bias.end(), 0.0f);
    return Tensor::from_data({kPromptLen}, std::move(bias));
}

Tensor cross_attention(const Tensor& image_feats, const Tensor& text_embed,
                       const Tensor& mask_bias, const AttnParams& p, int heads) {
    if (image_feats.ndim() != 3) {
        throw ConfigError("cross_attention: image features must be [C,h,w]");
    }
    const int c = image_feats.dim(0);
    const int hw = image_feats.dim(1) * image_feats.dim(2);
    if (p.wq.dim(0) != c) {
        throw ConfigError("cross_attention: W_Q expects " + std::to_string(p.wq.dim(0)) +
                          " channels, features have " + std::to_string(c));
    }
    if (text_embed.ndim() != 2 || text_embed.dim(0) != kPromptLen ||
        text_embed.dim(1) != p.wk.dim(0)) {
        throw ConfigError("cross_attention: text embedding shape " +
                          shape_str(text_embed.shape()) + " does not match W_K");
    }
    if (heads < 1 || c % heads != 0) {
        throw ConfigError("cross_attention: channels not divisible by heads");
    }
    const int dh = c / heads;
    const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));

    Tensor q_in = transpose(reshape(image_feats, {c, hw}));  // [hw, C]
    Tensor q = matmul(q_in, p.wq);
    Tensor k = matmul(text_embed, p.wk);  // [77, C]
    Tensor v = matmul(text_embed, p.wv);

    Tensor merged;
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        Tensor scores = add_row_bias(scale(matmul(qh, transpose(kh)), att_scale), mask_bias);
        Tensor oh = matmul(softmax_lastdim(scores), vh);  // [hw, dh]
        merged = (h == 0) ? oh : hconcat(merged, oh);
    }
    Tensor out = matmul(merged, p.wo);  // [hw, C]
    Tensor out3 = reshape(transpose(out), image_feats.shape());
    return add(image_feats, out3);
}

Tensor predict_noise(const Tensor& x_t, const Tensor& y, int t, const PromptEmbedding& prompt,
                     const UNetParams& params, const UNetConfig& config) {
    config.validate();
    if (x_t.ndim() != 3 || x_t.shape() != y.shape()) {
        throw DimError("predict_noise: x_t and y must be equal [S,H,W]");
    }
    const int s = x_t.dim(0), height = x_t.dim(1), width = x_t.dim(2);
    if (2 * s != config.in_channels) {
        throw ConfigError("predict_noise: 2*" + std::to_string(s) + " slices vs in_channels " +
                          std::to_string(config.in_channels));
    }
    const int L = config.levels();
    const int down_factor = 1 << (L - 1);
    if (height % down_factor != 0 || width % down_factor != 0) {
        throw ConfigError("predict_noise: spatial dims must be divisible by " +
                          std::to_string(down_factor));
    }

    // Shared time features: sinusoid -> 2-layer MLP, shape [1, ted].
    Tensor temb = reshape(timestep_embedding(t, config.time_embed_dim),
                          {1, config.time_embed_dim});
    Tensor tfeat = silu(add_row_bias(matmul(temb, params.time_mlp1_w), params.time_mlp1_b));
    tfeat = add_row_bias(matmul(tfeat, params.time_mlp2_w), params.time_mlp2_b);

    Tensor mask_bias = attention_mask_bias(prompt.token_ids);

    Tensor h = add_channel_bias(conv2d(concat_channels(x_t, y), params.stem_w, 1),
                                params.stem_b);
    std::vector<Tensor> skips;
    for (int l = 0; l < L; ++l) {
        h = resblock_forward(h, params.enc[static_cast<size_t>(l)], tfeat);
        if (l < L - 1) {
            skips.push_back(h);
            h = add_channel_bias(
                conv2d(h, params.down_w[static_cast<size_t>(l)], 1, 2),
                params.down_b[static_cast<size_t>(l)]);
        }
    }

    h = resblock_forward(h, params.mid1, tfeat);
    h = cross_attention(h, prompt.embedding, mask_bias, params.attn1, config.attention_heads);
    h = resblock_forward(h, params.mid2, tfeat);
    h = cross_attention(h, prompt.embedding, mask_bias, params.attn2, config.attention_heads);

    for (size_t i = 0; i < params.up_w.size(); ++i) {
        h = add_channel_bias(conv2d(upsample_nearest_2x(h), params.up_w[i], 1), params.up_b[i]);
        h = concat_channels(h, skips[skips.size() - 1 - i]);
        h = resblock_forward(h, params.dec[i], tfeat);
    }

    Tensor out = add_channel_bias(
        conv2d(silu(group_norm(h, params.head_gn_gamma, params.head_gn_beta, kGroups)),
               params.head_w, 1),
        params.head_b);
    return out;
}

}  // namespace petdiff
