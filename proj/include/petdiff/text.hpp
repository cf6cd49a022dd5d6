#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "petdiff/tensor.hpp"

namespace petdiff {

// Fixed token budget matching the CLIP text-encoder interface.
constexpr int kPromptLen = 77;

// Dense token table: line number in vocab.txt = id. BOS/EOS/PAD pinned first.
struct Vocabulary {
    static constexpr int kBos = 0;
    static constexpr int kEos = 1;
    static constexpr int kPad = 2;

    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> ids;

    // Special tokens + prompt scaffold words + the words of each organ name,
    // in the order given (first occurrence wins).
    static Vocabulary build(const std::vector<std::string>& organ_names);

    static Vocabulary load(const std::string& path);
    void save(const std::string& path) const;

    int id_of(const std::string& token) const;  // DataError naming the token
    int size() const { return static_cast<int>(tokens.size()); }
};

// "Axial slice including <names...>", names ordered by ascending label id;
// "background" when no nonzero label is present. Labels missing from
// organ_names are a DataError.
std::string build_prompt(const std::vector<int32_t>& mask_labels,
                         const std::map<int, std::string>& organ_names);

// Lowercase, split on whitespace/commas, wrap in BOS..EOS, truncate so EOS is
// always the last kept token, pad with PAD to exactly 77 ids.
std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab);

// Frozen random encoder standing in for CLIP: token table + positional table,
// both unit-variance Gaussian from the seed, never trained.
struct TextEncoder {
    uint64_t seed = 0;
    int d_text = 512;
    Tensor token_table;  // [vocab_size, d_text]
    Tensor pos_table;    // [77, d_text]

    TextEncoder(uint64_t encoder_seed, int vocab_size, int d_text_ = 512);

    // Row i = token_table[ids[i]] + pos_table[i]; shape [77, d_text].
    Tensor encode(const std::vector<int>& token_ids) const;
};

// One-shot convenience over a freshly built encoder.
Tensor encode_tokens(const std::vector<int>& token_ids, uint64_t encoder_seed, int vocab_size,
                     int d_text = 512);

struct PromptEmbedding {
    std::string prompt_text;
    std::vector<int> token_ids;  // length 77
    Tensor embedding;            // [77, d_text]
};

// The all-PAD conditioning used by the prompt-free diffusion mode.
PromptEmbedding pad_only_embedding(const TextEncoder& enc);

}  // namespace petdiff
