#include "petdiff/text.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>

#include "petdiff/errors.hpp"
#include "petdiff/io.hpp"

namespace petdiff {

namespace {

const char* kSpecials[3] = {"<bos>", "<eos>", "<pad>"};
const char* kScaffold[4] = {"axial", "slice", "including", "background"};

std::string lower(const std::string& s) {
    std::string out = s;
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : lower(text)) {
        if (std::isspace(static_cast<unsigned char>(c)) || c == ',') {
            if (!cur.empty()) {
                words.push_back(cur);
                cur.clear();
            }
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}

}  // namespace

Vocabulary Vocabulary::build(const std::vector<std::string>& organ_names) {
    Vocabulary v;
    auto push = [&v](const std::string& tok) {
        if (v.ids.count(tok)) return;
        v.ids.emplace(tok, static_cast<int>(v.tokens.size()));
        v.tokens.push_back(tok);
    };
    for (const char* s : kSpecials) push(s);
    for (const char* s : kScaffold) push(s);
    for (const auto& name : organ_names) {
        for (const auto& w : split_words(name)) push(w);
    }
    return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
    const std::string body = read_text_file(path);
    Vocabulary v;
    std::istringstream is(body);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) {
            throw FormatError(path + ": empty vocab line " + std::to_string(v.tokens.size()));
        }
        if (v.ids.count(line)) throw FormatError(path + ": duplicate token '" + line + "'");
        v.ids.emplace(line, static_cast<int>(v.tokens.size()));
        v.tokens.push_back(line);
    }
    for (int i = 0; i < 3; ++i) {
        if (v.size() <= i || v.tokens[static_cast<size_t>(i)] != kSpecials[i]) {
            throw FormatError(path + ": special tokens must open the file as <bos>,<eos>,<pad>");
        }
    }
    return v;
}

void Vocabulary::save(const std::string& path) const {
    std::string body;
    for (const auto& t : tokens) {
        body += t;
        body += '\n';
    }
    write_text_file_atomic(path, body);
}

int Vocabulary::id_of(const std::string& token) const {
    auto it = ids.find(token);
    if (it == ids.end()) throw DataError("vocabulary: unknown token '" + token + "'");
    return it->second;
}

std::string build_prompt(const std::vector<int32_t>& mask_labels,
                         const std::map<int, std::string>& organ_names) {
    std::set<int> present;
    for (int32_t l : mask_labels) {
        if (l != 0) present.insert(static_cast<int>(l));
    }
    std::string out = "Axial slice including ";
    if (present.empty()) return out + "background";
    bool first = true;
    for (int label : present) {  // std::set iterates ascending
        auto it = organ_names.find(label);
        if (it == organ_names.end()) {
            throw DataError("build_prompt: label " + std::to_string(label) +
                            " not in the organ table");
        }
        if (!first) out += ", ";
        out += it->second;
        first = false;
    }
    return out;
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
    std::vector<int> ids;
    ids.reserve(kPromptLen);
    ids.push_back(Vocabulary::kBos);
    for (const auto& w : split_words(text)) ids.push_back(vocab.id_of(w));
    if (ids.size() > kPromptLen - 1) ids.resize(kPromptLen - 1);  // room for EOS
    ids.push_back(Vocabulary::kEos);
    ids.resize(kPromptLen, Vocabulary::kPad);
    return ids;
}

TextEncoder::TextEncoder(uint64_t encoder_seed, int vocab_size, int d_text_)
    : seed(encoder_seed), d_text(d_text_) {
    if (vocab_size < 3 || d_text < 1) throw ConfigError("text encoder: bad table sizes");
    Rng rng(encoder_seed);
    token_table = Tensor::randn({vocab_size, d_text}, rng);
    pos_table = Tensor::randn({kPromptLen, d_text}, rng);
}

Tensor TextEncoder::encode(const std::vector<int>& token_ids) const {
    if (static_cast<int>(token_ids.size()) != kPromptLen) {
        throw DimError("encode: expected " + std::to_string(kPromptLen) + " ids, got " +
                       std::to_string(token_ids.size()));
    }
    const int vocab_size = token_table.dim(0);
    std::vector<float> out(static_cast<size_t>(kPromptLen) * d_text);
    const auto& tok = token_table.data();
    const auto& pos = pos_table.data();
    for (int i = 0; i < kPromptLen; ++i) {
        const int id = token_ids[static_cast<size_t>(i)];
        if (id < 0 || id >= vocab_size) {
            throw DataError("encode: token id " + std::to_string(id) + " outside vocab of " +
                            std::to_string(vocab_size));
        }
        for (int j = 0; j < d_text; ++j) {
            out[static_cast<size_t>(i) * d_text + j] =
                tok[static_cast<size_t>(id) * d_text + j] + pos[static_cast<size_t>(i) * d_text + j];
        }
    }
    return Tensor::from_data({kPromptLen, d_text}, std::move(out));
}

Tensor encode_tokens(const std::vector<int>& token_ids, uint64_t encoder_seed, int vocab_size,
                     int d_text) {
    return TextEncoder(encoder_seed, vocab_size, d_text).encode(token_ids);
}

PromptEmbedding pad_only_embedding(const TextEncoder& enc) {
    PromptEmbedding p;
    p.prompt_text = "";
    p.token_ids.assign(kPromptLen, Vocabulary::kPad);
    p.embedding = enc.encode(p.token_ids);
    return p;
}

}  // namespace petdiff
