#pragma once

#include <cctype>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "plvl/layers.hpp"

namespace plvl {

// word -> id with PAD = 0 and UNK = 1 reserved. On disk: one token per line,
// line i (0-based) holding id i + 2.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;

  Vocabulary() : words_{"<pad>", "<unk>"} {}

  explicit Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
    for (const auto& w : words) add(w);
  }

  std::size_t add(const std::string& word) {
    if (auto it = ids_.find(word); it != ids_.end()) return it->second;
    const std::size_t id = words_.size();
    words_.push_back(word);
    ids_.emplace(word, id);
    return id;
  }

  std::size_t id(const std::string& word) const {
    auto it = ids_.find(word);
    return it == ids_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& word) const { return ids_.count(word) != 0; }
  std::size_t size() const { return words_.size(); }
  const std::string& word(std::size_t id) const { return words_.at(id); }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open vocabulary " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) throw FormatError("empty line in vocabulary " + path);
      if (v.contains(line)) throw FormatError("duplicate vocabulary entry '" + line + "'");
      v.add(line);
    }
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write vocabulary " + path);
    for (std::size_t i = 2; i < words_.size(); ++i) out << words_[i] << '\n';
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> ids_;
};

// Lowercased words, split on whitespace and punctuation (which is dropped).
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isspace(c) || std::ispunct(c)) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

struct TokenIds {
  std::vector<std::size_t> ids;
  std::vector<bool> mask;  // true = real token
  std::size_t unknown = 0;

  bool empty() const {
    for (bool b : mask)
      if (b) return false;
    return true;
  }
};

// Pads with PAD or truncates to exactly max_len.
inline TokenIds tokenize(const std::string& expression, const Vocabulary& vocab, std::size_t max_len) {
  TokenIds t{std::vector<std::size_t>(max_len, Vocabulary::kPad), std::vector<bool>(max_len, false), 0};
  const auto words = split_words(expression);
  for (std::size_t i = 0; i < words.size() && i < max_len; ++i) {
    t.ids[i] = vocab.id(words[i]);
    if (t.ids[i] == Vocabulary::kUnk) ++t.unknown;
    t.mask[i] = true;
  }
  return t;
}

template <typename T>
struct LanguageTokens {
  Tensor<T> embeddings;    // [L_max, D]
  std::vector<bool> mask;  // true = real token
};

template <typename T>
struct EncoderLayerParams {
  LayerNormParams<T> ln1, ln2;
  AttentionParams<T> attn;
  FfnParams<T> ffn;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    ln1.visit(prefix + ".ln1", f);
    attn.visit(prefix + ".attn", f);
    ln2.visit(prefix + ".ln2", f);
    ffn.visit(prefix + ".ffn", f);
  }
};

struct TextEncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t max_len = 40;
  std::size_t dim = 64;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t ffn_ratio = 4;
};

template <typename T>
struct TextEncoderParams {
  Tensor<T> embed;  // [V, D]
  Tensor<T> pos;    // [L_max, D]
  std::vector<EncoderLayerParams<T>> layers;
  LayerNormParams<T> final_ln;

  static TextEncoderParams create(ParamInit& init, const TextEncoderConfig& c) {
    if (c.vocab_size < 2) throw ConfigError("text encoder: vocabulary must hold PAD and UNK");
    TextEncoderParams p;
    p.embed = init.trunc_normal<T>({c.vocab_size, c.dim});
    p.pos = init.trunc_normal<T>({c.max_len, c.dim});
    for (std::size_t i = 0; i < c.layers; ++i) {
      EncoderLayerParams<T> l;
      l.ln1 = LayerNormParams<T>::create(c.dim);
      l.attn = AttentionParams<T>::create(init, c.dim, c.heads, InitKind::trunc_normal);
      l.ln2 = LayerNormParams<T>::create(c.dim);
      l.ffn = FfnParams<T>::create(init, c.dim, c.ffn_ratio);
      p.layers.push_back(std::move(l));
    }
    p.final_ln = LayerNormParams<T>::create(c.dim);
    return p;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".embed", embed);
    f(prefix + ".pos", pos);
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + ".layer" + std::to_string(i), f);
    final_ln.visit(prefix + ".final_ln", f);
  }
};

// Embedding lookup + positions, then pre-norm encoder layers with key masking.
template <typename T>
LanguageTokens<T> encode(const TokenIds& tokens, const TextEncoderParams<T>& p) {
  if (tokens.empty()) throw ContractError("empty expression");
  const std::size_t len = tokens.ids.size();
  if (len != p.pos.dim(0))
    throw DimensionError("encode: " + std::to_string(len) + " ids but positional table holds " +
                         std::to_string(p.pos.dim(0)));
  const Tensor<T> key_mask = key_mask_logits<T>(tokens.mask);
  Tensor<T> x = add(take_rows(p.embed, tokens.ids), p.pos);
  for (const auto& layer : p.layers) {
    x = add(x, mhsa(layer_norm(x, layer.ln1), layer.attn, &key_mask));
    x = add(x, ffn(layer_norm(x, layer.ln2), layer.ffn));
  }
  return {layer_norm(x, p.final_ln), tokens.mask};
}

}  // namespace plvl
