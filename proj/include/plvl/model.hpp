#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "plvl/data_io.hpp"
#include "plvl/head.hpp"
#include "plvl/numerics.hpp"
#include "plvl/objectives.hpp"
#include "plvl/text_encoder.hpp"
#include "plvl/visual_backbone.hpp"

namespace plvl {

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t channels = 3;
  std::size_t patch = 8;
  std::size_t dim = 64;
  std::size_t heads = 2;
  std::size_t ffn_ratio = 4;
  std::size_t text_layers = 2;
  std::size_t max_tokens = 40;
  std::size_t vocab_size = 0;
  BlockSchedule schedule = make_schedule(8, 7);
  AttentionScale attention_scale = AttentionScale::per_head;
  bool out_proj = true;
  double sigma_scale = 1.0 / 6.0;

  std::size_t grid() const { return image_size / patch; }

  void validate() const {
    PatchEmbedParams<float>::check_patch_geometry(image_size, image_size, patch);
    if (heads == 0 || dim % heads)
      throw ConfigError("D=" + std::to_string(dim) + " not divisible by heads=" + std::to_string(heads));
    if (dim % 2) throw ConfigError("D must be even for the channel-split head");
    if (vocab_size < 2) throw ConfigError("vocabulary must hold PAD and UNK");
    if (max_tokens == 0) throw ConfigError("max_tokens must be >= 1");
  }
};

template <typename T>
struct Prediction {
  HeadOutputs<T> raw;
  DecodedBox decoded;
  Box box;  // normalized
  Mask mask;
};

template <typename T>
class Model {
 public:
  Model() = default;

  static Model create(const ModelConfig& c, std::uint64_t seed) {
    c.validate();
    Model m;
    m.config_ = c;
    ParamInit init(seed);
    m.text_ = TextEncoderParams<T>::create(
        init, {c.vocab_size, c.max_tokens, c.dim, c.heads, c.text_layers, c.ffn_ratio});
    BackboneConfig bc;
    bc.image_size = c.image_size;
    bc.channels = c.channels;
    bc.patch = c.patch;
    bc.dim = c.dim;
    bc.heads = c.heads;
    bc.ffn_ratio = c.ffn_ratio;
    bc.schedule = c.schedule;
    m.backbone_ = BackboneParams<T>::create(init, bc);
    m.head_ = HeadParams<T>::create(init, c.dim, c.patch);
    m.apply_attention_flags();
    return m;
  }

  const ModelConfig& config() const { return config_; }
  TextEncoderParams<T>& text() { return text_; }
  BackboneParams<T>& backbone() { return backbone_; }
  HeadParams<T>& head() { return head_; }
  const TextEncoderParams<T>& text() const { return text_; }
  const BackboneParams<T>& backbone() const { return backbone_; }
  const HeadParams<T>& head() const { return head_; }

  template <typename F>
  void visit(F&& f) {
    text_.visit("text", f);
    backbone_.visit("backbone", f);
    head_.visit("head", f);
  }

  std::vector<NamedTensor<T>> parameters() {
    std::vector<NamedTensor<T>> out;
    visit([&](const std::string& name, Tensor<T>& t) { out.push_back({name, t}); });
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
    return n;
  }

  HeadOutputs<T> forward(const Tensor<T>& image, const TokenIds& tokens, BackboneStats* stats = nullptr) const {
    const LanguageTokens<T> lang = encode(tokens, text_);
    return forward_with_language(image, lang, stats);
  }

  HeadOutputs<T> forward_with_language(const Tensor<T>& image, const LanguageTokens<T>& lang,
                                       BackboneStats* stats = nullptr) const {
    return head_forward(backbone_forward(image, lang, backbone_, stats), head_);
  }

  Prediction<T> predict(const Image& image, const TokenIds& tokens) const {
    Prediction<T> p;
    p.raw = forward(image_tensor<T>(image), tokens);
    p.decoded = decode_box(p.raw.center, p.raw.offset, p.raw.size);
    p.box = p.decoded.normalized(p.raw.center.dim(1), p.raw.center.dim(0));
    p.mask = binarize_mask(p.raw.mask_logits);
    return p;
  }

  // Copies values from named tensors (either precision); every parameter
  // must be present with a matching shape.
  template <typename U>
  void load_parameters(const std::vector<NamedTensor<U>>& entries) {
    std::map<std::string, const Tensor<U>*> byname;
    for (const auto& e : entries) byname[e.name] = &e.tensor;
    visit([&](const std::string& name, Tensor<T>& t) {
      auto it = byname.find(name);
      if (it == byname.end()) throw FormatError("checkpoint lacks parameter " + name);
      if (it->second->shape() != t.shape())
        throw FormatError("checkpoint shape mismatch for " + name + ": " + shape_str(it->second->shape()) + " vs " +
                          shape_str(t.shape()));
      auto src = it->second->data();
      auto dst = t.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
    });
  }

 private:
  void apply_attention_flags() {
    auto set = [&](AttentionParams<T>& a) {
      a.scale = config_.attention_scale;
      a.out_proj = config_.out_proj;
    };
    for (auto& l : text_.layers) set(l.attn);
    for (auto& b : backbone_.blocks) {
      set(b.attn);
      if (b.global) set(b.cross);
    }
  }

  ModelConfig config_;
  TextEncoderParams<T> text_;
  BackboneParams<T> backbone_;
  HeadParams<T> head_;
};

struct AdamWConfig {
  double lr = 2.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Adaptive moments with decoupled weight decay; one parameter group.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig c = {}) : c_(c) {}

  std::size_t steps() const { return t_; }

  void step(std::vector<NamedTensor<T>>& params, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(c_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(c_.beta2, static_cast<double>(t_));
    for (auto& p : params) {
      auto& m = m_[p.name];
      auto& v = v_[p.name];
      auto w = p.tensor.data();
      if (m.empty()) {
        m.assign(w.size(), T(0));
        v.assign(w.size(), T(0));
      }
      if (!p.tensor.has_grad()) continue;
      auto g = p.tensor.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = static_cast<T>(c_.beta1 * m[i] + (1 - c_.beta1) * g[i]);
        v[i] = static_cast<T>(c_.beta2 * v[i] + (1 - c_.beta2) * g[i] * g[i]);
        const double mhat = m[i] / bc1, vhat = v[i] / bc2;
        w[i] = static_cast<T>(w[i] - lr * (mhat / (std::sqrt(vhat) + c_.eps) + c_.weight_decay * w[i]));
      }
    }
  }

  std::vector<NamedTensor<T>> state() const {
    std::vector<NamedTensor<T>> out;
    out.push_back({"optim.step", Tensor<T>({1}, std::vector<T>{static_cast<T>(t_)})});
    for (const auto& [name, m] : m_) {
      out.push_back({"optim.m." + name, Tensor<T>({m.size()}, m)});
      out.push_back({"optim.v." + name, Tensor<T>({m.size()}, v_.at(name))});
    }
    return out;
  }

  void load_state(const std::vector<NamedTensor<T>>& entries) {
    m_.clear();
    v_.clear();
    t_ = 0;
    for (const auto& e : entries) {
      if (e.name == "optim.step") {
        t_ = static_cast<std::size_t>(e.tensor.item());
      } else if (e.name.rfind("optim.m.", 0) == 0) {
        m_[e.name.substr(8)] = e.tensor.values();
      } else if (e.name.rfind("optim.v.", 0) == 0) {
        v_[e.name.substr(8)] = e.tensor.values();
      }
    }
  }

 private:
  AdamWConfig c_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<T>> m_, v_;
};

template <typename T>
void save_checkpoint(const std::string& path, Model<T>& model, const AdamW<T>* optim = nullptr) {
  auto entries = model.parameters();
  if (optim)
    for (auto& e : optim->state()) entries.push_back(std::move(e));
  io::write_checkpoint(path, entries);
}

}  // namespace plvl
