#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "plvl/model.hpp"

namespace plvl {

// Flat run configuration keyed by dotted names ("optim.lr"). Defaults are
// the toy-scale settings; a JSON file and then --key=value flags override.
class RunConfig {
 public:
  using json = nlohmann::ordered_json;

  RunConfig() : values_(defaults()) {}

  static json defaults() {
    return {
        {"model.image_size", 64},
        {"model.patch", 8},
        {"model.dim", 64},
        {"model.heads", 2},
        {"model.ffn_ratio", 4},
        {"model.text_layers", 2},
        {"model.max_tokens", 40},
        {"model.vocab", ""},
        {"model.attention_scale", "per_head"},
        {"model.out_proj", true},
        {"model.sigma_scale", 1.0 / 6.0},
        {"blocks.total", 15},
        {"blocks.global_indexes", {3, 6, 9, 12, 13, 14, 15}},
        {"data.source", "synthetic"},
        {"data.seed", 0},
        {"data.n", 1000},
        {"data.val_size", 200},
        {"data.max_distractors", 2},
        {"data.train_path", ""},
        {"data.val_path", ""},
        {"optim.steps", 3000},
        {"optim.batch_size", 16},
        {"optim.lr", 1e-3},
        {"optim.weight_decay", 1e-4},
        {"optim.warmup", 100},
        {"optim.schedule", "cosine"},
        {"optim.grad_clip", 1.0},
        {"optim.seed", 0},
        {"loss.lambda_det", 0.1},
        {"loss.lambda_seg", 1.0},
        {"train.checkpoint_every", 500},
        {"train.log_every", 1},
        {"train.resume", ""},
        {"output.dir", "runs/default"},
    };
  }

  void merge_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config " + path + " must be a flat JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) set(it.key(), it.value());
  }

  // Value text is parsed as JSON when possible, otherwise taken as a string.
  void set_from_text(const std::string& key, const std::string& text) {
    json v;
    try {
      v = json::parse(text);
    } catch (const json::exception&) {
      v = text;
    }
    set(key, v);
  }

  void set(const std::string& key, const json& value) {
    if (!values_.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    const json& def = values_[key];
    const bool ok = (def.is_number() && value.is_number()) || (def.is_string() && value.is_string()) ||
                    (def.is_boolean() && value.is_boolean()) || (def.is_array() && value.is_array());
    if (!ok) throw ConfigError("config key '" + key + "' expects a value like " + def.dump());
    values_[key] = value;
  }

  template <typename V>
  V get(const std::string& key) const {
    if (!values_.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    try {
      return values_.at(key).get<V>();
    } catch (const json::exception&) {
      throw ConfigError("config key '" + key + "' has the wrong type");
    }
  }

  std::size_t count(const std::string& key) const {
    const double v = get<double>(key);
    if (v < 0 || v != std::floor(v)) throw ConfigError("config key '" + key + "' must be a non-negative integer");
    return static_cast<std::size_t>(v);
  }

  const json& values() const { return values_; }

  std::string output_dir() const {
    if (const char* env = std::getenv("PLVL_OUT"); env && *env) return env;
    return get<std::string>("output.dir");
  }

  Vocabulary vocabulary() const {
    const auto path = get<std::string>("model.vocab");
    return path.empty() ? synthetic_vocabulary() : Vocabulary::load(path);
  }

  ModelConfig model(std::size_t vocab_size) const {
    ModelConfig m;
    m.image_size = count("model.image_size");
    m.patch = count("model.patch");
    m.dim = count("model.dim");
    m.heads = count("model.heads");
    m.ffn_ratio = count("model.ffn_ratio");
    m.text_layers = count("model.text_layers");
    m.max_tokens = count("model.max_tokens");
    m.vocab_size = vocab_size;
    const auto scale = get<std::string>("model.attention_scale");
    if (scale == "per_head")
      m.attention_scale = AttentionScale::per_head;
    else if (scale == "model_dim")
      m.attention_scale = AttentionScale::model_dim;
    else
      throw ConfigError("model.attention_scale must be per_head or model_dim");
    m.out_proj = get<bool>("model.out_proj");
    m.sigma_scale = get<double>("model.sigma_scale");
    const std::size_t total = count("blocks.total");
    const auto idx = get<std::vector<std::size_t>>("blocks.global_indexes");
    if (idx.size() > total) throw ConfigError("blocks.global_indexes lists more blocks than blocks.total");
    m.schedule = make_schedule(total - idx.size(), idx.size(), idx);
    m.validate();
    return m;
  }

  LossWeights loss_weights() const {
    LossWeights w{get<double>("loss.lambda_det"), get<double>("loss.lambda_seg")};
    w.validate();
    return w;
  }

  // Fails fast on paths that must exist before a command starts.
  void check_paths() const {
    for (const char* key : {"model.vocab", "data.train_path", "data.val_path"}) {
      const auto p = get<std::string>(key);
      if (!p.empty() && !std::filesystem::exists(p)) throw ConfigError(std::string(key) + " does not exist: " + p);
    }
  }

 private:
  json values_;
};

}  // namespace plvl
