#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>

#include <nlohmann/json.hpp>

#include "plvl/config.hpp"
#include "plvl/gradcheck_suite.hpp"
#include "plvl/predict.hpp"
#include "plvl/train.hpp"

namespace plvl {

enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitUsage = 2, kExitNumeric = 3 };

// Maps library exceptions to exit codes and prints the reason.
inline int run_guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
}

// Creates the output directory and writes the resolved config into it.
inline std::filesystem::path prepare_output(const RunConfig& cfg, std::ostream& err) {
  const std::filesystem::path dir(cfg.output_dir());
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "config.json");
  if (!os) throw ConfigError("cannot write " + (dir / "config.json").string());
  os << cfg.values().dump(2) << '\n';
  err << "config: " << cfg.values().dump() << '\n';
  return dir;
}

inline SynthOptions synth_options(const RunConfig& cfg) {
  SynthOptions o;
  o.height = o.width = cfg.count("model.image_size");
  o.max_distractors = cfg.count("data.max_distractors");
  return o;
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("split must be train, val or test, got '" + s + "'");
}

// Evaluation samples for a split: rendered from the split's own synthetic
// stream, or read from the configured JSONL file.
inline std::vector<GroundingSample> load_split(const RunConfig& cfg, const std::string& split) {
  const Split sp = parse_split(split);
  const std::size_t size = cfg.count("model.image_size");
  const auto source = cfg.get<std::string>("data.source");
  if (source == "synthetic") {
    const std::size_t n = cfg.count("data.val_size");
    std::vector<GroundingSample> out;
    out.reserve(n);
    for (auto& item : gen_synthetic_items(cfg.count("data.seed"), n, synth_options(cfg), sp))
      out.push_back(std::move(item.sample));
    return out;
  }
  if (source == "jsonl") {
    const auto path = cfg.get<std::string>(sp == Split::train ? "data.train_path" : "data.val_path");
    if (path.empty()) throw ConfigError("no JSONL path configured for split " + split);
    return load_jsonl(path, size, size);
  }
  throw ConfigError("data.source must be synthetic or jsonl");
}

inline SampleStream training_stream(const RunConfig& cfg) {
  const auto source = cfg.get<std::string>("data.source");
  if (source == "synthetic") return SampleStream::synthetic(cfg.count("data.seed"), synth_options(cfg));
  if (source == "jsonl") {
    const auto path = cfg.get<std::string>("data.train_path");
    if (path.empty()) throw ConfigError("data.train_path is required for jsonl training");
    const std::size_t size = cfg.count("model.image_size");
    return SampleStream::dataset(load_jsonl(path, size, size), cfg.count("data.seed"));
  }
  throw ConfigError("data.source must be synthetic or jsonl");
}

inline TrainOptions train_options(const RunConfig& cfg) {
  TrainOptions o;
  o.steps = cfg.count("optim.steps");
  o.batch_size = cfg.count("optim.batch_size");
  o.lr = cfg.get<double>("optim.lr");
  o.warmup = cfg.count("optim.warmup");
  o.schedule = cfg.get<std::string>("optim.schedule");
  o.grad_clip = cfg.get<double>("optim.grad_clip");
  o.weights = cfg.loss_weights();
  o.validate();
  return o;
}

inline Model<float> build_model(const RunConfig& cfg, const Vocabulary& vocab) {
  return Model<float>::create(cfg.model(vocab.size()), cfg.count("optim.seed"));
}

inline Model<float> load_model(const RunConfig& cfg, const Vocabulary& vocab, const std::string& checkpoint) {
  if (checkpoint.empty()) throw ConfigError("a checkpoint is required");
  Model<float> model = build_model(cfg, vocab);
  model.load_parameters(io::read_checkpoint<float>(checkpoint));
  return model;
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_gen_data(const RunConfig& cfg, const std::string& split, std::ostream& out, std::ostream& err) {
  cfg.check_paths();
  const std::size_t n = cfg.count("data.n");
  if (n == 0) throw ContractError("gen-data: data.n must be >= 1");
  const auto dir = prepare_output(cfg, err);
  const Split sp = parse_split(split);
  std::vector<GroundingSample> samples;
  samples.reserve(n);
  for (auto& item : gen_synthetic_items(cfg.count("data.seed"), n, synth_options(cfg), sp))
    samples.push_back(std::move(item.sample));
  const auto jsonl = dir / (split + ".jsonl");
  save_jsonl(jsonl.string(), samples, "images/" + split);
  synthetic_vocabulary().save((dir / "vocab.txt").string());
  out << nlohmann::ordered_json{{"dataset", jsonl.string()}, {"n", n}, {"vocab", (dir / "vocab.txt").string()}}.dump()
      << '\n';
  return kExitOk;
}

inline int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  cfg.check_paths();
  const Vocabulary vocab = cfg.vocabulary();
  const TrainOptions opts = train_options(cfg);
  const SampleStream data = training_stream(cfg);
  const auto dir = prepare_output(cfg, err);
  Model<float> model = build_model(cfg, vocab);
  AdamW<float> optim(AdamWConfig{opts.lr, 0.9, 0.999, 1e-8, cfg.get<double>("optim.weight_decay")});

  std::size_t start = 0;
  if (const auto resume = cfg.get<std::string>("train.resume"); !resume.empty()) {
    const auto entries = io::read_checkpoint<float>(resume);
    model.load_parameters(entries);
    optim.load_state(entries);
    start = optim.steps();
    err << "resumed from " << resume << " at step " << start << '\n';
  }

  std::filesystem::create_directories(dir / "checkpoints");
  std::ofstream log(dir / "train_log.jsonl", start > 0 ? std::ios::app : std::ios::trunc);
  const std::size_t every = cfg.count("train.checkpoint_every"), log_every = std::max<std::size_t>(1, cfg.count("train.log_every"));
  train(model, optim, data, vocab, opts, start, [&](std::size_t step, const LossReport& r) {
    nlohmann::ordered_json j{{"step", step}, {"lr", opts.lr_at(step - 1)}};
    const auto losses = r.to_json();
    for (auto it = losses.begin(); it != losses.end(); ++it) j[it.key()] = it.value();
    log << j.dump() << '\n';
    if (step % log_every == 0 || step == opts.steps) out << j.dump() << '\n';
    if (every > 0 && step % every == 0 && step != opts.steps) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06zu.plvc", step);
      save_checkpoint((dir / "checkpoints" / name).string(), model, &optim);
    }
  });
  save_checkpoint((dir / "final.plvc").string(), model, &optim);
  err << "wrote " << (dir / "final.plvc").string() << '\n';
  return kExitOk;
}

inline EvalMetrics eval_metrics(const RunConfig& cfg, const std::string& checkpoint, const std::string& split) {
  cfg.check_paths();
  const Vocabulary vocab = cfg.vocabulary();
  const Model<float> model = load_model(cfg, vocab, checkpoint);
  return evaluate(model, load_split(cfg, split), vocab);
}

inline int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& split, std::ostream& out,
                    std::ostream& err) {
  const EvalMetrics m = eval_metrics(cfg, checkpoint, split);
  const auto dir = prepare_output(cfg, err);
  const std::string line = m.to_json().dump();
  std::ofstream(dir / ("metrics_" + split + ".json")) << line << '\n';
  out << line << '\n';
  return kExitOk;
}

inline Image load_input_image(const std::string& path, std::size_t size) {
  Image img = from_image8(read_image(path));
  if (img.channels == 1) {
    Image rgb(3, img.height, img.width);
    for (std::size_t ch = 0; ch < 3; ++ch)
      std::copy(img.data.begin(), img.data.end(), rgb.data.begin() + static_cast<long>(ch * img.data.size()));
    img = std::move(rgb);
  }
  return resize_bilinear(img, size, size);
}

inline int cmd_predict(const RunConfig& cfg, const std::string& checkpoint, const std::string& image_path,
                       const std::string& expression, std::ostream& out, std::ostream& err) {
  cfg.check_paths();
  const Vocabulary vocab = cfg.vocabulary();
  const Model<float> model = load_model(cfg, vocab, checkpoint);
  const Image image = load_input_image(image_path, model.config().image_size);
  const TokenIds tokens = tokenize(expression, vocab, model.config().max_tokens);
  if (tokens.empty()) throw ContractError("empty expression");
  std::size_t words = 0;
  for (bool b : tokens.mask) words += b ? 1 : 0;
  if (tokens.unknown == words)
    err << "warning: expression is entirely out of vocabulary; predicting from UNK tokens\n";
  else if (tokens.unknown > 0)
    err << "warning: " << tokens.unknown << " out-of-vocabulary word(s) mapped to UNK\n";
  const auto dir = prepare_output(cfg, err);
  const auto p = write_prediction(dir.string(), model, image, expression, vocab);
  out << prediction_json(p, expression, tokens.unknown).dump() << '\n';
  return kExitOk;
}

inline int cmd_gradcheck(const RunConfig& cfg, std::size_t seeds, double corrupt, std::ostream& out,
                         std::ostream& err) {
  if (seeds == 0) throw ConfigError("gradcheck: --seeds must be >= 1");
  const auto dir = prepare_output(cfg, err);
  GradcheckOptions opt;
  opt.corrupt_analytic = corrupt;
  const GradcheckSuiteResult r = run_gradcheck_suite(seeds, 0, opt);
  std::ofstream(dir / "gradcheck.json") << r.to_json().dump(2) << '\n';
  for (const auto& e : r.entries) {
    char line[256];
    std::snprintf(line, sizeof line, "%-34s %s  max_rel_err %.3e  (%zu elements, %zu seeds)\n", e.name.c_str(),
                  e.pass ? "pass" : "FAIL", e.max_rel_err, e.checked, e.seeds);
    out << line;
    if (!e.pass) out << "    worst: " << e.worst << (e.failure.empty() ? "" : "  " + e.failure) << '\n';
  }
  char summary[128];
  std::snprintf(summary, sizeof summary, "gradcheck %s: max_rel_err %.3e in %.1f s\n", r.pass ? "passed" : "FAILED",
                r.max_rel_err, r.seconds);
  out << summary;
  return r.pass ? kExitOk : kExitCheckFailed;
}

}  // namespace plvl
