#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "plvl/model.hpp"

namespace plvl {

// Non-finite loss during training; carries the 1-based step.
class NumericError : public std::runtime_error {
 public:
  NumericError(std::size_t step, const std::string& what) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// Indexable stream of training samples. Synthetic data renders sample i
// from its own seed; a fixed dataset is visited in a per-epoch shuffle.
class SampleStream {
 public:
  static SampleStream synthetic(std::uint64_t seed, SynthOptions opts) {
    SampleStream s;
    s.fn_ = [seed, opts](std::size_t i) { return synthesize(sample_seed(seed, Split::train, i), opts).sample; };
    return s;
  }

  static SampleStream dataset(std::vector<GroundingSample> samples, std::uint64_t seed) {
    if (samples.empty()) throw ContractError("training dataset is empty");
    SampleStream s;
    auto data = std::make_shared<std::vector<GroundingSample>>(std::move(samples));
    s.fn_ = [data, seed](std::size_t i) {
      const std::size_t n = data->size(), epoch = i / n;
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::mt19937_64 rng(splitmix64(seed + epoch));
      std::shuffle(order.begin(), order.end(), rng);
      return (*data)[order[i % n]];
    };
    return s;
  }

  GroundingSample operator()(std::size_t i) const { return fn_(i); }

 private:
  std::function<GroundingSample(std::size_t)> fn_;
};

struct TrainOptions {
  std::size_t steps = 3000;
  std::size_t batch_size = 16;
  double lr = 2.5e-4;
  std::size_t warmup = 0;
  std::string schedule = "constant";  // or "cosine"
  double grad_clip = 0;               // global L2 norm; 0 disables
  LossWeights weights;

  void validate() const {
    if (batch_size == 0) throw ConfigError("optim.batch_size must be >= 1");
    if (!(lr > 0)) throw ConfigError("optim.lr must be positive");
    if (schedule != "constant" && schedule != "cosine") throw ConfigError("optim.schedule must be constant or cosine");
    if (grad_clip < 0) throw ConfigError("optim.grad_clip must be >= 0");
    weights.validate();
  }

  // Learning rate for 0-based step s.
  double lr_at(std::size_t s) const {
    double f = 1.0;
    if (warmup > 0 && s < warmup) f = static_cast<double>(s + 1) / static_cast<double>(warmup);
    if (schedule == "cosine" && steps > warmup && s >= warmup) {
      const double t = static_cast<double>(s - warmup) / static_cast<double>(steps - warmup);
      f *= 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
    }
    return lr * f;
  }
};

// One optimizer step over a minibatch; returns the batch-mean LossReport.
template <typename T>
LossReport train_step(Model<T>& model, AdamW<T>& optim, std::vector<NamedTensor<T>>& params, const SampleStream& data,
                      const Vocabulary& vocab, const TrainOptions& o, std::size_t step) {
  for (auto& p : params) p.tensor.zero_grad();
  LossReport sum;
  const T inv = T(1) / static_cast<T>(o.batch_size);
  for (std::size_t b = 0; b < o.batch_size; ++b) {
    const GroundingSample s = data(step * o.batch_size + b);
    const TokenIds tokens = tokenize(s.expression, vocab, model.config().max_tokens);
    Tape<T> tape;
    TapeScope<T> scope(tape);
    const auto out = model.forward(image_tensor<T>(s.image), tokens);
    const auto loss = grounding_loss(out, s.gt_box, s.gt_mask, o.weights, model.config().sigma_scale);
    const LossReport r = loss.report();
    if (!std::isfinite(r.total))
      throw NumericError(step + 1, "non-finite loss at step " + std::to_string(step + 1));
    sum += r;
    Tensor<T> scaled = scale(loss.total, inv);
    backward(scaled, tape);
  }
  if (o.grad_clip > 0) {
    double sq = 0;
    for (auto& p : params)
      if (p.tensor.has_grad())
        for (T g : p.tensor.grad()) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (norm > o.grad_clip) {
      const T f = static_cast<T>(o.grad_clip / norm);
      for (auto& p : params)
        if (p.tensor.has_grad())
          for (T& g : p.tensor.grad()) g *= f;
    }
  }
  optim.step(params, o.lr_at(step));
  return sum.scaled(1.0 / static_cast<double>(o.batch_size));
}

// Runs steps [start, o.steps). on_step receives the 1-based step number.
template <typename T>
void train(Model<T>& model, AdamW<T>& optim, const SampleStream& data, const Vocabulary& vocab, const TrainOptions& o,
           std::size_t start, const std::function<void(std::size_t, const LossReport&)>& on_step = {}) {
  o.validate();
  auto params = model.parameters();
  for (auto& p : params) p.tensor.set_requires_grad(true);
  for (std::size_t s = start; s < o.steps; ++s) {
    const LossReport r = train_step(model, optim, params, data, vocab, o, s);
    if (on_step) on_step(s + 1, r);
  }
}

struct EvalMetrics {
  double rec_acc = 0;
  double res_miou = 0;
  std::size_t n = 0;

  nlohmann::ordered_json to_json() const { return {{"rec_acc@0.5", rec_acc}, {"res_miou", res_miou}, {"n", n}}; }
};

// Deterministic evaluation; samples are scored in order.
template <typename T>
EvalMetrics evaluate(const Model<T>& model, const std::vector<GroundingSample>& samples, const Vocabulary& vocab) {
  if (samples.empty()) throw ContractError("evaluation split is empty");
  std::size_t hits = 0;
  std::vector<double> ious;
  ious.reserve(samples.size());
  for (const auto& s : samples) {
    const Prediction<T> p = model.predict(s.image, tokenize(s.expression, vocab, model.config().max_tokens));
    hits += metric_rec(p.box, s.gt_box).hit ? 1 : 0;
    ious.push_back(metric_res(p.mask, s.gt_mask));
  }
  EvalMetrics m;
  m.n = samples.size();
  m.rec_acc = static_cast<double>(hits) / static_cast<double>(m.n);
  m.res_miou = mean_iou(ious);
  return m;
}

}  // namespace plvl
