#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace plvl {

using Shape = std::vector<std::size_t>;

// Error taxonomy shared by every module.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

// Dense row-major tensor handle. Copies alias the same node, which is what
// lets the tape route gradients back to parameters.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<TensorNode<T>>()) {
    for (auto d : shape)
      if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_str(shape));
    node_->value.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<TensorNode<T>>()) {
    if (shape_numel(shape) != data.size())
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " elements");
    node_->shape = std::move(shape);
    node_->value = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  static Tensor parameter(Shape shape, std::vector<T> data) {
    Tensor t(std::move(shape), std::move(data));
    t.set_requires_grad(true);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  T& operator[](std::size_t i) { return node_->value[i]; }
  const T& operator[](std::size_t i) const { return node_->value[i]; }

  T at(std::initializer_list<std::size_t> idx) const { return node_->value[offset(idx)]; }
  T& at(std::initializer_list<std::size_t> idx) { return node_->value[offset(idx)]; }

  // Deep copy detached from any tape.
  Tensor clone() const { return Tensor(shape(), values()); }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape(), std::vector<U>(values().begin(), values().end()));
  }

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

  bool all_finite() const {
    for (const T v : node_->value)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw DimensionError("index rank mismatch for " + shape_str(shape()));
    std::size_t off = 0, k = 0;
    for (auto i : idx) {
      if (i >= node_->shape[k]) throw DimensionError("index out of range for " + shape_str(shape()));
      off = off * node_->shape[k++] + i;
    }
    return off;
  }

  std::shared_ptr<TensorNode<T>> node_;
};

}  // namespace plvl
