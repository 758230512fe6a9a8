#pragma once

// Eigen's coefficient-based small-product path peels by buffer address,
// which makes float results depend on where the allocator put the data.
// Packed GEMM and GEMV do not, so they are used for every size.
#ifndef EIGEN_GEMM_TO_COEFFBASED_THRESHOLD
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#endif
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "plvl/numerics/tape.hpp"
#include "plvl/numerics/tensor.hpp"

namespace plvl {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
void check_finite([[maybe_unused]] const Tensor<T>& t, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  assert(t.all_finite() && op);
#endif
}

// Output of an op: marked differentiable iff a tape is recording it.
template <typename T>
Tensor<T> make_output(Shape shape, Tape<T>* tape) {
  Tensor<T> out(std::move(shape));
  if (tape) out.set_requires_grad(true);
  return out;
}

template <typename T>
bool wants_grad(const std::shared_ptr<TensorNode<T>>& n) {
  return n->requires_grad;
}

// Stored (untransposed) matrix view: pointer plus row-major rows/cols.
template <typename T>
struct MatRef {
  T* p;
  Eigen::Index rows, cols;
};

// z += op(x) * op(y)
template <typename T>
void gemm_acc(MatRef<T> x, bool tx, MatRef<T> y, bool ty, MatRef<T> z) {
  using M = RowMat<T>;
  Eigen::Map<const M> X(x.p, x.rows, x.cols);
  Eigen::Map<const M> Y(y.p, y.rows, y.cols);
  Eigen::Map<M> Z(z.p, z.rows, z.cols);
  if (!tx && !ty)
    Z.noalias() += X * Y;
  else if (!tx && ty)
    Z.noalias() += X * Y.transpose();
  else if (tx && !ty)
    Z.noalias() += X.transpose() * Y;
  else
    Z.noalias() += X.transpose() * Y.transpose();
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix product

// op(a)[..,m,k] x op(b)[..,k,n]. Batch dims must match, or one operand is a
// plain matrix broadcast over the other's batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  if (a.rank() < 2 || b.rank() < 2)
    throw DimensionError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const std::size_t ar = as[as.size() - 2], ac = as.back();
  const std::size_t br = bs[bs.size() - 2], bc = bs.back();
  const std::size_t m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const std::size_t kb = trans_b ? bc : br, n = trans_b ? br : bc;
  if (k != kb)
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(as) + " and " + shape_str(bs));

  Shape a_batch(as.begin(), as.end() - 2), b_batch(bs.begin(), bs.end() - 2);
  Shape out_batch;
  if (a_batch == b_batch || b_batch.empty())
    out_batch = a_batch;
  else if (a_batch.empty())
    out_batch = b_batch;
  else
    throw DimensionError("matmul: batch dimensions not broadcastable for " + shape_str(as) + " and " +
                         shape_str(bs));
  const std::size_t batch = shape_numel(out_batch);
  const bool a_bcast = a_batch.empty() && !b_batch.empty();
  const bool b_bcast = b_batch.empty() && !a_batch.empty();

  Shape out_shape = out_batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  auto* tape = recording_tape<T>({&a, &b});
  Tensor<T> out = detail::make_output<T>(out_shape, tape);

  // A shared right operand and untransposed left operand fold into one GEMM.
  const bool fold = b_bcast && !trans_a;
  const std::size_t nb = fold ? 1 : batch;
  const std::size_t mm = fold ? batch * m : m;
  const std::size_t sa = a_bcast ? 0 : ar * ac, sb = b_bcast ? 0 : br * bc, so = mm * n;

  auto run = [=](T* pa, T* pb, T* po, T* ga, T* gb, bool forward) {
    const auto a_rows = static_cast<Eigen::Index>(fold ? mm : ar);
    for (std::size_t i = 0; i < nb; ++i) {
      detail::MatRef<T> A{pa + i * sa, a_rows, static_cast<Eigen::Index>(ac)};
      detail::MatRef<T> B{pb + i * sb, static_cast<Eigen::Index>(br), static_cast<Eigen::Index>(bc)};
      if (forward) {
        detail::MatRef<T> C{po + i * so, static_cast<Eigen::Index>(mm), static_cast<Eigen::Index>(n)};
        detail::gemm_acc(A, trans_a, B, trans_b, C);
        continue;
      }
      detail::MatRef<T> dC{po + i * so, static_cast<Eigen::Index>(mm), static_cast<Eigen::Index>(n)};
      if (ga) {
        detail::MatRef<T> dA{ga + i * sa, a_rows, static_cast<Eigen::Index>(ac)};
        if (!trans_a)
          detail::gemm_acc(dC, false, B, !trans_b, dA);
        else
          detail::gemm_acc(B, trans_b, dC, true, dA);
      }
      if (gb) {
        detail::MatRef<T> dB{gb + i * sb, static_cast<Eigen::Index>(br), static_cast<Eigen::Index>(bc)};
        if (!trans_b)
          detail::gemm_acc(A, !trans_a, dC, false, dB);
        else
          detail::gemm_acc(dC, true, A, trans_a, dB);
      }
    }
  };
  run(const_cast<T*>(a.data().data()), const_cast<T*>(b.data().data()), out.data().data(), nullptr, nullptr,
      true);
  detail::check_finite(out, "matmul");

  if (tape) {
    tape->record([an = a.node(), bn = b.node(), on = out.node(), run] {
      if (on->grad.empty()) return;
      T* ga = nullptr;
      T* gb = nullptr;
      if (an->requires_grad) {
        an->ensure_grad();
        ga = an->grad.data();
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        gb = bn->grad.data();
      }
      run(an->value.data(), bn->value.data(), on->grad.data(), ga, gb, false);
    });
  }
  return out;
}

// x[..,k] * w[k,n] + b[n]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// ---------------------------------------------------------------------------
// Elementwise binary ops (identical shapes)

namespace detail {

template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, Da da, Db db) {
  require_same_shape(a.shape(), b.shape(), name);
  auto* tape = recording_tape<T>({&a, &b});
  Tensor<T> out = make_output<T>(a.shape(), tape);
  const auto av = a.data();
  const auto bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i], bv[i]);
  check_finite(out, name);
  if (tape) {
    tape->record([an = a.node(), bn = b.node(), on = out.node(), da, db] {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * da(an->value[i], bn->value[i]);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * db(an->value[i], bn->value[i]);
      }
    });
  }
  return out;
}

// Unary op whose derivative is expressed through input x and output y.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary_op(const Tensor<T>& x, const char* name, Fwd fwd, Deriv deriv) {
  auto* tape = recording_tape<T>({&x});
  Tensor<T> out = make_output<T>(x.shape(), tape);
  const auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(xv[i]);
  check_finite(out, name);
  if (tape) {
    tape->record([xn = x.node(), on = out.node(), deriv] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        xn->grad[i] += on->grad[i] * deriv(xn->value[i], on->value[i]);
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

// Ties route the gradient to the first operand.
template <typename T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      a, b, "minimum", [](T x, T y) { return x <= y ? x : y; }, [](T x, T y) { return T(x <= y); },
      [](T x, T y) { return T(!(x <= y)); });
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      a, b, "maximum", [](T x, T y) { return x >= y ? x : y; }, [](T x, T y) { return T(x >= y); },
      [](T x, T y) { return T(!(x >= y)); });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) {
  return div(a, b);
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail::unary_op<T>(x, "scale", [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary_op<T>(x, "add_scalar", [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op<T>(
      x, "sigmoid", [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary_op<T>(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary_op<T>(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary_op<T>(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return T(v > T(0)); });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary_op<T>(
      x, "abs", [](T v) { return std::abs(v); }, [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary_op<T>(x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// Exact (erf) form.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return detail::unary_op<T>(
      x, "gelu", [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  auto* tape = recording_tape<T>({&x});
  Tensor<T> out = detail::make_output<T>(Shape{1}, tape);
  T acc = T(0);
  for (T v : x.data()) acc += v;
  out[0] = acc;
  if (tape) {
    tape->record([xn = x.node(), on = out.node()] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      const T g = on->grad[0];
      for (auto& v : xn->grad) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Broadcast helpers

// x[..,n] + b[n]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  const std::size_t n = b.numel();
  if (x.shape().back() != n)
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not fit " + shape_str(x.shape()));
  auto* tape = recording_tape<T>({&x, &b});
  Tensor<T> out = detail::make_output<T>(x.shape(), tape);
  const auto xv = x.data();
  const auto bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] + bv[i % n];
  if (tape) {
    tape->record([xn = x.node(), bn = b.node(), on = out.node(), n] {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i % n] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(matmul(x, w), b);
}

// Large negative finite logit for masked attention positions; any finite
// score plus this rounds back to it, so masked contents never leak through.
template <typename T>
constexpr T masked_logit() {
  return -std::numeric_limits<T>::max() / T(4);
}

// x + mask, where mask is a constant whose shape is a suffix of x's shape.
template <typename T>
Tensor<T> add_constant(const Tensor<T>& x, const Tensor<T>& mask) {
  const Shape& xs = x.shape();
  const Shape& ms = mask.shape();
  if (ms.size() > xs.size() || !std::equal(ms.rbegin(), ms.rend(), xs.rbegin()))
    throw DimensionError("add_constant: " + shape_str(ms) + " is not a suffix of " + shape_str(xs));
  const std::size_t n = mask.numel();
  auto* tape = recording_tape<T>({&x});
  Tensor<T> out = detail::make_output<T>(xs, tape);
  const auto xv = x.data();
  const auto mv = mask.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] + mv[i % n];
  if (tape) {
    tape->record([xn = x.node(), on = out.node()] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax and normalization

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank())
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  const Shape& s = x.shape();
  const std::size_t len = s[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t outer = x.numel() / (len * inner);

  auto* tape = recording_tape<T>({&x});
  Tensor<T> out = detail::make_output<T>(s, tape);
  const T* xv = x.data().data();
  T* ov = out.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = xv[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      T z = T(0);
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        ov[base + j * inner] = e;
        z += e;
      }
      const T inv = T(1) / z;
      for (std::size_t j = 0; j < len; ++j) ov[base + j * inner] *= inv;
    }
  }
  detail::check_finite(out, "softmax");
  if (tape) {
    tape->record([xn = x.node(), on = out.node(), outer, inner, len] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      const T* y = on->value.data();
      const T* g = on->grad.data();
      T* gx = xn->grad.data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          T dot = T(0);
          for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t k = base + j * inner;
            gx[k] += y[k] * (g[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

// Per-vector standardization over the last axis (population variance), then
// gamma * xhat + beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layer_norm: affine params do not match " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / d;
  auto* tape = recording_tape<T>({&x, &gamma, &beta});
  Tensor<T> out = detail::make_output<T>(x.shape(), tape);
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  const T* xv = x.data().data();
  const T* gv = gamma.data().data();
  const T* bv = beta.data().data();
  T* ov = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mu) * is;
      xhat[r * d + j] = h;
      ov[r * d + j] = gv[j] * h + bv[j];
    }
  }
  detail::check_finite(out, "layer_norm");
  if (tape) {
    tape->record([xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node(), xhat = std::move(xhat),
                  inv_std = std::move(inv_std), rows, d] {
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (std::size_t i = 0; i < rows * d; ++i) gn->grad[i % d] += g[i] * xhat[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < rows * d; ++i) bn->grad[i % d] += g[i];
      }
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const T* gam = gn->value.data();
      std::vector<T> dh(d);
      for (std::size_t r = 0; r < rows; ++r) {
        T mean_dh = T(0), mean_dh_h = T(0);
        for (std::size_t j = 0; j < d; ++j) {
          dh[j] = g[r * d + j] * gam[j];
          mean_dh += dh[j];
          mean_dh_h += dh[j] * xhat[r * d + j];
        }
        mean_dh /= static_cast<T>(d);
        mean_dh_h /= static_cast<T>(d);
        for (std::size_t j = 0; j < d; ++j)
          xn->grad[r * d + j] += inv_std[r] * (dh[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Data movement. Every rearrangement below is a gather through an index map,
// so they share one differentiable kernel.

template <typename T>
Tensor<T> gather_elements(const Tensor<T>& x, Shape out_shape, std::vector<std::size_t> src) {
  if (shape_numel(out_shape) != src.size())
    throw DimensionError("gather: index map does not match output shape " + shape_str(out_shape));
  auto* tape = recording_tape<T>({&x});
  Tensor<T> out = detail::make_output<T>(std::move(out_shape), tape);
  const auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i] >= xv.size()) throw DimensionError("gather: index out of range");
    ov[i] = xv[src[i]];
  }
  if (tape) {
    tape->record([xn = x.node(), on = out.node(), src = std::move(src)] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < src.size(); ++i) xn->grad[src[i]] += on->grad[i];
    });
  }
  return out;
}

// Reinterprets the element order under a new shape (copying, no views).
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto* tape = recording_tape<T>({&x});
  Tensor<T> out = detail::make_output<T>(std::move(shape), tape);
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  if (tape) {
    tape->record([xn = x.node(), on = out.node()] {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& s = x.shape();
  if (perm.size() != s.size()) throw DimensionError("permute: rank mismatch for " + shape_str(s));
  std::vector<bool> seen(s.size(), false);
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= s.size() || seen[perm[i]]) throw DimensionError("permute: invalid axis order");
    seen[perm[i]] = true;
    out_shape[i] = s[perm[i]];
  }
  std::vector<std::size_t> in_stride(s.size(), 1);
  for (std::size_t i = s.size() - 1; i > 0; --i) in_stride[i - 1] = in_stride[i] * s[i];
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> idx(s.size(), 0);
  for (std::size_t o = 0; o < src.size(); ++o) {
    std::size_t off = 0;
    for (std::size_t a = 0; a < s.size(); ++a) off += idx[a] * in_stride[perm[a]];
    src[o] = off;
    for (std::size_t a = s.size(); a-- > 0;) {
      if (++idx[a] < out_shape[a]) break;
      idx[a] = 0;
    }
  }
  return gather_elements(x, std::move(out_shape), std::move(src));
}

// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("transpose: rank < 2");
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm);
}

// Flat element picks; result shape [k].
template <typename T>
Tensor<T> take(const Tensor<T>& x, std::vector<std::size_t> flat_indices) {
  Shape s{flat_indices.size()};
  return gather_elements(x, std::move(s), std::move(flat_indices));
}

// Row lookup in a [R, D] table; result [ids.size(), D]. Embedding lookup.
template <typename T>
Tensor<T> take_rows(const Tensor<T>& table, const std::vector<std::size_t>& rows) {
  if (table.rank() != 2) throw DimensionError("take_rows: table must be rank 2, got " + shape_str(table.shape()));
  const std::size_t d = table.dim(1);
  std::vector<std::size_t> src;
  src.reserve(rows.size() * d);
  for (auto r : rows) {
    if (r >= table.dim(0)) throw DimensionError("take_rows: row " + std::to_string(r) + " out of range");
    for (std::size_t j = 0; j < d; ++j) src.push_back(r * d + j);
  }
  return gather_elements(table, Shape{rows.size(), d}, std::move(src));
}

// Channels [begin, end) of the last axis.
template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t d = x.shape().back();
  if (begin >= end || end > d) throw DimensionError("slice_last: bad range for " + shape_str(x.shape()));
  const std::size_t w = end - begin, rows = x.numel() / d;
  std::vector<std::size_t> src;
  src.reserve(rows * w);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = begin; j < end; ++j) src.push_back(r * d + j);
  Shape s = x.shape();
  s.back() = w;
  return gather_elements(x, std::move(s), std::move(src));
}

// Splits an [H, W, D] grid into its four spatial quadrants stacked as
// [4, (H/2)*(W/2), D], order: top-left, top-right, bottom-left, bottom-right.
template <typename T>
Tensor<T> quadrant_split(const Tensor<T>& grid) {
  if (grid.rank() != 3) throw DimensionError("quadrant_split: expected [H,W,D], got " + shape_str(grid.shape()));
  const std::size_t h = grid.dim(0), w = grid.dim(1), d = grid.dim(2);
  if (h % 2 || w % 2)
    throw ConfigError("quadrant_split: grid " + std::to_string(h) + "x" + std::to_string(w) + " is not even");
  const std::size_t hq = h / 2, wq = w / 2;
  std::vector<std::size_t> src;
  src.reserve(grid.numel());
  for (std::size_t q = 0; q < 4; ++q) {
    const std::size_t r0 = (q / 2) * hq, c0 = (q % 2) * wq;
    for (std::size_t i = 0; i < hq; ++i)
      for (std::size_t j = 0; j < wq; ++j)
        for (std::size_t k = 0; k < d; ++k) src.push_back(((r0 + i) * w + c0 + j) * d + k);
  }
  return gather_elements(grid, Shape{4, hq * wq, d}, std::move(src));
}

// Inverse of quadrant_split.
template <typename T>
Tensor<T> quadrant_merge(const Tensor<T>& parts, std::size_t h, std::size_t w) {
  if (parts.rank() != 3 || parts.dim(0) != 4 || h % 2 || w % 2 || parts.dim(1) != (h / 2) * (w / 2))
    throw DimensionError("quadrant_merge: " + shape_str(parts.shape()) + " does not tile " + std::to_string(h) +
                         "x" + std::to_string(w));
  const std::size_t hq = h / 2, wq = w / 2, d = parts.dim(2);
  std::vector<std::size_t> src(parts.numel());
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t q = (r / hq) * 2 + c / wq;
      const std::size_t t = (r % hq) * wq + c % wq;
      for (std::size_t k = 0; k < d; ++k) src[(r * w + c) * d + k] = (q * hq * wq + t) * d + k;
    }
  return gather_elements(parts, Shape{h, w, d}, std::move(src));
}

// [C*r*r, H, W] -> [C, H*r, W*r]; output (c, i, j) reads channel
// c*r*r + (i mod r)*r + (j mod r) at (i/r, j/r).
template <typename T>
Tensor<T> depth_to_space(const Tensor<T>& x, std::size_t r) {
  if (x.rank() != 3 || r == 0 || x.dim(0) % (r * r))
    throw DimensionError("depth_to_space: " + shape_str(x.shape()) + " with block " + std::to_string(r));
  const std::size_t c = x.dim(0) / (r * r), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = h * r, ow = w * r;
  std::vector<std::size_t> src(x.numel());
  for (std::size_t cc = 0; cc < c; ++cc)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t ch = cc * r * r + (i % r) * r + (j % r);
        src[(cc * oh + i) * ow + j] = (ch * h + i / r) * w + j / r;
      }
  return gather_elements(x, Shape{c, oh, ow}, std::move(src));
}

// Inverse of depth_to_space.
template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& x, std::size_t r) {
  if (x.rank() != 3 || r == 0 || x.dim(1) % r || x.dim(2) % r)
    throw DimensionError("space_to_depth: " + shape_str(x.shape()) + " with block " + std::to_string(r));
  const std::size_t c = x.dim(0), oh = x.dim(1), ow = x.dim(2);
  const std::size_t h = oh / r, w = ow / r;
  std::vector<std::size_t> src(x.numel());
  for (std::size_t cc = 0; cc < c; ++cc)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t ch = cc * r * r + (i % r) * r + (j % r);
        src[(ch * h + i / r) * w + j / r] = (cc * oh + i) * ow + j;
      }
  return gather_elements(x, Shape{c * r * r, h, w}, std::move(src));
}

// Non-overlapping p x p patches of a [C, H, W] image, flattened per patch in
// (channel, row, col) order; result [(H/p)*(W/p), C*p*p], patches row-major.
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& image, std::size_t p) {
  if (image.rank() != 3) throw DimensionError("extract_patches: expected [C,H,W], got " + shape_str(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (p == 0 || h % p || w % p)
    throw ConfigError("extract_patches: H=" + std::to_string(h) + " W=" + std::to_string(w) +
                      " not divisible by P=" + std::to_string(p));
  const std::size_t gh = h / p, gw = w / p;
  std::vector<std::size_t> src;
  src.reserve(image.numel());
  for (std::size_t gi = 0; gi < gh; ++gi)
    for (std::size_t gj = 0; gj < gw; ++gj)
      for (std::size_t cc = 0; cc < c; ++cc)
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < p; ++j) src.push_back((cc * h + gi * p + i) * w + gj * p + j);
  return gather_elements(image, Shape{gh * gw, c * p * p}, std::move(src));
}

// Concatenates along the last axis.
template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
  Shape as = a.shape(), bs = b.shape();
  if (as.size() != bs.size() || !std::equal(as.begin(), as.end() - 1, bs.begin()))
    throw DimensionError("concat_last: " + shape_str(as) + " vs " + shape_str(bs));
  const std::size_t da = as.back(), db = bs.back(), rows = a.numel() / da;
  Shape os = as;
  os.back() = da + db;
  auto* tape = recording_tape<T>({&a, &b});
  Tensor<T> out = detail::make_output<T>(os, tape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().begin() + r * da, da, out.data().begin() + r * (da + db));
    std::copy_n(b.data().begin() + r * db, db, out.data().begin() + r * (da + db) + da);
  }
  if (tape) {
    tape->record([an = a.node(), bn = b.node(), on = out.node(), da, db, rows] {
      if (on->grad.empty()) return;
      if (an->requires_grad) an->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* g = on->grad.data() + r * (da + db);
        if (an->requires_grad)
          for (std::size_t j = 0; j < da; ++j) an->grad[r * da + j] += g[j];
        if (bn->requires_grad)
          for (std::size_t j = 0; j < db; ++j) bn->grad[r * db + j] += g[da + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

// Same-size 2-D cross-correlation: x[Cin,H,W], w[Cout,Cin,k,k], b[Cout],
// zero padding (k-1)/2, odd k.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1)
    throw DimensionError("conv2d: expected x[C,H,W], w[O,C,k,k], b[O]; got " + shape_str(x.shape()) + ", " +
                         shape_str(w.shape()) + ", " + shape_str(b.shape()));
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin)
    throw DimensionError("conv2d: channel mismatch, input " + shape_str(x.shape()) + " kernel " + shape_str(w.shape()));
  if (w.dim(3) != k || k % 2 == 0) throw DimensionError("conv2d: kernel must be square with odd size");
  if (b.dim(0) != cout) throw DimensionError("conv2d: bias does not match output channels");
  const std::size_t pad = (k - 1) / 2, hw = h * wd, ck = cin * k * k;

  // col[(c*k + ki)*k + kj, i*W + j] = x[c, i+ki-pad, j+kj-pad]; -1 marks zero padding.
  std::vector<std::ptrdiff_t> col_src(ck * hw);
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const std::size_t row = (c * k + ki) * k + kj;
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < wd; ++j) {
            const auto si = static_cast<std::ptrdiff_t>(i + ki) - static_cast<std::ptrdiff_t>(pad);
            const auto sj = static_cast<std::ptrdiff_t>(j + kj) - static_cast<std::ptrdiff_t>(pad);
            const bool inside = si >= 0 && sj >= 0 && si < static_cast<std::ptrdiff_t>(h) &&
                                sj < static_cast<std::ptrdiff_t>(wd);
            col_src[row * hw + i * wd + j] =
                inside ? static_cast<std::ptrdiff_t>((c * h + static_cast<std::size_t>(si)) * wd +
                                                     static_cast<std::size_t>(sj))
                       : -1;
          }
      }
  std::vector<T> cols(ck * hw);
  const auto xv = x.data();
  for (std::size_t i = 0; i < cols.size(); ++i) cols[i] = col_src[i] < 0 ? T(0) : xv[static_cast<std::size_t>(col_src[i])];

  auto* tape = recording_tape<T>({&x, &w, &b});
  Tensor<T> out = detail::make_output<T>(Shape{cout, h, wd}, tape);
  {
    using M = detail::RowMat<T>;
    Eigen::Map<const M> W(w.data().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(ck));
    Eigen::Map<const M> C(cols.data(), static_cast<Eigen::Index>(ck), static_cast<Eigen::Index>(hw));
    Eigen::Map<M> O(out.data().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(hw));
    O.noalias() = W * C;
    for (std::size_t o = 0; o < cout; ++o) O.row(static_cast<Eigen::Index>(o)).array() += b[o];
  }
  detail::check_finite(out, "conv2d");

  if (tape) {
    tape->record([xn = x.node(), wn = w.node(), bn = b.node(), on = out.node(), cols = std::move(cols),
                  col_src = std::move(col_src), cout, ck, hw] {
      if (on->grad.empty()) return;
      using M = detail::RowMat<T>;
      Eigen::Map<const M> G(on->grad.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(hw));
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t o = 0; o < cout; ++o) {
          T acc = 0;
          for (std::size_t k = 0; k < hw; ++k) acc += on->grad[o * hw + k];
          bn->grad[o] += acc;
        }
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        Eigen::Map<const M> C(cols.data(), static_cast<Eigen::Index>(ck), static_cast<Eigen::Index>(hw));
        Eigen::Map<M> GW(wn->grad.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(ck));
        GW.noalias() += G * C.transpose();
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        Eigen::Map<const M> W(wn->value.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(ck));
        M dcols = W.transpose() * G;
        const T* dc = dcols.data();
        for (std::size_t i = 0; i < col_src.size(); ++i)
          if (col_src[i] >= 0) xn->grad[static_cast<std::size_t>(col_src[i])] += dc[i];
      }
    });
  }
  return out;
}

}  // namespace plvl
