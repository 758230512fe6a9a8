#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "plvl/numerics/tape.hpp"
#include "plvl/numerics/tensor.hpp"

namespace plvl {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

struct GradcheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::size_t checked = 0;
  std::string worst;  // "<param>[<flat index>]" of the largest error
  double worst_analytic = 0.0, worst_numeric = 0.0;
  std::string failure;  // non-empty when a numeric gradient was not finite
};

struct GradcheckOptions {
  double h = 1e-4;
  double tol = 1e-4;
  // Test hook: added to every analytic gradient element before comparison.
  double corrupt_analytic = 0.0;
};

inline double gradcheck_rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

// Compares reverse-mode gradients of a scalar function against central
// differences, element by element. `loss` must rebuild its graph from the
// current parameter values on every call.
inline GradcheckReport check_gradients(const std::function<Tensor<double>()>& loss,
                                       std::vector<NamedTensor<double>> params, GradcheckOptions opt = {}) {
  GradcheckReport rep;
  for (auto& p : params) {
    p.tensor.set_requires_grad(true);
    p.tensor.zero_grad();
  }
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> l = loss();
    backward(l, tape);
  }
  for (auto& p : params) {
    auto& vals = p.tensor.values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double analytic = (p.tensor.has_grad() ? p.tensor.grad()[i] : 0.0) + opt.corrupt_analytic;
      const double saved = vals[i];
      vals[i] = saved + opt.h;
      const double up = loss().item();
      vals[i] = saved - opt.h;
      const double down = loss().item();
      vals[i] = saved;
      const double numeric = (up - down) / (2.0 * opt.h);
      ++rep.checked;
      const std::string where = p.name + "[" + std::to_string(i) + "]";
      if (!std::isfinite(numeric)) {
        rep.failure = "non-finite numeric gradient at " + where;
        rep.max_rel_err = std::numeric_limits<double>::infinity();
        rep.worst = where;
        rep.pass = false;
        return rep;
      }
      const double err = gradcheck_rel_err(analytic, numeric);
      if (err > rep.max_rel_err || rep.worst.empty()) {
        rep.max_rel_err = err;
        rep.worst = where;
        rep.worst_analytic = analytic;
        rep.worst_numeric = numeric;
      }
    }
  }
  for (auto& p : params) p.tensor.zero_grad();
  rep.pass = rep.max_rel_err <= opt.tol;
  return rep;
}

}  // namespace plvl
