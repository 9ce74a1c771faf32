#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "comalign/error.hpp"
#include "comalign/numerics/tape.hpp"
#include "comalign/numerics/tensor.hpp"

namespace comalign::num {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_entry = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

using ValueFn = std::function<double(const std::vector<Tensor>&)>;
using GraphFn = std::function<Var(Tape&, std::span<const Var>)>;

// Compares analytic gradients against central differences, entry by entry:
// |a - n| / max(1e-12, |a| + |n|), maximized over every parameter entry.
inline GradCheckResult finite_diff_check(const ValueFn& f, std::vector<Tensor> params,
                                         const std::vector<Tensor>& analytic, double eps) {
  if (!(eps > 0.0)) throw ConfigError("finite_diff_check: eps must be positive");
  if (analytic.size() != params.size()) throw DimensionError("finite_diff_check: gradient count");
  GradCheckResult res;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (analytic[p].size() != params[p].size())
      throw DimensionError("finite_diff_check: gradient shape");
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double orig = params[p][i];
      params[p][i] = orig + eps;
      const double fp = f(params);
      params[p][i] = orig - eps;
      const double fm = f(params);
      params[p][i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericalError("finite_diff_check: non-finite value at a perturbed point");
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[p][i];
      const double err = std::abs(a - numeric) / std::max(1e-12, std::abs(a) + std::abs(numeric));
      if (err > res.max_rel_err) res = {err, p, i, a, numeric};
    }
  }
  return res;
}

// Convenience form: the graph is built on a fresh tape for every evaluation and
// the analytic gradient comes from Tape::backward.
inline GradCheckResult finite_diff_check(const GraphFn& graph, const std::vector<Tensor>& params,
                                         double eps) {
  auto value = [&](const std::vector<Tensor>& ps) {
    Tape t;
    std::vector<Var> vars;
    vars.reserve(ps.size());
    for (const auto& p : ps) vars.push_back(t.parameter(p));
    return t.value(graph(t, vars))[0];
  };
  Tape t;
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(t.parameter(p));
  t.backward(graph(t, vars));
  std::vector<Tensor> analytic;
  for (Var v : vars) analytic.push_back(t.grad(v));
  return finite_diff_check(value, params, analytic, eps);
}

}  // namespace comalign::num
