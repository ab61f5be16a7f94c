#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "villa/autodiff.hpp"

namespace villa {

/// Builds a scalar loss on the given tape from leaf tensors bound to `inputs`.
using TensorFunction = std::function<Tensor(Tape&, std::span<const Tensor> inputs)>;

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  // Check at most this many entries per input (sampled without replacement);
  // all entries when unset.
  std::optional<std::size_t> max_entries_per_input;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::size_t input = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = true;
};

inline double guarded_rel_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

namespace detail {

inline double eval_scalar(const TensorFunction& fn, const std::vector<Array>& point) {
  Tape tape;
  std::vector<Tensor> leaves;
  leaves.reserve(point.size());
  for (const Array& p : point) leaves.push_back(tape.leaf(p, false));
  const Tensor out = fn(tape, leaves);
  const double v = out.value().item();
  if (!std::isfinite(v)) throw NumericDomainError("grad_check: non-finite function value");
  return v;
}

}  // namespace detail

/// Compares reverse-mode gradients with central differences
/// (f(x+h) - f(x-h)) / 2h, entry by entry.
inline GradCheckReport grad_check(const TensorFunction& fn, const std::vector<Array>& point,
                                  const GradCheckOptions& opts = {}) {
  if (!(opts.h > 0.0)) throw ContractError("grad_check: h must be positive");

  std::vector<Array> analytic;
  {
    Tape tape;
    std::vector<Tensor> leaves;
    for (const Array& p : point) leaves.push_back(tape.leaf(p, true));
    const Tensor out = fn(tape, leaves);
    if (out.value().size() != 1) throw ContractError("grad_check: function must return a scalar");
    if (!std::isfinite(out.value().item())) throw NumericDomainError("grad_check: non-finite function value");
    const Gradients grads = backward(tape, out);
    for (const Tensor& l : leaves) analytic.push_back(grads.of(l));
  }

  std::mt19937_64 rng(opts.seed);
  GradCheckReport report;
  std::vector<Array> probe = point;
  for (std::size_t k = 0; k < point.size(); ++k) {
    std::vector<std::size_t> idx(point[k].size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opts.max_entries_per_input && idx.size() > *opts.max_entries_per_input) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(*opts.max_entries_per_input);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) {
      const double x0 = point[k][i];
      probe[k][i] = x0 + opts.h;
      const double fp = detail::eval_scalar(fn, probe);
      probe[k][i] = x0 - opts.h;
      const double fm = detail::eval_scalar(fn, probe);
      probe[k][i] = x0;
      const double numeric = (fp - fm) / (2.0 * opts.h);
      const double a = analytic[k][i];
      const double err = guarded_rel_error(a, numeric);
      report.entries.push_back({k, i, a, numeric, err});
      report.max_rel_error = std::max(report.max_rel_error, err);
    }
  }
  report.passed = report.max_rel_error <= opts.tol;
  return report;
}

}  // namespace villa
