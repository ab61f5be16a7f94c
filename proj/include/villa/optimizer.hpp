#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include "villa/model.hpp"

namespace villa {

enum class OptimizerKind { sgd, adam };

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ContractError("unknown optimizer '" + std::string(s) + "'");
}

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  std::optional<ParamArrays> first_moment;
  std::optional<ParamArrays> second_moment;
  std::size_t step = 0;
};

/// One update theta <- optimizer(theta, grads).
inline void apply_update(ModelParams& params, const ParamArrays& grads, OptimizerState& state,
                         const OptimizerSettings& s) {
  ++state.step;
  const double lr = s.learning_rate;
  if (s.kind == OptimizerKind::sgd) {
    zip_params(params.tensors, grads, [&](const std::string&, Array& w, const Array& g) {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
    });
    return;
  }
  if (!state.first_moment) {
    state.first_moment = zeros_like(params.tensors);
    state.second_moment = zeros_like(params.tensors);
  }
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  std::vector<Array*> ms, vs;
  for_each_param(*state.first_moment, [&](const std::string&, Array& a) { ms.push_back(&a); });
  for_each_param(*state.second_moment, [&](const std::string&, Array& a) { vs.push_back(&a); });
  std::size_t k = 0;
  zip_params(params.tensors, grads, [&](const std::string&, Array& w, const Array& g) {
    Array& m = *ms[k];
    Array& v = *vs[k];
    ++k;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + s.eps);
    }
  });
}

}  // namespace villa
