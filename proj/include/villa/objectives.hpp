#pragma once

// Loss functions: clean cross-entropy, masked-LM loss, symmetric KL, and the
// per-modality adversarial branch objective.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "villa/adversary.hpp"
#include "villa/autodiff.hpp"
#include "villa/model.hpp"

namespace villa {

/// Loss decomposition of the training objective:
/// total = l_std + r_at + kl_weight * r_kl.
struct LossBreakdown {
  double l_std = 0.0;
  double r_at = 0.0;
  double r_kl = 0.0;
  double kl_weight = 0.0;
  double total = 0.0;

  void recompute_total() { total = l_std + r_at + kl_weight * r_kl; }
};

/// Mean of -log softmax(logits)[label] over non-ignored rows. logits is N x C.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels,
                            std::optional<int> ignore_index = std::nullopt) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(s) + " for " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t c = s[1];
  std::size_t counted = 0;
  for (int y : labels) {
    if (ignore_index && y == *ignore_index) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ContractError("cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(c) + ")");
    }
    ++counted;
  }
  if (counted == 0) throw ContractError("cross_entropy: every entry ignored (empty mean)");
  Array weights(s);
  const double w = -1.0 / static_cast<double>(counted);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (ignore_index && labels[i] == *ignore_index) continue;
    weights[i * c + static_cast<std::size_t>(labels[i])] = w;
  }
  Tape& tape = *logits.tape();
  return reduce_sum(multiply(log_softmax(logits), tape.constant(std::move(weights))));
}

/// Cross-entropy over positions whose target is not -1. logits is B x T x V,
/// targets is B x T row-major.
inline Tensor masked_lm_loss(const Tensor& logits, std::span<const int> targets) {
  const Shape& s = logits.shape();
  if (s.size() != 3 || s[0] * s[1] != targets.size()) {
    throw DimensionError("masked_lm_loss: logits " + shape_str(s) + " for " + std::to_string(targets.size()) +
                         " targets");
  }
  bool any = false;
  for (int y : targets) any = any || y >= 0;
  if (!any) throw ContractError("masked_lm_loss: no masked positions");
  return cross_entropy(reshape(logits, {s[0] * s[1], s[2]}), targets, -1);
}

/// Mean over rows of KL(p||q) + KL(q||p), p and q the softmax of each row.
/// Equal to sum((p - q) * (log p - log q)) / N, evaluated with log-softmax.
inline Tensor sym_kl(const Tensor& p_logits, const Tensor& q_logits) {
  if (p_logits.shape() != q_logits.shape()) {
    throw DimensionError("sym_kl: incompatible shapes " + shape_str(p_logits.shape()) + " and " +
                         shape_str(q_logits.shape()));
  }
  const std::size_t rows = p_logits.value().size() / p_logits.shape().back();
  const Tensor dp = sub(softmax(p_logits), softmax(q_logits));
  const Tensor dl = sub(log_softmax(p_logits), log_softmax(q_logits));
  return scale(reduce_sum(multiply(dp, dl)), 1.0 / static_cast<double>(rows));
}

/// Clean task loss of a forward output against its own targets.
inline Tensor task_loss(const ModelOutput& out) {
  if (out.targets.empty()) throw ContractError("task_loss: batch carries no labels for task " + std::string(to_string(out.task)));
  return cross_entropy(out.task_logits, out.targets);
}

enum class KlTargetGrad { stop, flow };

struct BranchLoss {
  ModelOutput output;
  Tensor ce;                 // L(f(x + delta), y)
  std::optional<Tensor> kl;  // L_kl(f(x + delta), y~); absent when KL is disabled
  // ce + kl_weight * kl. Used both for the parameter gradient and, through
  // its delta-gradient, for the ascent direction.
  Tensor objective;
};

/// Perturbed forward for one modality plus its adversarial losses.
/// `clean_logits` are the unperturbed logits from the same tape; with
/// KlTargetGrad::stop they enter the KL term as a constant.
inline BranchLoss adversarial_branch_loss(Tape& tape, const ParamTensors& params, const ModelConfig& config,
                                          const MultimodalBatch& batch, Task task, Modality branch,
                                          Modality enabled, const Tensor& delta, const Tensor& clean_logits,
                                          double kl_weight, bool include_kl,
                                          KlTargetGrad target_grad = KlTargetGrad::stop) {
  DeltaInputs inputs;
  switch (branch) {
    case Modality::img:
      if (!perturbs_image(enabled)) throw ContractError("adversarial_branch_loss: image branch disabled");
      inputs.img = delta;
      break;
    case Modality::txt:
      if (!perturbs_text(enabled)) throw ContractError("adversarial_branch_loss: text branch disabled");
      inputs.txt = delta;
      break;
    case Modality::both:
      throw ContractError("adversarial_branch_loss: a branch perturbs exactly one modality");
  }
  BranchLoss out{forward(tape, params, config, batch, task, inputs), {}, {}, {}};
  out.ce = task_loss(out.output);
  out.objective = out.ce;
  if (include_kl) {
    const Tensor target = target_grad == KlTargetGrad::stop ? tape.constant(clean_logits.value()) : clean_logits;
    out.kl = sym_kl(out.output.task_logits, target);
    if (kl_weight != 0.0) out.objective = add(out.ce, scale(*out.kl, kl_weight));
  }
  return out;
}

}  // namespace villa
