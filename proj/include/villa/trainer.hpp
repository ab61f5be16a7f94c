#pragma once

// Training engine: standard ERM steps, FreeLB/VILLA "free" adversarial steps
// (K ascent iterations whose parameter gradients are averaged into a single
// update), evaluation, and the pretrain -> finetune pipeline.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "villa/adversary.hpp"
#include "villa/checkpoint.hpp"
#include "villa/metrics.hpp"
#include "villa/model.hpp"
#include "villa/objectives.hpp"
#include "villa/optimizer.hpp"
#include "villa/synth.hpp"

namespace villa {

enum class TrainMode { standard, freelb, villa };
enum class Stage { pretrain, finetune, both };

inline std::string_view to_string(TrainMode m) {
  switch (m) {
    case TrainMode::standard: return "standard";
    case TrainMode::freelb: return "freelb";
    case TrainMode::villa: return "villa";
  }
  return "?";
}

inline TrainMode parse_mode(std::string_view s) {
  if (s == "standard") return TrainMode::standard;
  if (s == "freelb") return TrainMode::freelb;
  if (s == "villa") return TrainMode::villa;
  throw ContractError("unknown mode '" + std::string(s) + "'");
}

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::pretrain: return "pretrain";
    case Stage::finetune: return "finetune";
    case Stage::both: return "both";
  }
  return "?";
}

inline Stage parse_stage(std::string_view s) {
  if (s == "pretrain") return Stage::pretrain;
  if (s == "finetune") return Stage::finetune;
  if (s == "both") return Stage::both;
  throw ContractError("unknown stage '" + std::string(s) + "'");
}

inline std::string_view to_string(KlTargetGrad g) { return g == KlTargetGrad::stop ? "stop" : "flow"; }

inline KlTargetGrad parse_kl_target_grad(std::string_view s) {
  if (s == "stop") return KlTargetGrad::stop;
  if (s == "flow") return KlTargetGrad::flow;
  throw ContractError("unknown kl-target-grad '" + std::string(s) + "'");
}

class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t iteration, const std::string& what)
      : Error("diverged at adversarial iteration " + std::to_string(iteration) + ": " + what), iteration_(iteration) {}
  std::size_t iteration() const { return iteration_; }

 private:
  std::size_t iteration_;
};

struct TrainConfig {
  TrainMode mode = TrainMode::villa;
  std::optional<TrainMode> finetune_mode;  // stage-2 mode; defaults to `mode`
  std::size_t adv_steps = 3;
  double epsilon = 0.5;
  double adv_step_size = 1e-2;
  double kl_weight = 1.0;
  Modality modality_mode = Modality::both;
  KlTargetGrad kl_target_grad = KlTargetGrad::stop;
  bool simultaneous = false;  // one forward perturbing both modalities at once
  OptimizerSettings optimizer;
  std::size_t epochs = 2;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  Stage stage = Stage::both;
  std::size_t pretrain_samples = 256;  // per epoch
  std::size_t finetune_samples = 256;
  std::size_t val_samples = 256;
  std::size_t pretrain_val_samples = 128;  // per pre-training task
  std::size_t num_concepts = 16;
  double noise_sigma = 0.1;
  bool record_timing = false;
  ModelConfig model;

  TrainMode mode_for(Stage s) const { return s == Stage::finetune && finetune_mode ? *finetune_mode : mode; }

  void validate() const {
    model.validate();
    if (adv_steps < 1) throw ContractError("adv_steps must be >= 1");
    if (!(epsilon >= 0.0)) throw ContractError("epsilon must be >= 0");
    if (!(adv_step_size >= 0.0)) throw ContractError("adv_step_size must be >= 0");
    if (!(kl_weight >= 0.0)) throw ContractError("kl_weight must be >= 0");
    if (!(optimizer.learning_rate >= 0.0)) throw ContractError("learning rate must be >= 0");
    if (epochs < 1 || batch_size < 2) throw ContractError("epochs must be >= 1 and batch_size >= 2");
    if (pretrain_samples < batch_size || finetune_samples < 2 || val_samples < 1 || pretrain_val_samples < 2) {
      throw ContractError("dataset sizes too small for the batch size");
    }
  }

  /// Stable serialization of every field that influences a run.
  std::string canonical() const {
    std::ostringstream os;
    os.precision(17);
    os << "mode=" << to_string(mode) << ";finetune_mode=" << to_string(mode_for(Stage::finetune))
       << ";adv_steps=" << adv_steps << ";epsilon=" << epsilon << ";adv_lr=" << adv_step_size
       << ";alpha=" << kl_weight << ";modality=" << to_string(modality_mode)
       << ";kl_target_grad=" << to_string(kl_target_grad) << ";simultaneous=" << simultaneous
       << ";optimizer=" << to_string(optimizer.kind) << ";lr=" << optimizer.learning_rate
       << ";beta1=" << optimizer.beta1 << ";beta2=" << optimizer.beta2 << ";adam_eps=" << optimizer.eps
       << ";epochs=" << epochs << ";batch_size=" << batch_size << ";seed=" << seed
       << ";stage=" << to_string(stage) << ";pretrain_samples=" << pretrain_samples
       << ";finetune_samples=" << finetune_samples << ";val_samples=" << val_samples
       << ";pretrain_val_samples=" << pretrain_val_samples
       << ";num_concepts=" << num_concepts << ";noise_sigma=" << noise_sigma << ";" << model.canonical();
    return os.str();
  }
};

/// Per-parameter gradient buffers, zeroed at the start of every minibatch.
struct GradAccumulator {
  ParamArrays grads;

  explicit GradAccumulator(const ParamArrays& like) : grads(zeros_like(like)) {}

  void add_scaled(const ParamArrays& g, double factor) {
    zip_params(grads, g, [&](const std::string&, Array& acc, const Array& src) {
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += factor * src[i];
    });
  }

  double norm() const {
    double sq = 0.0;
    for_each_param(grads, [&](const std::string&, const Array& a) {
      for (double v : a.data()) sq += v * v;
    });
    return std::sqrt(sq);
  }
};

struct StepResult {
  LossBreakdown loss;  // averaged over the K iterations
  double accuracy = 0.0;
  double delta_norm_img = 0.0;  // mean per-sample norm of the final deltas
  double delta_norm_txt = 0.0;
  double grad_norm = 0.0;  // norm of the applied gradient g_K
  std::size_t optimizer_updates = 0;
};

/// Optional instrumentation of an adversarial step.
struct StepTrace {
  std::vector<ParamArrays> iteration_grads;  // theta-gradient of iteration t (unscaled)
  std::vector<Array> delta_img;              // delta used in iteration t
  std::vector<Array> delta_txt;
  std::vector<LossBreakdown> iteration_loss;
  ParamArrays applied;  // g_K handed to the optimizer
};

namespace detail {

inline ParamArrays collect_grads(const Gradients& g, const ParamTensors& bound, const ParamArrays& like) {
  ParamArrays out = like;
  zip_params(out, bound, [&](const std::string&, Array& dst, const Tensor& t) { dst = g.of(t); });
  return out;
}

inline double accuracy_of(const Array& logits, const std::vector<int>& targets) {
  if (targets.empty()) return 0.0;
  const std::size_t c = logits.shape().back();
  std::size_t hit = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const double* row = logits.data().data() + r * c;
    const auto best = static_cast<int>(std::max_element(row, row + c) - row);
    hit += best == targets[r];
  }
  return static_cast<double>(hit) / static_cast<double>(targets.size());
}

inline double mean_sample_norm(const Array& delta) {
  if (delta.empty()) return 0.0;
  const auto norms = frobenius_norm_per_sample(delta);
  double s = 0.0;
  for (double n : norms) s += n;
  return s / static_cast<double>(norms.size());
}

inline void require_finite_loss(double v, std::size_t iteration) {
  if (!std::isfinite(v)) throw DivergenceError(iteration, "non-finite loss");
}

}  // namespace detail

/// One ERM step: forward, backward on L_std, one optimizer update.
inline StepResult standard_train_step(ModelParams& params, OptimizerState& opt, const MultimodalBatch& batch, Task task,
                                      const TrainConfig& config) {
  StepResult res;
  ParamArrays grads;
  {
    Tape tape;
    const ParamTensors bound = bind(tape, params.tensors, true);
    ModelOutput out;
    Tensor loss;
    try {
      out = forward(tape, bound, params.config, batch, task);
      loss = task_loss(out);
    } catch (const NumericDomainError& e) {
      throw DivergenceError(1, e.what());
    }
    detail::require_finite_loss(loss.value().item(), 1);
    grads = detail::collect_grads(backward(tape, loss), bound, params.tensors);
    res.loss.l_std = loss.value().item();
    res.accuracy = detail::accuracy_of(out.task_logits.value(), out.targets);
  }
  res.loss.recompute_total();
  GradAccumulator acc(params.tensors);
  acc.add_scaled(grads, 1.0);
  res.grad_norm = acc.norm();
  apply_update(params, acc.grads, opt, config.optimizer);
  res.optimizer_updates = 1;
  return res;
}

/// Free multi-step adversarial training on one minibatch (mode villa or
/// freelb). Deltas start at a random point inside the ball; each of the K
/// iterations runs the clean forward (L_std, y~) plus one perturbed forward
/// per active modality, adds (1/K) of the parameter gradient of
/// L_std + sum_m [L_m + kl_weight * Lkl_m] to the accumulator, and moves each
/// delta by a normalized ascent step. A single optimizer update follows.
inline StepResult villa_train_step(ModelParams& params, OptimizerState& opt, const MultimodalBatch& batch, Task task,
                                   const TrainConfig& config, std::mt19937_64& rng, TrainMode mode,
                                   StepTrace* trace = nullptr) {
  if (mode == TrainMode::standard) throw ContractError("villa_train_step: mode must be villa or freelb");
  batch.validate(params.config);
  const bool use_kl = mode == TrainMode::villa;
  const double kl_weight = use_kl ? config.kl_weight : 0.0;
  const std::size_t k_steps = config.adv_steps;
  const bool do_img = perturbs_image(config.modality_mode);
  const bool do_txt = perturbs_text(config.modality_mode);
  const std::size_t b = batch.batch_size;

  Array delta_img = do_img ? init_delta({b, batch.num_regions, params.config.region_feat_dim}, config.epsilon, rng,
                                        &batch.region_mask)
                           : Array({b, batch.num_regions, params.config.region_feat_dim});
  Array delta_txt = do_txt ? init_delta({b, batch.num_tokens, params.config.hidden}, config.epsilon, rng, &batch.txt_mask)
                           : Array({b, batch.num_tokens, params.config.hidden});

  GradAccumulator acc(params.tensors);
  StepResult res;
  res.loss.kl_weight = kl_weight;
  const double inv_k = 1.0 / static_cast<double>(k_steps);

  for (std::size_t t = 1; t <= k_steps; ++t) {
    if (trace) {
      trace->delta_img.push_back(delta_img);
      trace->delta_txt.push_back(delta_txt);
    }
    LossBreakdown it;
    it.kl_weight = kl_weight;
    Tape tape;
    const ParamTensors bound = bind(tape, params.tensors, true);
    std::optional<Tensor> img_leaf;
    std::optional<Tensor> txt_leaf;
    Tensor objective;
    ModelOutput clean;
    double accuracy = 0.0;
    try {
      clean = forward(tape, bound, params.config, batch, task);
      const Tensor l_std = task_loss(clean);
      accuracy = detail::accuracy_of(clean.task_logits.value(), clean.targets);
      it.l_std = l_std.value().item();
      objective = l_std;

      auto add_terms = [&](const Tensor& ce, const std::optional<Tensor>& kl, const Tensor& branch_objective) {
        it.r_at += ce.value().item();
        if (kl) it.r_kl += kl->value().item();
        objective = add(objective, branch_objective);
      };

      if (config.simultaneous && do_img && do_txt) {
        img_leaf = tape.leaf(delta_img, true);
        txt_leaf = tape.leaf(delta_txt, true);
        const ModelOutput pert = forward(tape, bound, params.config, batch, task, DeltaInputs{img_leaf, txt_leaf});
        const Tensor ce = task_loss(pert);
        std::optional<Tensor> kl;
        Tensor branch_objective = ce;
        if (use_kl) {
          const Tensor target = config.kl_target_grad == KlTargetGrad::stop ? tape.constant(clean.task_logits.value())
                                                                            : clean.task_logits;
          kl = sym_kl(pert.task_logits, target);
          if (kl_weight != 0.0) branch_objective = add(ce, scale(*kl, kl_weight));
        }
        add_terms(ce, kl, branch_objective);
      } else {
        for (Modality branch : {Modality::img, Modality::txt}) {
          const bool active = branch == Modality::img ? do_img : do_txt;
          if (!active) continue;
          std::optional<Tensor>& leaf = branch == Modality::img ? img_leaf : txt_leaf;
          leaf = tape.leaf(branch == Modality::img ? delta_img : delta_txt, true);
          const BranchLoss bl = adversarial_branch_loss(tape, bound, params.config, batch, task, branch,
                                                        config.modality_mode, *leaf, clean.task_logits, kl_weight,
                                                        use_kl, config.kl_target_grad);
          add_terms(bl.ce, bl.kl, bl.objective);
        }
      }
    } catch (const NumericDomainError& e) {
      throw DivergenceError(t, e.what());
    }
    it.recompute_total();
    detail::require_finite_loss(objective.value().item(), t);

    const Gradients grads = backward(tape, objective);
    const ParamArrays theta_grad = detail::collect_grads(grads, bound, params.tensors);
    acc.add_scaled(theta_grad, inv_k);
    if (trace) {
      trace->iteration_grads.push_back(theta_grad);
      trace->iteration_loss.push_back(it);
    }

    try {
      if (img_leaf) delta_img = ascent_step(delta_img, grads.of(*img_leaf), config.adv_step_size, config.epsilon, &batch.region_mask);
      if (txt_leaf) delta_txt = ascent_step(delta_txt, grads.of(*txt_leaf), config.adv_step_size, config.epsilon, &batch.txt_mask);
    } catch (const NumericDomainError& e) {
      throw DivergenceError(t, e.what());
    }

    res.loss.l_std += inv_k * it.l_std;
    res.loss.r_at += inv_k * it.r_at;
    res.loss.r_kl += inv_k * it.r_kl;
    res.accuracy += inv_k * accuracy;
  }
  res.loss.recompute_total();
  res.delta_norm_img = detail::mean_sample_norm(delta_img);
  res.delta_norm_txt = detail::mean_sample_norm(delta_txt);
  res.grad_norm = acc.norm();
  if (trace) trace->applied = acc.grads;
  apply_update(params, acc.grads, opt, config.optimizer);
  res.optimizer_updates = 1;
  return res;
}

/// Dispatch on mode.
inline StepResult train_step(ModelParams& params, OptimizerState& opt, const MultimodalBatch& batch, Task task,
                             const TrainConfig& config, std::mt19937_64& rng, TrainMode mode) {
  if (mode == TrainMode::standard) return standard_train_step(params, opt, batch, task, config);
  return villa_train_step(params, opt, batch, task, config, rng, mode);
}

struct EvalMetrics {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::size_t count = 0;  // number of predictions scored
};

/// Accuracy of argmax(logits) and mean cross-entropy over every labelled
/// prediction in `dataset` (masked positions for mlm). Parameters are not
/// touched.
inline EvalMetrics evaluate(const ModelParams& params, std::span<const MultimodalBatch> dataset, Task task) {
  if (dataset.empty()) throw ContractError("evaluate: empty dataset");
  EvalMetrics m;
  double loss_sum = 0.0;
  double hits = 0.0;
  for (const MultimodalBatch& batch : dataset) {
    Tape tape;
    const ParamTensors bound = bind(tape, params.tensors, false);
    const ModelOutput out = forward(tape, bound, params.config, batch, task);
    if (out.targets.empty()) throw ContractError("evaluate: batch without labels");
    const double n = static_cast<double>(out.targets.size());
    loss_sum += n * task_loss(out).value().item();
    hits += n * detail::accuracy_of(out.task_logits.value(), out.targets);
    m.count += out.targets.size();
  }
  m.accuracy = hits / static_cast<double>(m.count);
  m.mean_loss = loss_sum / static_cast<double>(m.count);
  return m;
}

// ---------------------------------------------------------------------------
// Stage orchestration
// ---------------------------------------------------------------------------

namespace streams {
inline constexpr std::uint64_t kPretrainData = 101;
inline constexpr std::uint64_t kPretrainVal = 102;
inline constexpr std::uint64_t kFinetuneTrain = 201;
inline constexpr std::uint64_t kFinetuneVal = 202;
inline constexpr std::uint64_t kShuffle = 203;
inline constexpr std::uint64_t kAdversary = 301;
inline constexpr std::uint64_t kInit = 401;
inline constexpr std::uint64_t kHeads = 402;
}  // namespace streams

using LogFn = std::function<void(const std::string&)>;

struct StageContext {
  const TrainConfig& config;
  const WorldSpec& world;
  std::vector<MetricsRecord>& history;
  LogFn log;
};

namespace detail {

inline MetricsRecord make_record(std::string_view stage, std::size_t epoch, std::size_t step, std::string_view split,
                                 Task task, const StepResult& r, double wall_ms) {
  MetricsRecord rec;
  rec.stage = stage;
  rec.epoch = epoch;
  rec.step = step;
  rec.split = split;
  rec.task = to_string(task);
  rec.l_std = r.loss.l_std;
  rec.r_at = r.loss.r_at;
  rec.r_kl = r.loss.r_kl;
  rec.total = r.loss.total;
  rec.accuracy = r.accuracy;
  rec.delta_norm_img = r.delta_norm_img;
  rec.delta_norm_txt = r.delta_norm_txt;
  rec.grad_norm = r.grad_norm;
  rec.wall_ms = wall_ms;
  return rec;
}

inline MetricsRecord eval_record(std::string_view stage, std::size_t epoch, std::size_t step, std::string_view split,
                                 Task task, const EvalMetrics& m) {
  StepResult r;
  r.loss.l_std = m.mean_loss;
  r.loss.recompute_total();
  r.accuracy = m.accuracy;
  return make_record(stage, epoch, step, split, task, r, 0.0);
}

template <class F>
double timed_ms(bool enabled, F&& f) {
  if (!enabled) {
    f();
    return 0.0;
  }
  const auto t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

inline std::vector<MultimodalBatch> pretrain_val_batches(const TrainConfig& c, const WorldSpec& w, Task task) {
  std::vector<MultimodalBatch> out;
  for (std::size_t done = 0, i = 0; done < c.pretrain_val_samples; done += c.batch_size, ++i) {
    const std::size_t n = std::min(c.batch_size, c.pretrain_val_samples - done);
    std::mt19937_64 rng = counter_rng(c.seed, streams::kPretrainVal, 2 * i + (task == Task::itm ? 1 : 0));
    out.push_back(gen_pretrain_batch(w, std::max<std::size_t>(n, 2), task, rng));
  }
  return out;
}

/// Task-agnostic pre-training: MLM and ITM minibatches alternate round-robin,
/// fresh data every step.
inline void run_pretrain(ModelParams& params, StageContext& ctx) {
  const TrainConfig& c = ctx.config;
  const TrainMode mode = c.mode_for(Stage::pretrain);
  OptimizerState opt;
  const std::size_t steps_per_epoch = c.pretrain_samples / c.batch_size;
  const auto val_mlm = pretrain_val_batches(c, ctx.world, Task::mlm);
  const auto val_itm = pretrain_val_batches(c, ctx.world, Task::itm);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      const Task task = step % 2 == 0 ? Task::mlm : Task::itm;
      std::mt19937_64 data_rng = counter_rng(c.seed, streams::kPretrainData, step);
      const MultimodalBatch batch = gen_pretrain_batch(ctx.world, c.batch_size, task, data_rng);
      std::mt19937_64 adv_rng = counter_rng(c.seed, streams::kAdversary, step);
      StepResult r;
      const double ms = detail::timed_ms(c.record_timing, [&] { r = train_step(params, opt, batch, task, c, adv_rng, mode); });
      ctx.history.push_back(detail::make_record("pretrain", epoch, step, "train", task, r, ms));
    }
    const EvalMetrics em = evaluate(params, val_mlm, Task::mlm);
    const EvalMetrics ei = evaluate(params, val_itm, Task::itm);
    ctx.history.push_back(detail::eval_record("pretrain", epoch, step, "val", Task::mlm, em));
    ctx.history.push_back(detail::eval_record("pretrain", epoch, step + 1, "val", Task::itm, ei));
    if (ctx.log) {
      std::ostringstream os;
      os << "pretrain epoch " << epoch << " mode=" << to_string(mode) << " val mlm_acc=" << em.accuracy
         << " itm_acc=" << ei.accuracy;
      ctx.log(os.str());
    }
  }
}

struct FinetuneData {
  std::vector<Sample> train;
  std::vector<MultimodalBatch> train_eval;
  std::vector<MultimodalBatch> val;
};

inline FinetuneData make_finetune_data(const TrainConfig& c, const WorldSpec& w) {
  FinetuneData d;
  d.train = make_downstream_dataset(w, c.finetune_samples, streams::kFinetuneTrain);
  d.train_eval = make_batches(d.train, w, c.batch_size);
  const auto val = make_downstream_dataset(w, c.val_samples, streams::kFinetuneVal);
  d.val = make_batches(val, w, c.batch_size);
  return d;
}

struct FinetuneSummary {
  EvalMetrics train;
  EvalMetrics val;
};

/// Downstream answer-classification training on a fixed train split,
/// reshuffled every epoch; train and val accuracy are logged per epoch.
inline FinetuneSummary run_finetune(ModelParams& params, StageContext& ctx, const FinetuneData& data) {
  const TrainConfig& c = ctx.config;
  const TrainMode mode = c.mode_for(Stage::finetune);
  OptimizerState opt;
  FinetuneSummary summary;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng = counter_rng(c.seed, streams::kShuffle, epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const auto batches = make_batches(data.train, ctx.world, c.batch_size, order);
    for (const MultimodalBatch& batch : batches) {
      std::mt19937_64 adv_rng = counter_rng(c.seed, streams::kAdversary + 1000, step);
      StepResult r;
      const double ms =
          detail::timed_ms(c.record_timing, [&] { r = train_step(params, opt, batch, Task::answer, c, adv_rng, mode); });
      ctx.history.push_back(detail::make_record("finetune", epoch, step, "train", Task::answer, r, ms));
      ++step;
    }
    summary.train = evaluate(params, data.train_eval, Task::answer);
    summary.val = evaluate(params, data.val, Task::answer);
    ctx.history.push_back(detail::eval_record("finetune", epoch, step, "train_eval", Task::answer, summary.train));
    ctx.history.push_back(detail::eval_record("finetune", epoch, step + 1, "val", Task::answer, summary.val));
    if (ctx.log) {
      std::ostringstream os;
      os << "finetune epoch " << epoch << " mode=" << to_string(mode) << " train_acc=" << summary.train.accuracy
         << " val_acc=" << summary.val.accuracy;
      ctx.log(os.str());
    }
  }
  return summary;
}

inline WorldSpec make_world(const TrainConfig& c) { return make_world(c.seed, c.num_concepts, c.noise_sigma, c.model); }

struct TwoStageResult {
  ModelParams pretrained;
  ModelParams finetuned;
  std::uint64_t pretrain_final_encoder = 0;
  std::uint64_t finetune_initial_encoder = 0;
  FinetuneSummary finetune;
  std::vector<MetricsRecord> history;
};

/// Pre-train on MLM+ITM, hand the encoder over through a checkpoint
/// (written under `run_dir` when given), re-initialize heads, finetune.
inline TwoStageResult run_two_stage(const TrainConfig& config, const WorldSpec& world,
                                    const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                                    LogFn log = {}) {
  if (config.stage != Stage::both) throw ContractError("run_two_stage: stage must be both");
  config.validate();
  TwoStageResult res{init_params(config.model, counter_rng(config.seed, streams::kInit, 0)()), {}, 0, 0, {}, {}};
  StageContext ctx{config, world, res.history, std::move(log)};

  run_pretrain(res.pretrained, ctx);
  res.pretrain_final_encoder = encoder_checksum(res.pretrained);

  Checkpoint ck = make_checkpoint(res.pretrained);
  if (run_dir) {
    save_checkpoint(res.pretrained, *run_dir / "pretrain.ckpt");
    ck = read_checkpoint(*run_dir / "pretrain.ckpt");
  } else {
    ck = decode_checkpoint(encode_checkpoint(ck));
  }
  res.finetuned = init_params(config.model, counter_rng(config.seed, streams::kInit, 0)());
  reinit_heads(res.finetuned, counter_rng(config.seed, streams::kHeads, 0)());
  load_encoder(res.finetuned, ck);
  res.finetune_initial_encoder = encoder_checksum(res.finetuned);

  const FinetuneData data = make_finetune_data(config, world);
  res.finetune = run_finetune(res.finetuned, ctx, data);
  if (run_dir) save_checkpoint(res.finetuned, *run_dir / "finetune.ckpt");
  return res;
}

}  // namespace villa
