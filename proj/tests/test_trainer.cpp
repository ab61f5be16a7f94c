#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "test_util.hpp"
#include "villa/trainer.hpp"

using namespace villa;
using villa::testing::task_batch;
using villa::testing::tiny_config;

namespace {

struct Fixture {
  ModelConfig config = tiny_config();
  WorldSpec world = make_world(3, 4, 0.1, config);
  ModelParams params = init_params(config, 11, 0.3);
};

double max_param_diff(const ParamArrays& a, const ParamArrays& b) {
  double worst = 0.0;
  zip_params(a, b, [&](const std::string&, const Array& x, const Array& y) { worst = std::max(worst, max_abs_diff(x, y)); });
  return worst;
}

bool params_bitwise_equal(const ParamArrays& a, const ParamArrays& b) {
  bool same = true;
  zip_params(a, b, [&](const std::string&, const Array& x, const Array& y) { same = same && x == y; });
  return same;
}

// Clean-loss parameter gradient straight from the tape.
ParamArrays clean_grad(const ModelParams& p, const MultimodalBatch& batch, Task task) {
  Tape tape;
  const ParamTensors bound = bind(tape, p.tensors, true);
  const Tensor loss = task_loss(forward(tape, bound, p.config, batch, task));
  const Gradients g = backward(tape, loss);
  ParamArrays out = p.tensors;
  zip_params(out, bound, [&](const std::string&, Array& dst, const Tensor& t) { dst = g.of(t); });
  return out;
}

TrainConfig adversarial_config(std::size_t k, double eps) {
  TrainConfig c;
  c.model = tiny_config();
  c.adv_steps = k;
  c.epsilon = eps;
  c.adv_step_size = 0.05;
  c.optimizer.kind = OptimizerKind::sgd;
  c.optimizer.learning_rate = 0.0;
  return c;
}

}  // namespace

TEST(DegenerateEpsilon, AccumulatedGradientIsThreeTimesCleanGradient) {
  Fixture f;
  for (Task task : {Task::answer, Task::itm, Task::mlm}) {
    const MultimodalBatch batch = task_batch(f.world, 5, task, 17);
    ParamArrays expected = clean_grad(f.params, batch, task);
    for_each_param(expected, [](const std::string&, Array& a) { a *= 3.0; });
    for (std::size_t k : {1u, 2u, 3u}) {
      for (KlTargetGrad kg : {KlTargetGrad::stop, KlTargetGrad::flow}) {
        TrainConfig c = adversarial_config(k, 0.0);
        c.kl_target_grad = kg;
        ModelParams p = f.params;
        OptimizerState opt;
        std::mt19937_64 rng(5);
        StepTrace trace;
        villa_train_step(p, opt, batch, task, c, rng, TrainMode::villa, &trace);
        EXPECT_LE(max_param_diff(trace.applied, expected), 1e-10) << to_string(task) << " K=" << k;
      }
    }
  }
}

TEST(DegenerateEpsilon, SimultaneousBranchGivesTwiceCleanGradient) {
  Fixture f;
  const MultimodalBatch batch = task_batch(f.world, 4, Task::answer, 3);
  ParamArrays expected = clean_grad(f.params, batch, Task::answer);
  for_each_param(expected, [](const std::string&, Array& a) { a *= 2.0; });
  TrainConfig c = adversarial_config(2, 0.0);
  c.simultaneous = true;
  ModelParams p = f.params;
  OptimizerState opt;
  std::mt19937_64 rng(1);
  StepTrace trace;
  villa_train_step(p, opt, batch, Task::answer, c, rng, TrainMode::villa, &trace);
  EXPECT_LE(max_param_diff(trace.applied, expected), 1e-10);
}

TEST(ModeEquivalence, VillaWithoutKlMatchesFreeLbBitwise) {
  Fixture f;
  TrainConfig c = adversarial_config(3, 0.3);
  c.kl_weight = 0.0;
  c.optimizer.kind = OptimizerKind::adam;
  c.optimizer.learning_rate = 1e-2;
  ModelParams a = f.params;
  ModelParams b = f.params;
  OptimizerState oa;
  OptimizerState ob;
  for (std::size_t step = 0; step < 50; ++step) {
    const Task task = step % 3 == 0 ? Task::answer : step % 3 == 1 ? Task::itm : Task::mlm;
    const MultimodalBatch batch = task_batch(f.world, 4, task, 100 + step);
    std::mt19937_64 ra(step);
    std::mt19937_64 rb(step);
    const StepResult sa = villa_train_step(a, oa, batch, task, c, ra, TrainMode::villa);
    const StepResult sb = villa_train_step(b, ob, batch, task, c, rb, TrainMode::freelb);
    ASSERT_TRUE(params_bitwise_equal(a.tensors, b.tensors)) << "step " << step;
    EXPECT_EQ(sa.loss.r_at, sb.loss.r_at);
    EXPECT_EQ(sb.loss.r_kl, 0.0);
  }
}

TEST(FreeAccumulation, AppliedGradientIsMeanOfIterationGradients) {
  Fixture f;
  const MultimodalBatch batch = task_batch(f.world, 4, Task::answer, 9);
  for (std::size_t k = 1; k <= 5; ++k) {
    for (TrainMode mode : {TrainMode::villa, TrainMode::freelb}) {
      TrainConfig c = adversarial_config(k, 0.5);
      c.optimizer.kind = OptimizerKind::adam;
      c.optimizer.learning_rate = 1e-3;
      ModelParams p = f.params;
      OptimizerState opt;
      std::mt19937_64 rng(k);
      StepTrace trace;
      const StepResult r = villa_train_step(p, opt, batch, Task::answer, c, rng, mode, &trace);
      ASSERT_EQ(trace.iteration_grads.size(), k);
      ParamArrays mean = zeros_like(f.params.tensors);
      for (const ParamArrays& g : trace.iteration_grads) {
        zip_params(mean, g, [&](const std::string&, Array& m, const Array& x) {
          for (std::size_t i = 0; i < m.size(); ++i) m[i] += x[i];
        });
      }
      for_each_param(mean, [&](const std::string&, Array& a) { a *= 1.0 / static_cast<double>(k); });
      EXPECT_LE(max_param_diff(trace.applied, mean), 1e-12) << "K=" << k;
      EXPECT_EQ(r.optimizer_updates, 1u);
      EXPECT_EQ(opt.step, 1u);
    }
  }
}

TEST(FreeAccumulation, SgdUpdateUsesAppliedGradient) {
  Fixture f;
  const MultimodalBatch batch = task_batch(f.world, 4, Task::itm, 2);
  TrainConfig c = adversarial_config(3, 0.4);
  c.optimizer.learning_rate = 0.1;
  ModelParams p = f.params;
  OptimizerState opt;
  std::mt19937_64 rng(3);
  StepTrace trace;
  villa_train_step(p, opt, batch, Task::itm, c, rng, TrainMode::villa, &trace);
  ParamArrays expected = f.params.tensors;
  zip_params(expected, trace.applied, [](const std::string&, Array& w, const Array& g) {
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 0.1 * g[i];
  });
  EXPECT_TRUE(params_bitwise_equal(p.tensors, expected));
}

TEST(FreeAccumulation, SingleStepMatchesHandBuiltObjective) {
  Fixture f;
  const MultimodalBatch batch = task_batch(f.world, 4, Task::answer, 21);
  TrainConfig c = adversarial_config(1, 0.5);
  c.kl_weight = 1.7;
  ModelParams p = f.params;
  OptimizerState opt;
  std::mt19937_64 rng(8);
  StepTrace trace;
  villa_train_step(p, opt, batch, Task::answer, c, rng, TrainMode::villa, &trace);

  // Rebuild L_std + sum over modalities of [CE + 1.7 * symKL] with the traced deltas.
  Tape tape;
  const ParamTensors bound = bind(tape, f.params.tensors, true);
  const ModelOutput clean = forward(tape, bound, f.config, batch, Task::answer);
  const Tensor target = tape.constant(clean.task_logits.value());
  Tensor total = task_loss(clean);
  const ModelOutput img = forward(tape, bound, f.config, batch, Task::answer,
                                  DeltaInputs{tape.constant(trace.delta_img[0]), std::nullopt});
  const ModelOutput txt = forward(tape, bound, f.config, batch, Task::answer,
                                  DeltaInputs{std::nullopt, tape.constant(trace.delta_txt[0])});
  for (const ModelOutput* o : {&img, &txt}) {
    total = add(total, add(task_loss(*o), scale(sym_kl(o->task_logits, target), 1.7)));
  }
  const Gradients g = backward(tape, total);
  ParamArrays expected = f.params.tensors;
  zip_params(expected, bound, [&](const std::string&, Array& dst, const Tensor& t) { dst = g.of(t); });
  EXPECT_LE(max_param_diff(trace.applied, expected), 1e-12);
  EXPECT_NEAR(trace.iteration_loss[0].total, total.value().item(), 1e-12);
}

TEST(Deltas, StayInBallAndPaddedPositionsStayZero) {
  Fixture f;
  const MultimodalBatch batch = task_batch(f.world, 6, Task::mlm, 31);
  ASSERT_TRUE(villa::testing::has_padding(batch));
  TrainConfig c = adversarial_config(6, 0.2);
  c.adv_step_size = 0.5;
  ModelParams p = f.params;
  OptimizerState opt;
  std::mt19937_64 rng(4);
  StepTrace trace;
  villa_train_step(p, opt, batch, Task::mlm, c, rng, TrainMode::villa, &trace);
  for (std::size_t t = 0; t < trace.delta_img.size(); ++t) {
    for (const auto& [delta, mask] : {std::pair{&trace.delta_img[t], &batch.region_mask},
                                      std::pair{&trace.delta_txt[t], &batch.txt_mask}}) {
      for (double n : frobenius_norm_per_sample(*delta)) EXPECT_LE(n, 0.2 + 1e-9);
      const std::size_t width = delta->shape().back();
      for (std::size_t i = 0; i < mask->size(); ++i) {
        if ((*mask)[i] != 0.0) continue;
        for (std::size_t k = 0; k < width; ++k) EXPECT_EQ((*delta)[i * width + k], 0.0);
      }
    }
  }
  // Later iterations move away from the random start.
  EXPECT_GT(max_abs_diff(trace.delta_img.back(), trace.delta_img.front()), 0.0);
}

TEST(Deltas, FirstDeltaIsTheRandomInitialization) {
  Fixture f;
  const MultimodalBatch batch = task_batch(f.world, 3, Task::answer, 5);
  TrainConfig c = adversarial_config(2, 0.3);
  ModelParams p = f.params;
  OptimizerState opt;
  std::mt19937_64 rng(77);
  StepTrace trace;
  villa_train_step(p, opt, batch, Task::answer, c, rng, TrainMode::villa, &trace);
  std::mt19937_64 replay(77);
  const Array img = init_delta(trace.delta_img[0].shape(), 0.3, replay, &batch.region_mask);
  const Array txt = init_delta(trace.delta_txt[0].shape(), 0.3, replay, &batch.txt_mask);
  EXPECT_TRUE(img == trace.delta_img[0]);
  EXPECT_TRUE(txt == trace.delta_txt[0]);
}

TEST(Modality, SingleModalityLeavesTheOtherDeltaZero) {
  Fixture f;
  const MultimodalBatch batch = task_batch(f.world, 4, Task::answer, 6);
  for (Modality m : {Modality::txt, Modality::img}) {
    TrainConfig c = adversarial_config(3, 0.5);
    c.modality_mode = m;
    ModelParams p = f.params;
    OptimizerState opt;
    std::mt19937_64 rng(2);
    StepTrace trace;
    const StepResult r = villa_train_step(p, opt, batch, Task::answer, c, rng, TrainMode::villa, &trace);
    const std::vector<Array>& off = m == Modality::txt ? trace.delta_img : trace.delta_txt;
    for (const Array& d : off) {
      for (double v : d.data()) EXPECT_EQ(v, 0.0);
    }
    EXPECT_EQ(m == Modality::txt ? r.delta_norm_img : r.delta_norm_txt, 0.0);
    EXPECT_GT(m == Modality::txt ? r.delta_norm_txt : r.delta_norm_img, 0.0);
  }
}

TEST(Optimizer, ZeroLearningRateLeavesParametersUnchanged) {
  Fixture f;
  const MultimodalBatch batch = task_batch(f.world, 4, Task::itm, 4);
  for (OptimizerKind kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    for (TrainMode mode : {TrainMode::standard, TrainMode::freelb, TrainMode::villa}) {
      TrainConfig c = adversarial_config(2, 0.5);
      c.optimizer.kind = kind;
      ModelParams p = f.params;
      OptimizerState opt;
      std::mt19937_64 rng(1);
      train_step(p, opt, batch, Task::itm, c, rng, mode);
      EXPECT_TRUE(params_bitwise_equal(p.tensors, f.params.tensors));
    }
  }
}

TEST(Optimizer, AdamFirstStepMovesEachEntryByLearningRate) {
  // With bias correction the first Adam step is lr * g / (|g| + eps).
  Fixture f;
  const MultimodalBatch batch = task_batch(f.world, 4, Task::answer, 4);
  const ParamArrays g = clean_grad(f.params, batch, Task::answer);
  TrainConfig c;
  c.model = f.config;
  c.optimizer.learning_rate = 1e-3;
  ModelParams p = f.params;
  OptimizerState opt;
  standard_train_step(p, opt, batch, Task::answer, c);
  double worst = 0.0;
  std::size_t checked = 0;
  struct Triple {
    const Array* before;
    const Array* after;
  };
  std::vector<Triple> pairs;
  zip_params(f.params.tensors, p.tensors,
             [&](const std::string&, const Array& b, const Array& a) { pairs.push_back({&b, &a}); });
  std::size_t k = 0;
  for_each_param(g, [&](const std::string&, const Array& grad) {
    const Triple& t = pairs[k++];
    for (std::size_t i = 0; i < grad.size(); ++i) {
      const double expected = 1e-3 * grad[i] / (std::abs(grad[i]) + 1e-8);
      worst = std::max(worst, std::abs(((*t.before)[i] - (*t.after)[i]) - expected));
      ++checked;
    }
  });
  EXPECT_GT(checked, 0u);
  EXPECT_LE(worst, 1e-12);
}

TEST(Training, StandardLossDecreasesOnAFixedBatch) {
  Fixture f;
  const MultimodalBatch batch = task_batch(f.world, 8, Task::answer, 12);
  TrainConfig c;
  c.model = f.config;
  c.optimizer.learning_rate = 1e-2;
  ModelParams p = init_params(f.config, 3);
  OptimizerState opt;
  const double first = standard_train_step(p, opt, batch, Task::answer, c).loss.l_std;
  double last = first;
  for (int i = 0; i < 100; ++i) last = standard_train_step(p, opt, batch, Task::answer, c).loss.l_std;
  EXPECT_LT(last, 0.5 * first);
}

TEST(Training, VillaLossDecreasesOnAFixedBatch) {
  Fixture f;
  const MultimodalBatch batch = task_batch(f.world, 8, Task::answer, 12);
  TrainConfig c = adversarial_config(2, 0.1);
  c.optimizer.kind = OptimizerKind::adam;
  c.optimizer.learning_rate = 1e-2;
  ModelParams p = init_params(f.config, 3);
  OptimizerState opt;
  std::mt19937_64 rng(0);
  const double first = villa_train_step(p, opt, batch, Task::answer, c, rng, TrainMode::villa).loss.total;
  double last = first;
  for (int i = 0; i < 100; ++i) last = villa_train_step(p, opt, batch, Task::answer, c, rng, TrainMode::villa).loss.total;
  EXPECT_LT(last, 0.5 * first);
}

TEST(Training, StepIsDeterministic) {
  Fixture f;
  const MultimodalBatch batch = task_batch(f.world, 4, Task::mlm, 8);
  TrainConfig c = adversarial_config(3, 0.5);
  c.optimizer.kind = OptimizerKind::adam;
  c.optimizer.learning_rate = 1e-2;
  ModelParams a = f.params;
  ModelParams b = f.params;
  OptimizerState oa;
  OptimizerState ob;
  for (int step = 0; step < 3; ++step) {
    std::mt19937_64 ra(step);
    std::mt19937_64 rb(step);
    const StepResult x = villa_train_step(a, oa, batch, Task::mlm, c, ra, TrainMode::villa);
    const StepResult y = villa_train_step(b, ob, batch, Task::mlm, c, rb, TrainMode::villa);
    EXPECT_EQ(x.loss.total, y.loss.total);
  }
  EXPECT_TRUE(params_bitwise_equal(a.tensors, b.tensors));
}

TEST(Training, StandardModeIsRejectedByAdversarialStep) {
  Fixture f;
  const MultimodalBatch batch = task_batch(f.world, 4, Task::answer, 1);
  TrainConfig c = adversarial_config(1, 0.1);
  OptimizerState opt;
  std::mt19937_64 rng(0);
  EXPECT_THROW(villa_train_step(f.params, opt, batch, Task::answer, c, rng, TrainMode::standard), ContractError);
}

TEST(Divergence, NonFiniteLossReportsFirstIteration) {
  Fixture f;
  const MultimodalBatch batch = task_batch(f.world, 4, Task::answer, 1);
  ModelParams p = f.params;
  p.tensors.answer_head_b[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig c = adversarial_config(3, 0.1);
  OptimizerState opt;
  std::mt19937_64 rng(0);
  try {
    villa_train_step(p, opt, batch, Task::answer, c, rng, TrainMode::villa);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.iteration(), 1u);
  }
  EXPECT_THROW(standard_train_step(p, opt, batch, Task::answer, c), DivergenceError);
}

TEST(Evaluate, UntrainedModelIsNearChanceOnBalancedLabels) {
  TrainConfig c;
  const WorldSpec w = make_world(c);
  const ModelParams p = init_params(c.model, 4);
  const auto data = make_downstream_dataset(w, 1200, 77);
  const auto batches = make_batches(data, w, 64);
  const EvalMetrics m = evaluate(p, batches, Task::answer);
  EXPECT_EQ(m.count, 1200u);
  EXPECT_NEAR(m.accuracy, 0.25, 0.05);
  EXPECT_NEAR(m.mean_loss, std::log(4.0), 0.1);
}

TEST(Evaluate, MatchesPerBatchOracleAndIsPure) {
  Fixture f;
  const std::vector<MultimodalBatch> batches{task_batch(f.world, 3, Task::answer, 1),
                                             task_batch(f.world, 5, Task::answer, 2)};
  const ModelParams before = f.params;
  const EvalMetrics m = evaluate(f.params, batches, Task::answer);
  EXPECT_TRUE(params_bitwise_equal(before.tensors, f.params.tensors));
  double loss = 0.0;
  double hits = 0.0;
  for (const MultimodalBatch& b : batches) {
    const Array logits = forward_values(f.params, b, Task::answer).logits;
    const std::size_t c = logits.shape().back();
    for (std::size_t i = 0; i < b.batch_size; ++i) {
      const int y = (*b.answer_label)[i];
      double mx = -std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t j = 0; j < c; ++j) {
        if (logits[i * c + j] > mx) {
          mx = logits[i * c + j];
          arg = j;
        }
      }
      double z = 0.0;
      for (std::size_t j = 0; j < c; ++j) z += std::exp(logits[i * c + j] - mx);
      loss += -(logits[i * c + static_cast<std::size_t>(y)] - mx - std::log(z));
      hits += static_cast<int>(arg) == y ? 1.0 : 0.0;
    }
  }
  EXPECT_EQ(m.count, 8u);
  EXPECT_NEAR(m.mean_loss, loss / 8.0, 1e-12);
  EXPECT_NEAR(m.accuracy, hits / 8.0, 1e-15);
  const EvalMetrics again = evaluate(f.params, batches, Task::answer);
  EXPECT_EQ(again.accuracy, m.accuracy);
  EXPECT_EQ(again.mean_loss, m.mean_loss);
}

TEST(Evaluate, AccuracyOfPerfectLogitsIsOne) {
  const Array logits({3, 4}, std::vector<double>{5, 0, 0, 0, 0, 0, 5, 0, 0, 0, 0, 5});
  EXPECT_EQ(detail::accuracy_of(logits, {0, 2, 3}), 1.0);
  EXPECT_EQ(detail::accuracy_of(logits, {1, 1, 1}), 0.0);
}

TEST(Evaluate, EmptyDatasetIsContractError) {
  Fixture f;
  EXPECT_THROW(evaluate(f.params, std::span<const MultimodalBatch>{}, Task::answer), ContractError);
}

TEST(TrainConfigTest, ValidateRejectsBadSettings) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  TrainConfig bad = c;
  bad.adv_steps = 0;
  EXPECT_THROW(bad.validate(), ContractError);
  bad = c;
  bad.epsilon = -1.0;
  EXPECT_THROW(bad.validate(), ContractError);
  bad = c;
  bad.batch_size = 1;
  EXPECT_THROW(bad.validate(), ContractError);
  bad = c;
  bad.epsilon = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(bad.validate(), ContractError);
}

TEST(TrainConfigTest, CanonicalFormCoversSeedAndFinetuneMode) {
  TrainConfig a;
  TrainConfig b = a;
  b.seed = 1;
  EXPECT_NE(a.canonical(), b.canonical());
  b = a;
  b.finetune_mode = TrainMode::standard;
  EXPECT_NE(a.canonical(), b.canonical());
  EXPECT_EQ(b.mode_for(Stage::pretrain), TrainMode::villa);
  EXPECT_EQ(b.mode_for(Stage::finetune), TrainMode::standard);
}

TEST(TwoStage, EncoderHandoffIsBitwise) {
  TrainConfig c;
  c.model = tiny_config();
  c.num_concepts = 4;
  c.epochs = 1;
  c.batch_size = 8;
  c.pretrain_samples = 16;
  c.pretrain_val_samples = 8;
  c.finetune_samples = 16;
  c.val_samples = 8;
  c.adv_steps = 2;
  const WorldSpec w = make_world(c);
  const TwoStageResult r = run_two_stage(c, w);
  EXPECT_EQ(r.pretrain_final_encoder, r.finetune_initial_encoder);
  EXPECT_EQ(r.pretrain_final_encoder, encoder_checksum(r.pretrained));
  // Finetuning then moves the encoder.
  EXPECT_NE(encoder_checksum(r.finetuned), r.pretrain_final_encoder);
  std::size_t pretrain_rows = 0;
  std::size_t finetune_rows = 0;
  for (const MetricsRecord& m : r.history) (m.stage == "pretrain" ? pretrain_rows : finetune_rows) += 1;
  EXPECT_EQ(pretrain_rows, 2u + 2u);  // two train steps, two val rows
  EXPECT_EQ(finetune_rows, 2u + 2u);
}

TEST(TwoStage, RejectsSingleStageConfig) {
  TrainConfig c;
  c.stage = Stage::pretrain;
  EXPECT_THROW(run_two_stage(c, make_world(c)), ContractError);
}
