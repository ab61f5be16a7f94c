#pragma once

// Single-stream multimodal transformer. Text tokens and image regions are
// embedded into a shared space, concatenated as [CLS, tokens..., regions...],
// and fused by a post-LN transformer encoder. Task heads read either the
// [CLS] position (itm, answer) or the masked token positions (mlm).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "villa/autodiff.hpp"

namespace villa {

inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kClsId = 1;
inline constexpr std::size_t kMaskId = 2;
inline constexpr double kAttentionMaskLogit = -1e9;

enum class Task { mlm, itm, answer };

inline std::string_view to_string(Task t) {
  switch (t) {
    case Task::mlm: return "mlm";
    case Task::itm: return "itm";
    case Task::answer: return "answer";
  }
  return "?";
}

inline Task parse_task(std::string_view s) {
  if (s == "mlm") return Task::mlm;
  if (s == "itm") return Task::itm;
  if (s == "answer") return Task::answer;
  throw ContractError("unknown task id '" + std::string(s) + "'");
}

struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t hidden = 64;
  std::size_t num_heads = 4;
  std::size_t vocab_size = 64;
  std::size_t max_tokens = 16;
  std::size_t max_regions = 8;
  std::size_t region_feat_dim = 32;
  std::size_t num_answers = 4;
  std::size_t ffn_hidden = 128;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ContractError(std::string("ModelConfig: ") + name + " must be positive");
    };
    positive(num_layers, "num_layers");
    positive(hidden, "hidden");
    positive(num_heads, "num_heads");
    positive(max_tokens, "max_tokens");
    positive(max_regions, "max_regions");
    positive(region_feat_dim, "region_feat_dim");
    positive(num_answers, "num_answers");
    positive(ffn_hidden, "ffn_hidden");
    if (hidden % num_heads != 0) throw ContractError("ModelConfig: hidden must be divisible by num_heads");
    if (vocab_size <= kMaskId) throw ContractError("ModelConfig: vocab must reserve [PAD], [CLS], [MASK]");
  }

  /// Stable key=value serialization; input to the checkpoint digest.
  std::string canonical() const {
    std::ostringstream os;
    os << "num_layers=" << num_layers << ";hidden=" << hidden << ";num_heads=" << num_heads
       << ";vocab_size=" << vocab_size << ";max_tokens=" << max_tokens << ";max_regions=" << max_regions
       << ";region_feat_dim=" << region_feat_dim << ";num_answers=" << num_answers << ";ffn_hidden=" << ffn_hidden;
    return os.str();
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T>
struct LayerParamsT {
  // No key bias: it shifts every logit of a query row equally and cancels in the softmax.
  T wq, bq, wk, wv, bv, wo, bo;
  T ln1_gain, ln1_bias;
  T ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  T ln2_gain, ln2_bias;
};

/// Every learnable tensor of the model. Instantiated with Array for storage
/// (ModelParams, gradients, optimizer moments) and with Tensor for the
/// per-tape bindings used by forward().
template <class T>
struct ParamSet {
  T word_embedding;
  T image_projection, image_projection_bias;
  T token_position_embedding;
  T region_position_weight, region_position_bias;
  T modality_type_embedding;
  T embed_ln_gain, embed_ln_bias;
  std::vector<LayerParamsT<T>> layers;
  T mlm_head_w, mlm_head_b;
  T itm_head_w, itm_head_b;
  T answer_head_w, answer_head_b;
};

/// Visits every parameter in a fixed order as f(name, field). Names under
/// "encoder." form the transferable encoder; "head." names are task heads.
template <class P, class F>
void for_each_param(P& p, F&& f) {
  f(std::string("encoder.word_embedding"), p.word_embedding);
  f(std::string("encoder.image_projection"), p.image_projection);
  f(std::string("encoder.image_projection_bias"), p.image_projection_bias);
  f(std::string("encoder.token_position_embedding"), p.token_position_embedding);
  f(std::string("encoder.region_position_weight"), p.region_position_weight);
  f(std::string("encoder.region_position_bias"), p.region_position_bias);
  f(std::string("encoder.modality_type_embedding"), p.modality_type_embedding);
  f(std::string("encoder.embed_ln_gain"), p.embed_ln_gain);
  f(std::string("encoder.embed_ln_bias"), p.embed_ln_bias);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    const std::string pre = "encoder.layer" + std::to_string(i) + ".";
    f(pre + "wq", l.wq);
    f(pre + "bq", l.bq);
    f(pre + "wk", l.wk);
    f(pre + "wv", l.wv);
    f(pre + "bv", l.bv);
    f(pre + "wo", l.wo);
    f(pre + "bo", l.bo);
    f(pre + "ln1_gain", l.ln1_gain);
    f(pre + "ln1_bias", l.ln1_bias);
    f(pre + "ffn_w1", l.ffn_w1);
    f(pre + "ffn_b1", l.ffn_b1);
    f(pre + "ffn_w2", l.ffn_w2);
    f(pre + "ffn_b2", l.ffn_b2);
    f(pre + "ln2_gain", l.ln2_gain);
    f(pre + "ln2_bias", l.ln2_bias);
  }
  f(std::string("head.mlm_w"), p.mlm_head_w);
  f(std::string("head.mlm_b"), p.mlm_head_b);
  f(std::string("head.itm_w"), p.itm_head_w);
  f(std::string("head.itm_b"), p.itm_head_b);
  f(std::string("head.answer_w"), p.answer_head_w);
  f(std::string("head.answer_b"), p.answer_head_b);
}

inline bool is_encoder_param(std::string_view name) { return name.starts_with("encoder."); }

/// Lockstep visit over two parameter sets with identical layout.
template <class A, class B, class F>
void zip_params(A& a, B& b, F&& f) {
  std::vector<std::pair<std::string, decltype(&a.word_embedding)>> lhs;
  for_each_param(a, [&](const std::string& name, auto& t) { lhs.emplace_back(name, &t); });
  std::size_t i = 0;
  for_each_param(b, [&](const std::string& name, auto& t) {
    if (i >= lhs.size()) throw ContractError("zip_params: layout mismatch at " + name);
    f(name, *lhs[i].second, t);
    ++i;
  });
  if (i != lhs.size()) throw ContractError("zip_params: layout mismatch");
}

using ParamArrays = ParamSet<Array>;
using ParamTensors = ParamSet<Tensor>;

struct ModelParams {
  ModelConfig config;
  ParamArrays tensors;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_param(tensors, [&](const std::string&, const Array& a) { n += a.size(); });
    return n;
  }
};

/// Zero-filled set with the same shapes (gradient buffers, optimizer moments).
inline ParamArrays zeros_like(const ParamArrays& p) {
  ParamArrays out = p;
  for_each_param(out, [](const std::string&, Array& a) { a.fill(0.0); });
  return out;
}

namespace detail {

inline Array normal_matrix(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Array a(std::move(shape));
  for (double& v : a.values()) v = dist(rng);
  return a;
}

inline void init_heads(ParamArrays& p, const ModelConfig& c, std::mt19937_64& rng, double stddev) {
  p.mlm_head_w = normal_matrix({c.hidden, c.vocab_size}, rng, stddev);
  p.mlm_head_b = Array({c.vocab_size});
  p.itm_head_w = normal_matrix({c.hidden, 2}, rng, stddev);
  p.itm_head_b = Array({2});
  p.answer_head_w = normal_matrix({c.hidden, c.num_answers}, rng, stddev);
  p.answer_head_b = Array({c.num_answers});
}

}  // namespace detail

/// normal(0, stddev) matrices, zero biases and shifts, unit layer-norm gains.
inline ModelParams init_params(const ModelConfig& c, std::uint64_t seed, double stddev = 0.02) {
  c.validate();
  std::mt19937_64 rng(seed);
  using detail::normal_matrix;
  ModelParams m;
  m.config = c;
  ParamArrays& p = m.tensors;
  p.word_embedding = normal_matrix({c.vocab_size, c.hidden}, rng, stddev);
  p.image_projection = normal_matrix({c.region_feat_dim, c.hidden}, rng, stddev);
  p.image_projection_bias = Array({c.hidden});
  p.token_position_embedding = normal_matrix({c.max_tokens, c.hidden}, rng, stddev);
  p.region_position_weight = normal_matrix({4, c.hidden}, rng, stddev);
  p.region_position_bias = Array({c.hidden});
  p.modality_type_embedding = normal_matrix({2, c.hidden}, rng, stddev);
  p.embed_ln_gain = Array({c.hidden}, 1.0);
  p.embed_ln_bias = Array({c.hidden});
  for (std::size_t i = 0; i < c.num_layers; ++i) {
    LayerParamsT<Array> l;
    l.wq = normal_matrix({c.hidden, c.hidden}, rng, stddev);
    l.bq = Array({c.hidden});
    l.wk = normal_matrix({c.hidden, c.hidden}, rng, stddev);
    l.wv = normal_matrix({c.hidden, c.hidden}, rng, stddev);
    l.bv = Array({c.hidden});
    l.wo = normal_matrix({c.hidden, c.hidden}, rng, stddev);
    l.bo = Array({c.hidden});
    l.ln1_gain = Array({c.hidden}, 1.0);
    l.ln1_bias = Array({c.hidden});
    l.ffn_w1 = normal_matrix({c.hidden, c.ffn_hidden}, rng, stddev);
    l.ffn_b1 = Array({c.ffn_hidden});
    l.ffn_w2 = normal_matrix({c.ffn_hidden, c.hidden}, rng, stddev);
    l.ffn_b2 = Array({c.hidden});
    l.ln2_gain = Array({c.hidden}, 1.0);
    l.ln2_bias = Array({c.hidden});
    p.layers.push_back(std::move(l));
  }
  detail::init_heads(p, c, rng, stddev);
  return m;
}

/// Fresh task heads, encoder untouched (finetuning handoff).
inline void reinit_heads(ModelParams& m, std::uint64_t seed, double stddev = 0.02) {
  std::mt19937_64 rng(seed);
  detail::init_heads(m.tensors, m.config, rng, stddev);
}

inline ParamTensors bind(Tape& tape, const ParamArrays& p, bool requires_grad) {
  ParamTensors out;
  out.layers.resize(p.layers.size());
  zip_params(p, out, [&](const std::string&, const Array& a, Tensor& t) { t = tape.leaf(a, requires_grad); });
  return out;
}

/// Paired image regions and token sequences with padding masks and labels.
/// Shapes: img_feats B x R x D, region_boxes B x R x 4, tokens/txt_mask B x T,
/// region_mask B x R (row-major, 0/1 masks).
struct MultimodalBatch {
  std::size_t batch_size = 0;
  std::size_t num_tokens = 0;
  std::size_t num_regions = 0;
  Array img_feats;
  Array region_boxes;
  std::vector<std::size_t> txt_tokens;
  Array txt_mask;
  Array region_mask;
  std::optional<std::vector<int>> mlm_targets;  // -1 at unmasked positions
  std::optional<std::vector<int>> itm_label;
  std::optional<std::vector<int>> answer_label;

  std::size_t seq_len() const { return num_tokens + num_regions; }

  void validate(const ModelConfig& c) const {
    const std::size_t b = batch_size;
    const std::size_t t = num_tokens;
    const std::size_t r = num_regions;
    if (b == 0 || t == 0 || r == 0) throw ContractError("MultimodalBatch: empty dimension");
    if (t > c.max_tokens || r > c.max_regions) throw ContractError("MultimodalBatch: exceeds model limits");
    if (img_feats.shape() != Shape{b, r, c.region_feat_dim} || region_boxes.shape() != Shape{b, r, 4} ||
        txt_mask.shape() != Shape{b, t} || region_mask.shape() != Shape{b, r} || txt_tokens.size() != b * t) {
      throw DimensionError("MultimodalBatch: inconsistent field shapes");
    }
    for (std::size_t i = 0; i < b; ++i) {
      if (txt_tokens[i * t] != kClsId) throw ContractError("MultimodalBatch: sample must start with [CLS]");
    }
    for (std::size_t tok : txt_tokens) {
      if (tok >= c.vocab_size) throw ContractError("MultimodalBatch: token id outside vocabulary");
    }
    for (const Array* m : {&txt_mask, &region_mask}) {
      for (double v : m->data()) {
        if (v != 0.0 && v != 1.0) throw ContractError("MultimodalBatch: masks must be 0/1");
      }
    }
    const int families = int(mlm_targets.has_value()) + int(itm_label.has_value()) + int(answer_label.has_value());
    if (families > 1) throw ContractError("MultimodalBatch: more than one label family active");
    if (mlm_targets && mlm_targets->size() != b * t) throw DimensionError("MultimodalBatch: mlm_targets shape");
    if (itm_label && itm_label->size() != b) throw DimensionError("MultimodalBatch: itm_label shape");
    if (answer_label && answer_label->size() != b) throw DimensionError("MultimodalBatch: answer_label shape");
  }
};

/// Perturbation inputs for one forward pass, as tensors on the same tape.
/// delta_img is B x R x region_feat_dim, delta_txt is B x T x hidden.
struct DeltaInputs {
  std::optional<Tensor> img;
  std::optional<Tensor> txt;
};

struct ModelOutput {
  Task task = Task::answer;
  Tensor cls_repr;     // B x hidden
  Tensor task_logits;  // B x C (itm/answer) or M x vocab over masked positions (mlm)
  std::vector<int> targets;               // labels aligned with logits rows; empty when unlabelled
  std::vector<std::size_t> mlm_positions; // b * T + t for each mlm logits row
  std::vector<Array> attention;           // per layer, B x heads x S x S
  Array clean_probs;                      // softmax of task_logits
  std::size_t num_tokens = 0;
  std::size_t num_regions = 0;
  Array txt_mask;
  Array region_mask;
};

namespace detail {

inline Array expand_mask(const Array& mask, std::size_t width) {
  Shape s = mask.shape();
  s.push_back(width);
  Array out(s);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    for (std::size_t j = 0; j < width; ++j) out[i * width + j] = mask[i];
  }
  return out;
}

inline Tensor row(const Tensor& table, std::size_t i) {
  const std::size_t h = table.shape()[1];
  return reshape(slice(table, 0, i, i + 1), {h});
}

}  // namespace detail

/// Fused input sequence B x S x hidden. Perturbations enter only the word
/// embeddings (text) and the raw region features (image); positional and
/// type embeddings stay clean. Padded positions never see a perturbation.
inline Tensor embed_inputs(Tape& tape, const ParamTensors& p, const ModelConfig& c, const MultimodalBatch& batch,
                           const DeltaInputs& delta = {}) {
  const std::size_t b = batch.batch_size;
  const std::size_t t = batch.num_tokens;
  const std::size_t h = c.hidden;

  Tensor txt = embedding_gather(p.word_embedding, batch.txt_tokens, {b, t});
  if (delta.txt) {
    if (delta.txt->shape() != Shape{b, t, h}) throw ContractError("embed_inputs: delta_txt shape " + shape_str(delta.txt->shape()));
    txt = add(txt, multiply(*delta.txt, tape.constant(detail::expand_mask(batch.txt_mask, h))));
  }
  txt = add(txt, slice(p.token_position_embedding, 0, 0, t));
  txt = add(txt, detail::row(p.modality_type_embedding, 0));

  Tensor feats = tape.constant(batch.img_feats);
  if (delta.img) {
    if (delta.img->shape() != batch.img_feats.shape()) {
      throw ContractError("embed_inputs: delta_img shape " + shape_str(delta.img->shape()));
    }
    feats = add(feats, multiply(*delta.img, tape.constant(detail::expand_mask(batch.region_mask, c.region_feat_dim))));
  }
  Tensor img = add(matmul(feats, p.image_projection), p.image_projection_bias);
  img = add(img, add(matmul(tape.constant(batch.region_boxes), p.region_position_weight), p.region_position_bias));
  img = add(img, detail::row(p.modality_type_embedding, 1));

  return layer_norm(concat({txt, img}, 1), p.embed_ln_gain, p.embed_ln_bias);
}

/// Key-padding bias B x S x S: 0 for valid keys, a large negative logit otherwise.
inline Array attention_mask_bias(const MultimodalBatch& batch) {
  const std::size_t b = batch.batch_size;
  const std::size_t s = batch.seq_len();
  Array bias({b, s, s});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < s; ++k) {
      const bool valid = k < batch.num_tokens ? batch.txt_mask[i * batch.num_tokens + k] != 0.0
                                              : batch.region_mask[i * batch.num_regions + (k - batch.num_tokens)] != 0.0;
      if (valid) continue;
      for (std::size_t q = 0; q < s; ++q) bias[(i * s + q) * s + k] = kAttentionMaskLogit;
    }
  }
  return bias;
}

/// Multi-head self-attention sublayer output (before residual and norm).
/// When `maps` is given, the B x heads x S x S probabilities are stored there.
inline Tensor self_attention(const LayerParamsT<Tensor>& l, const Tensor& x, const Tensor& mask_bias,
                             std::size_t num_heads, Array* maps = nullptr) {
  const Shape& sx = x.shape();
  const std::size_t b = sx[0];
  const std::size_t s = sx[1];
  const std::size_t h = sx[2];
  const std::size_t d = h / num_heads;
  const Tensor q = add(matmul(x, l.wq), l.bq);
  const Tensor k = matmul(x, l.wk);
  const Tensor v = add(matmul(x, l.wv), l.bv);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  if (maps) *maps = Array({b, num_heads, s, s});
  std::vector<Tensor> heads;
  heads.reserve(num_heads);
  for (std::size_t hd = 0; hd < num_heads; ++hd) {
    const Tensor qh = slice(q, 2, hd * d, (hd + 1) * d);
    const Tensor kh = slice(k, 2, hd * d, (hd + 1) * d);
    const Tensor vh = slice(v, 2, hd * d, (hd + 1) * d);
    const Tensor probs = softmax(add(scale(matmul(qh, transpose(kh)), inv_sqrt_d), mask_bias));
    if (maps) {
      const Array& pv = probs.value();
      for (std::size_t i = 0; i < b; ++i) {
        std::copy_n(pv.values().begin() + static_cast<std::ptrdiff_t>(i * s * s), s * s,
                    maps->values().begin() + static_cast<std::ptrdiff_t>((i * num_heads + hd) * s * s));
      }
    }
    heads.push_back(matmul(probs, vh));
  }
  return add(matmul(concat(heads, 2), l.wo), l.bo);
}

inline Tensor encoder_layer(const LayerParamsT<Tensor>& l, const Tensor& x, const Tensor& mask_bias,
                            std::size_t num_heads, Array* maps) {
  const Tensor attn = self_attention(l, x, mask_bias, num_heads, maps);
  const Tensor h1 = layer_norm(add(x, attn), l.ln1_gain, l.ln1_bias);
  const Tensor ff = add(matmul(gelu(add(matmul(h1, l.ffn_w1), l.ffn_b1)), l.ffn_w2), l.ffn_b2);
  return layer_norm(add(h1, ff), l.ln2_gain, l.ln2_bias);
}

inline ModelOutput forward(Tape& tape, const ParamTensors& p, const ModelConfig& c, const MultimodalBatch& batch,
                           Task task, const DeltaInputs& delta = {}) {
  batch.validate(c);
  const std::size_t b = batch.batch_size;
  const std::size_t s = batch.seq_len();
  const std::size_t t = batch.num_tokens;

  ModelOutput out;
  out.task = task;
  out.num_tokens = t;
  out.num_regions = batch.num_regions;
  out.txt_mask = batch.txt_mask;
  out.region_mask = batch.region_mask;

  Tensor x = embed_inputs(tape, p, c, batch, delta);
  const Tensor mask_bias = tape.constant(attention_mask_bias(batch));
  out.attention.resize(p.layers.size());
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    x = encoder_layer(p.layers[i], x, mask_bias, c.num_heads, &out.attention[i]);
  }
  out.cls_repr = reshape(slice(x, 1, 0, 1), {b, c.hidden});

  switch (task) {
    case Task::itm:
      out.task_logits = add(matmul(out.cls_repr, p.itm_head_w), p.itm_head_b);
      if (batch.itm_label) out.targets = *batch.itm_label;
      break;
    case Task::answer:
      out.task_logits = add(matmul(out.cls_repr, p.answer_head_w), p.answer_head_b);
      if (batch.answer_label) out.targets = *batch.answer_label;
      break;
    case Task::mlm: {
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < t; ++j) {
          const std::size_t pos = i * t + j;
          const bool masked = batch.mlm_targets ? (*batch.mlm_targets)[pos] >= 0 : batch.txt_tokens[pos] == kMaskId;
          if (!masked) continue;
          out.mlm_positions.push_back(pos);
          rows.push_back(i * s + j);
          if (batch.mlm_targets) out.targets.push_back((*batch.mlm_targets)[pos]);
        }
      }
      if (rows.empty()) throw ContractError("forward: mlm task with no masked positions");
      const Tensor flat = reshape(x, {b * s, c.hidden});
      const Tensor picked = embedding_gather(flat, rows, {rows.size()});
      out.task_logits = add(matmul(picked, p.mlm_head_w), p.mlm_head_b);
      break;
    }
    default:
      throw ContractError("forward: unknown task id");
  }

  // Numeric softmax of the logits (ỹ); not recorded on the tape.
  const Array& lv = out.task_logits.value();
  const std::size_t classes = lv.shape().back();
  out.clean_probs = lv;
  for (std::size_t r = 0; r < lv.size() / classes; ++r) {
    double* row = out.clean_probs.data().data() + r * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t j = 0; j < classes; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < classes; ++j) row[j] /= z;
  }
  return out;
}

/// Convenience: clean forward with constant parameters on a private tape,
/// returning only plain arrays.
struct ForwardValues {
  Array logits;
  std::vector<int> targets;
  std::vector<Array> attention;
  Array cls_repr;
};

inline ForwardValues forward_values(const ModelParams& m, const MultimodalBatch& batch, Task task) {
  Tape tape;
  const ParamTensors p = bind(tape, m.tensors, false);
  ModelOutput out = forward(tape, p, m.config, batch, task);
  return {out.task_logits.value(), std::move(out.targets), std::move(out.attention), out.cls_repr.value()};
}

/// Maximum attention weight from an image region (query) to any token of the
/// half-open span [begin, end) (keys), for one sample, layer and head.
inline double attention_probe(const ModelOutput& out, std::size_t sample, std::size_t layer, std::size_t head,
                              std::size_t region_index, std::size_t span_begin, std::size_t span_end) {
  if (layer >= out.attention.size()) throw ContractError("attention_probe: layer out of range");
  const Array& a = out.attention[layer];
  const std::size_t b = a.dim(0);
  const std::size_t heads = a.dim(1);
  const std::size_t s = a.dim(2);
  if (sample >= b || head >= heads) throw ContractError("attention_probe: sample or head out of range");
  if (region_index >= out.num_regions || out.region_mask[sample * out.num_regions + region_index] == 0.0) {
    throw ContractError("attention_probe: region index out of range");
  }
  if (span_begin >= span_end || span_end > out.num_tokens) throw ContractError("attention_probe: bad token span");
  for (std::size_t tok = span_begin; tok < span_end; ++tok) {
    if (out.txt_mask[sample * out.num_tokens + tok] == 0.0) throw ContractError("attention_probe: span covers padding");
  }
  const std::size_t q = out.num_tokens + region_index;
  double best = 0.0;
  for (std::size_t tok = span_begin; tok < span_end; ++tok) {
    best = std::max(best, a[((sample * heads + head) * s + q) * s + tok]);
  }
  return best;
}

}  // namespace villa
