#pragma once

// Synthetic concept world. Each concept has a unit-norm prototype feature
// vector and a dedicated vocabulary token. An "image" is a set of regions,
// each a noisy copy of some concept's prototype; a caption names a subset of
// the depicted concepts. Pre-training tasks (MLM, ITM) and a counting
// question task are derived from these pairs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "villa/model.hpp"

namespace villa {

inline constexpr double kMaskProbability = 0.15;
inline constexpr std::size_t kNumFillers = 4;

struct WorldSpec {
  std::size_t num_concepts = 16;
  std::size_t region_feat_dim = 32;
  double noise_sigma = 0.1;
  std::size_t vocab_size = 64;
  std::size_t max_tokens = 16;
  std::size_t max_regions = 8;
  std::uint64_t seed = 0;

  Array prototypes;                         // num_concepts x region_feat_dim, unit rows
  std::vector<std::size_t> concept_tokens;  // concept -> token id (>= 3)
  std::vector<std::size_t> filler_tokens;   // caption glue words
  std::size_t question_token = 0;           // "how many"

  double min_prototype_distance() const {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < num_concepts; ++i) {
      for (std::size_t j = i + 1; j < num_concepts; ++j) {
        double sq = 0.0;
        for (std::size_t k = 0; k < region_feat_dim; ++k) {
          const double d = prototypes[i * region_feat_dim + k] - prototypes[j * region_feat_dim + k];
          sq += d * d;
        }
        best = std::min(best, std::sqrt(sq));
      }
    }
    return best;
  }
};

/// One image-text pair with optional labels. img_feats is R x D, boxes R x 4.
struct Sample {
  Array img_feats;
  Array boxes;
  std::vector<std::size_t> tokens;
  std::vector<int> mlm_targets;  // empty, or one entry per token (-1 = unmasked)
  std::optional<int> itm_label;
  std::optional<int> answer_label;

  // Generation metadata; not part of the serialized record.
  std::vector<std::size_t> region_concepts;
  std::vector<std::optional<std::size_t>> token_concepts;
  std::optional<std::size_t> queried_concept;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Counter-based generator for sample `index` of stream `stream`: the result
/// depends only on (seed, stream, index), so samples can be produced in any
/// order.
inline std::mt19937_64 counter_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  using detail::splitmix64;
  return std::mt19937_64(splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index));
}

/// Builds prototypes (resampled until pairwise distance > 4 sigma) and the
/// concept/filler token maps.
inline WorldSpec make_world(std::uint64_t seed, std::size_t num_concepts = 16, double noise_sigma = 0.1,
                            const ModelConfig& model = {}) {
  WorldSpec w;
  w.num_concepts = num_concepts;
  w.noise_sigma = noise_sigma;
  w.region_feat_dim = model.region_feat_dim;
  w.vocab_size = model.vocab_size;
  w.max_tokens = model.max_tokens;
  w.max_regions = model.max_regions;
  w.seed = seed;
  if (num_concepts < 2) throw ContractError("make_world: need at least two concepts");
  if (kMaskId + 1 + num_concepts + 1 + kNumFillers > model.vocab_size) throw ContractError("make_world: vocabulary too small");
  if (model.max_regions < 3 || model.max_tokens < 3) throw ContractError("make_world: need >= 3 regions and tokens");

  std::mt19937_64 rng = counter_rng(seed, 0x5eed, 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int attempt = 0;; ++attempt) {
    w.prototypes = Array({num_concepts, w.region_feat_dim});
    for (std::size_t c = 0; c < num_concepts; ++c) {
      double sq = 0.0;
      for (std::size_t k = 0; k < w.region_feat_dim; ++k) {
        const double v = normal(rng);
        w.prototypes[c * w.region_feat_dim + k] = v;
        sq += v * v;
      }
      const double inv = 1.0 / std::sqrt(sq);
      for (std::size_t k = 0; k < w.region_feat_dim; ++k) w.prototypes[c * w.region_feat_dim + k] *= inv;
    }
    if (w.min_prototype_distance() > 4.0 * noise_sigma) break;
    if (attempt > 1000) throw ContractError("make_world: cannot separate prototypes at this noise level");
  }
  std::size_t next = kMaskId + 1;
  for (std::size_t c = 0; c < num_concepts; ++c) w.concept_tokens.push_back(next++);
  w.question_token = next++;
  while (next < model.vocab_size && w.filler_tokens.size() < kNumFillers) w.filler_tokens.push_back(next++);
  return w;
}

/// Random image (3..max_regions regions over 1..min(4, num_concepts - 1) distinct concepts) and a
/// caption naming a nonempty subset of the depicted concepts.
inline Sample gen_pair(const WorldSpec& w, std::mt19937_64& rng) {
  Sample s;
  const std::size_t d = w.region_feat_dim;
  std::uniform_int_distribution<std::size_t> n_regions_dist(3, w.max_regions);
  const std::size_t n_regions = n_regions_dist(rng);
  // At least one concept stays absent so a mismatched ITM caption always exists.
  const std::size_t max_distinct = std::min<std::size_t>({4, n_regions, w.num_concepts - 1});
  const std::size_t n_distinct = std::uniform_int_distribution<std::size_t>(1, max_distinct)(rng);

  std::vector<std::size_t> all(w.num_concepts);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::shuffle(all.begin(), all.end(), rng);
  std::vector<std::size_t> present(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_distinct));

  // Every distinct concept gets one region, the rest are drawn with replacement.
  s.region_concepts = present;
  std::uniform_int_distribution<std::size_t> pick(0, n_distinct - 1);
  while (s.region_concepts.size() < n_regions) s.region_concepts.push_back(present[pick(rng)]);
  std::shuffle(s.region_concepts.begin(), s.region_concepts.end(), rng);

  s.img_feats = Array({n_regions, d});
  s.boxes = Array({n_regions, 4});
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t r = 0; r < n_regions; ++r) {
    const std::size_t c = s.region_concepts[r];
    for (std::size_t k = 0; k < d; ++k) {
      const double eps = noise(rng);
      s.img_feats[r * d + k] = w.prototypes[c * d + k] + w.noise_sigma * eps;
    }
    double x1 = unit(rng), x2 = unit(rng), y1 = unit(rng), y2 = unit(rng);
    if (x1 > x2) std::swap(x1, x2);
    if (y1 > y2) std::swap(y1, y2);
    s.boxes[r * 4 + 0] = x1;
    s.boxes[r * 4 + 1] = y1;
    s.boxes[r * 4 + 2] = x2;
    s.boxes[r * 4 + 3] = y2;
  }

  std::vector<std::size_t> mentioned = present;
  std::shuffle(mentioned.begin(), mentioned.end(), rng);
  const std::size_t max_mentions = std::min(mentioned.size(), (w.max_tokens - 1) / 2);
  const std::size_t n_mention = std::uniform_int_distribution<std::size_t>(1, max_mentions)(rng);
  mentioned.resize(n_mention);
  std::uniform_int_distribution<std::size_t> filler(0, w.filler_tokens.size() - 1);
  s.tokens.push_back(kClsId);
  s.token_concepts.push_back(std::nullopt);
  for (std::size_t c : mentioned) {
    s.tokens.push_back(w.filler_tokens[filler(rng)]);
    s.token_concepts.push_back(std::nullopt);
    s.tokens.push_back(w.concept_tokens[c]);
    s.token_concepts.push_back(c);
  }
  return s;
}

/// Pads samples into one batch; labels are carried when every sample has them.
inline MultimodalBatch collate(std::span<const Sample> samples, const WorldSpec& w) {
  if (samples.empty()) throw ContractError("collate: no samples");
  MultimodalBatch b;
  b.batch_size = samples.size();
  for (const Sample& s : samples) {
    b.num_tokens = std::max(b.num_tokens, s.tokens.size());
    b.num_regions = std::max(b.num_regions, s.img_feats.dim(0));
  }
  const std::size_t n = b.batch_size;
  const std::size_t t = b.num_tokens;
  const std::size_t r = b.num_regions;
  const std::size_t d = w.region_feat_dim;
  b.img_feats = Array({n, r, d});
  b.region_boxes = Array({n, r, 4});
  b.txt_tokens.assign(n * t, kPadId);
  b.txt_mask = Array({n, t});
  b.region_mask = Array({n, r});
  const bool mlm = std::all_of(samples.begin(), samples.end(), [](const Sample& s) { return !s.mlm_targets.empty(); });
  const bool itm = std::all_of(samples.begin(), samples.end(), [](const Sample& s) { return s.itm_label.has_value(); });
  const bool ans = std::all_of(samples.begin(), samples.end(), [](const Sample& s) { return s.answer_label.has_value(); });
  if (mlm) b.mlm_targets.emplace(n * t, -1);
  if (itm) b.itm_label.emplace(n);
  if (ans) b.answer_label.emplace(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Sample& s = samples[i];
    const std::size_t nr = s.img_feats.dim(0);
    std::copy(s.img_feats.values().begin(), s.img_feats.values().end(),
              b.img_feats.values().begin() + static_cast<std::ptrdiff_t>(i * r * d));
    std::copy(s.boxes.values().begin(), s.boxes.values().end(),
              b.region_boxes.values().begin() + static_cast<std::ptrdiff_t>(i * r * 4));
    for (std::size_t k = 0; k < nr; ++k) b.region_mask[i * r + k] = 1.0;
    for (std::size_t k = 0; k < s.tokens.size(); ++k) {
      b.txt_tokens[i * t + k] = s.tokens[k];
      b.txt_mask[i * t + k] = 1.0;
      if (mlm) (*b.mlm_targets)[i * t + k] = s.mlm_targets[k];
    }
    if (itm) (*b.itm_label)[i] = *s.itm_label;
    if (ans) (*b.answer_label)[i] = *s.answer_label;
  }
  return b;
}

namespace detail {

inline bool caption_fits(const Sample& image, const std::vector<std::optional<std::size_t>>& caption_concepts) {
  for (const auto& c : caption_concepts) {
    if (c && std::find(image.region_concepts.begin(), image.region_concepts.end(), *c) == image.region_concepts.end()) {
      return false;
    }
  }
  return true;
}

}  // namespace detail

/// Replaces each non-[CLS], non-pad token by [MASK] with probability p and
/// records the original id as target. If nothing in the batch got masked,
/// one uniformly chosen maskable token is masked so the loss is defined.
inline void apply_mlm_masking(std::vector<Sample>& samples, std::mt19937_64& rng, double mask_prob) {
  std::bernoulli_distribution coin(mask_prob);
  std::size_t masked = 0;
  std::vector<std::pair<std::size_t, std::size_t>> maskable;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Sample& s = samples[i];
    s.mlm_targets.assign(s.tokens.size(), -1);
    for (std::size_t k = 1; k < s.tokens.size(); ++k) {
      maskable.emplace_back(i, k);
      if (!coin(rng)) continue;
      s.mlm_targets[k] = static_cast<int>(s.tokens[k]);
      s.tokens[k] = kMaskId;
      ++masked;
    }
  }
  if (masked == 0 && !maskable.empty()) {
    const auto [i, k] = maskable[std::uniform_int_distribution<std::size_t>(0, maskable.size() - 1)(rng)];
    samples[i].mlm_targets[k] = static_cast<int>(samples[i].tokens[k]);
    samples[i].tokens[k] = kMaskId;
  }
}

/// Turns fresh pairs into ITM samples: with probability 1/2 a sample keeps a
/// caption from another sample that names a concept absent from its image
/// (label 0), otherwise its own caption (label 1).
inline void apply_itm_corruption(std::vector<Sample>& samples, const WorldSpec& w, std::mt19937_64& rng) {
  if (samples.size() < 2) throw ContractError("gen_pretrain_batch: itm needs batch_size >= 2");
  std::bernoulli_distribution coin(0.5);
  const std::vector<Sample> originals = samples;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Sample& s = samples[i];
    if (!coin(rng)) {
      s.itm_label = 1;
      continue;
    }
    s.itm_label = 0;
    std::vector<std::size_t> order(originals.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const Sample* donor = nullptr;
    for (std::size_t j : order) {
      if (j != i && !detail::caption_fits(s, originals[j].token_concepts)) {
        donor = &originals[j];
        break;
      }
    }
    Sample fresh;
    while (donor == nullptr) {
      fresh = gen_pair(w, rng);
      if (!detail::caption_fits(s, fresh.token_concepts)) donor = &fresh;
    }
    s.tokens = donor->tokens;
    s.token_concepts = donor->token_concepts;
  }
}

inline MultimodalBatch gen_pretrain_batch(const WorldSpec& w, std::size_t batch_size, Task task, std::mt19937_64& rng,
                                          double mask_prob = kMaskProbability) {
  if (batch_size == 0) throw ContractError("gen_pretrain_batch: empty batch");
  std::vector<Sample> samples;
  samples.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) samples.push_back(gen_pair(w, rng));
  switch (task) {
    case Task::mlm: apply_mlm_masking(samples, rng, mask_prob); break;
    case Task::itm: apply_itm_corruption(samples, w, rng); break;
    default: throw ContractError("gen_pretrain_batch: task must be mlm or itm");
  }
  return collate(samples, w);
}

inline std::size_t concept_count(const Sample& s, std::size_t concept_id) {
  return static_cast<std::size_t>(std::count(s.region_concepts.begin(), s.region_concepts.end(), concept_id));
}

/// Counting question "[CLS] how-many <concept>". The class is drawn uniformly
/// first and images are rejected until some concept has that (clamped) count.
inline Sample gen_downstream_sample(const WorldSpec& w, std::mt19937_64& rng, std::size_t num_answers = 4) {
  if (num_answers != 4) throw ContractError("gen_downstream_sample: num_answers must be 4");
  const int label = static_cast<int>(std::uniform_int_distribution<std::size_t>(0, num_answers - 1)(rng));
  for (;;) {
    Sample s = gen_pair(w, rng);
    std::vector<std::size_t> candidates;
    for (std::size_t c = 0; c < w.num_concepts; ++c) {
      if (static_cast<int>(std::min<std::size_t>(concept_count(s, c), num_answers - 1)) == label) {
        candidates.push_back(c);
      }
    }
    if (candidates.empty()) continue;
    const std::size_t q = candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)];
    s.tokens = {kClsId, w.question_token, w.concept_tokens[q]};
    s.token_concepts = {std::nullopt, std::nullopt, q};
    s.queried_concept = q;
    s.answer_label = label;
    return s;
  }
}

inline MultimodalBatch gen_downstream_batch(const WorldSpec& w, std::size_t batch_size, std::mt19937_64& rng) {
  std::vector<Sample> samples;
  samples.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) samples.push_back(gen_downstream_sample(w, rng));
  return collate(samples, w);
}

/// Fixed downstream split; sample i uses counter_rng(world.seed, stream, i).
inline std::vector<Sample> make_downstream_dataset(const WorldSpec& w, std::size_t n, std::uint64_t stream) {
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng = counter_rng(w.seed, stream, i);
    out.push_back(gen_downstream_sample(w, rng));
  }
  return out;
}

/// Consecutive batches over `samples` in the given order.
inline std::vector<MultimodalBatch> make_batches(std::span<const Sample> samples, const WorldSpec& w,
                                                 std::size_t batch_size, std::span<const std::size_t> order = {}) {
  std::vector<MultimodalBatch> out;
  std::vector<Sample> chunk;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    chunk.push_back(samples[order.empty() ? k : order[k]]);
    if (chunk.size() == batch_size || k + 1 == samples.size()) {
      out.push_back(collate(chunk, w));
      chunk.clear();
    }
  }
  return out;
}

}  // namespace villa
