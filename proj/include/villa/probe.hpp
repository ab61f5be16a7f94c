#pragma once

// Attention probe over synthetic concept-region links: for every (layer, head)
// cell, the maximum attention weight from a region to the tokens of a phrase
// naming its concept, per pair and averaged over pairs.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "villa/model.hpp"
#include "villa/synth.hpp"

namespace villa {

struct ProbePair {
  std::size_t sample = 0;
  std::size_t region = 0;
  std::size_t span_begin = 0;  // token span [begin, end)
  std::size_t span_end = 0;
};

struct ProbeCell {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::vector<double> values;  // one per pair
  double mean = 0.0;
};

struct ProbeReport {
  std::vector<ProbePair> pairs;
  std::vector<ProbeCell> cells;  // layer-major, every (layer, head) exactly once
  double max_row_sum_error = 0.0;  // worst |sum of a valid attention row - 1|
};

/// Links every caption token naming a concept with every region depicting it.
inline std::vector<ProbePair> concept_region_pairs(std::span<const Sample> samples) {
  std::vector<ProbePair> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    for (std::size_t k = 0; k < s.token_concepts.size(); ++k) {
      if (!s.token_concepts[k]) continue;
      for (std::size_t r = 0; r < s.region_concepts.size(); ++r) {
        if (s.region_concepts[r] == *s.token_concepts[k]) out.push_back({i, r, k, k + 1});
      }
    }
  }
  return out;
}

/// Worst deviation from 1 of the attention row sums at valid query positions.
inline double attention_row_sum_error(const ModelOutput& out) {
  double worst = 0.0;
  const std::size_t t = out.num_tokens;
  for (const Array& a : out.attention) {
    const std::size_t b = a.dim(0);
    const std::size_t heads = a.dim(1);
    const std::size_t s = a.dim(2);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t q = 0; q < s; ++q) {
        const bool valid = q < t ? out.txt_mask[i * t + q] != 0.0 : out.region_mask[i * out.num_regions + (q - t)] != 0.0;
        if (!valid) continue;
        for (std::size_t h = 0; h < heads; ++h) {
          double sum = 0.0;
          for (std::size_t k = 0; k < s; ++k) sum += a[((i * heads + h) * s + q) * s + k];
          worst = std::max(worst, std::abs(sum - 1.0));
        }
      }
    }
  }
  return worst;
}

/// Probe one (layer, head) cell of a forward output.
inline ProbeCell probe_cell(const ModelOutput& out, std::size_t layer, std::size_t head,
                            std::span<const ProbePair> pairs) {
  ProbeCell cell{layer, head, {}, 0.0};
  cell.values.reserve(pairs.size());
  for (const ProbePair& p : pairs) {
    cell.values.push_back(attention_probe(out, p.sample, layer, head, p.region, p.span_begin, p.span_end));
  }
  double sum = 0.0;
  for (double v : cell.values) sum += v;
  cell.mean = pairs.empty() ? 0.0 : sum / static_cast<double>(pairs.size());
  return cell;
}

/// Clean forward over `samples` (one batch), then every (layer, head) cell.
inline ProbeReport probe_report(const ModelParams& params, std::span<const Sample> samples, const WorldSpec& world,
                                std::vector<ProbePair> pairs, Task task = Task::itm) {
  if (samples.empty()) throw ContractError("probe_report: no samples");
  const MultimodalBatch batch = collate(samples, world);
  Tape tape;
  const ParamTensors bound = bind(tape, params.tensors, false);
  MultimodalBatch unlabeled = batch;
  unlabeled.mlm_targets.reset();
  unlabeled.itm_label.reset();
  unlabeled.answer_label.reset();
  const ModelOutput out = forward(tape, bound, params.config, unlabeled, task);
  ProbeReport report;
  report.max_row_sum_error = attention_row_sum_error(out);
  for (std::size_t l = 0; l < params.config.num_layers; ++l) {
    for (std::size_t h = 0; h < params.config.num_heads; ++h) report.cells.push_back(probe_cell(out, l, h, pairs));
  }
  report.pairs = std::move(pairs);
  return report;
}

}  // namespace villa
