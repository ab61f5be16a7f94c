#pragma once

// Embedding-space adversary: perturbation state, random start inside the
// Frobenius ball, normalized PGD ascent and radial projection. Every norm is
// taken per sample over that sample's slice of the delta tensor.

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "villa/array.hpp"

namespace villa {

enum class Modality { txt, img, both };

inline std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::txt: return "txt";
    case Modality::img: return "img";
    case Modality::both: return "both";
  }
  return "?";
}

inline Modality parse_modality(std::string_view s) {
  if (s == "txt") return Modality::txt;
  if (s == "img") return Modality::img;
  if (s == "both") return Modality::both;
  throw ContractError("unknown modality '" + std::string(s) + "'");
}

inline bool perturbs_text(Modality m) { return m != Modality::img; }
inline bool perturbs_image(Modality m) { return m != Modality::txt; }

inline constexpr double kZeroGradGuard = 1e-12;

struct PerturbationState {
  Array delta_img;  // B x R x region_feat_dim
  Array delta_txt;  // B x T x hidden
  double epsilon = 0.0;
  double adv_step_size = 1e-3;
  Modality modality_mode = Modality::both;
};

namespace detail {

inline std::size_t positions_of(const Array& delta) { return delta.rank() >= 2 ? delta.dim(1) : 1; }

/// Zeroes every entry whose (sample, position) is padding. position_mask is B x P.
inline void apply_position_mask(Array& delta, const Array* position_mask) {
  if (position_mask == nullptr) return;
  const std::size_t b = delta.dim(0);
  const std::size_t p = positions_of(delta);
  if (position_mask->size() != b * p) {
    throw DimensionError("position mask " + shape_str(position_mask->shape()) + " does not match delta " +
                         shape_str(delta.shape()));
  }
  const std::size_t width = delta.size() / (b * p);
  for (std::size_t i = 0; i < b * p; ++i) {
    if ((*position_mask)[i] != 0.0) continue;
    for (std::size_t j = 0; j < width; ++j) delta[i * width + j] = 0.0;
  }
}

}  // namespace detail

/// Radial projection of each sample slice onto {||d||_F <= epsilon}.
inline Array project(Array delta, double epsilon) {
  if (epsilon < 0.0) throw ContractError("project: epsilon must be nonnegative");
  const std::size_t b = delta.dim(0);
  const std::size_t stride = delta.size() / b;
  for (std::size_t i = 0; i < b; ++i) {
    double* d = delta.data().data() + i * stride;
    double sq = 0.0;
    for (std::size_t j = 0; j < stride; ++j) sq += d[j] * d[j];
    const double norm = std::sqrt(sq);
    if (norm <= epsilon) continue;
    // Shrink the factor by ulps until the rounded result is inside the ball,
    // which makes a second projection a bitwise no-op.
    std::vector<double> original(d, d + stride);
    double factor = epsilon / norm;
    for (;;) {
      double sq2 = 0.0;
      for (std::size_t j = 0; j < stride; ++j) {
        d[j] = original[j] * factor;
        sq2 += d[j] * d[j];
      }
      if (std::sqrt(sq2) <= epsilon) break;
      factor = std::nextafter(factor, 0.0);
    }
  }
  return delta;
}

/// Uniform(-eps, eps) entries scaled by 1/sqrt(N), N = entries per sample, so
/// each sample starts inside the ball.
inline Array init_delta(const Shape& shape, double epsilon, std::mt19937_64& rng,
                        const Array* position_mask = nullptr) {
  if (epsilon < 0.0) throw ContractError("init_delta: epsilon must be nonnegative");
  Array delta(shape, 0.0);
  if (epsilon == 0.0) return delta;
  const double per_sample = static_cast<double>(delta.size() / shape.at(0));
  const double s = 1.0 / std::sqrt(per_sample);
  std::uniform_real_distribution<double> dist(-epsilon, epsilon);
  for (double& v : delta.values()) v = s * dist(rng);
  detail::apply_position_mask(delta, position_mask);
  return delta;
}

/// One normalized PGD step per sample: d <- P(d + step * g / ||g||_F).
/// Samples with ||g||_F <= 1e-12 keep their delta.
inline Array ascent_step(const Array& delta, Array grad, double adv_step_size, double epsilon,
                         const Array* position_mask = nullptr) {
  if (delta.shape() != grad.shape()) {
    throw DimensionError("ascent_step: delta " + shape_str(delta.shape()) + " vs grad " + shape_str(grad.shape()));
  }
  if (!grad.all_finite()) throw NumericDomainError("ascent_step: non-finite gradient");
  detail::apply_position_mask(grad, position_mask);
  Array out = delta;
  const std::size_t b = delta.dim(0);
  const std::size_t stride = delta.size() / b;
  for (std::size_t i = 0; i < b; ++i) {
    const double* g = grad.data().data() + i * stride;
    double sq = 0.0;
    for (std::size_t j = 0; j < stride; ++j) sq += g[j] * g[j];
    const double norm = std::sqrt(sq);
    if (norm <= kZeroGradGuard) continue;
    const double step = adv_step_size / norm;
    double* d = out.data().data() + i * stride;
    for (std::size_t j = 0; j < stride; ++j) d[j] += step * g[j];
  }
  out = project(std::move(out), epsilon);
  detail::apply_position_mask(out, position_mask);
  return out;
}

}  // namespace villa
