#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>

#include "layercull/calib.hpp"
#include "layercull/error.hpp"
#include "layercull/magnitude.hpp"
#include "layercull/model.hpp"
#include "layercull/prune_log.hpp"

namespace layercull {

template <typename T>
struct PrunedModel {
  ModelWeights<T> weights;
  ModelConfig config;
};

// Drops layers [start, start + span). Every other tensor is copied unchanged.
template <typename T>
PrunedModel<T> prune_layers(ModelWeights<T> weights, ModelConfig cfg, std::size_t start,
                            std::size_t span = 1) {
  if (span == 0 || start + span > cfg.n_layers) {
    throw Error(ErrorKind::kIndex, "cannot remove layers [" + std::to_string(start) + ", " +
                                       std::to_string(start + span) + ") from a model of " +
                                       std::to_string(cfg.n_layers) + " layers");
  }
  const auto first = weights.layers.begin() + static_cast<std::ptrdiff_t>(start);
  weights.layers.erase(first, first + static_cast<std::ptrdiff_t>(span));
  cfg.n_layers -= span;
  return {std::move(weights), cfg};
}

// Folds a residual-stream scale into the weights: the embedding and the
// attention-output and down projections of every layer before `junction` are
// multiplied by alpha. Because every branch reads the stream through a
// scale-invariant RMSNorm, the stream entering layer `junction` becomes alpha
// times what it was and nothing else changes. junction == n_layers addresses
// the final norm.
template <typename T>
void fuse_alpha_inplace(ModelWeights<T>& weights, std::size_t junction, double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw Error(ErrorKind::kInput, "compensation factor must be positive and finite, got " +
                                       std::to_string(alpha));
  }
  if (junction > weights.layers.size()) {
    throw Error(ErrorKind::kIndex, "junction " + std::to_string(junction) +
                                       " beyond a model of " +
                                       std::to_string(weights.layers.size()) + " layers");
  }
  const T a = static_cast<T>(alpha);
  weights.w_embed *= a;
  for (std::size_t k = 0; k < junction; ++k) {
    weights.layers[k].w_o *= a;
    weights.layers[k].w_down *= a;
  }
}

template <typename T>
ModelWeights<T> fuse_alpha(ModelWeights<T> weights, std::size_t junction, double alpha) {
  fuse_alpha_inplace(weights, junction, alpha);
  return weights;
}

template <typename T>
struct PruneStepResult {
  ModelWeights<T> weights;
  ModelConfig config;
  PruneLogEntry entry;
};

// Measures alpha for the span on the current model, removes the span, then
// fuses alpha at the junction it leaves behind. `origin[i]` gives the
// unpruned-model index of current layer i; empty means the model is unpruned.
template <typename T>
PruneStepResult<T> prune_and_fuse(const ModelWeights<T>& weights, const ModelConfig& cfg,
                                  const CalibrationSet& calib, std::size_t start,
                                  std::size_t span = 1, std::span<const std::size_t> origin = {},
                                  bool fuse = true) {
  const CompensationFactor factor = estimate_alpha(weights, cfg, calib, start, span);
  auto pruned = prune_layers(weights, cfg, start, span);
  if (fuse) fuse_alpha_inplace(pruned.weights, start, factor.alpha);

  PruneStepResult<T> out{std::move(pruned.weights), pruned.config, {}};
  out.entry.removed_current_index = start;
  out.entry.removed_original_index = origin.empty() ? start : origin[start];
  out.entry.span_len = span;
  out.entry.alpha = factor.alpha;
  out.entry.gain_ratio_percent = (factor.alpha - 1.0) * 100.0;
  out.entry.fused = fuse;
  return out;
}

// Replays one logged removal on the model it was recorded against.
template <typename T>
PrunedModel<T> apply_prune_entry(ModelWeights<T> weights, const ModelConfig& cfg,
                                 const PruneLogEntry& e) {
  auto out = prune_layers(std::move(weights), cfg, e.removed_current_index, e.span_len);
  if (e.fused) fuse_alpha_inplace(out.weights, e.removed_current_index, e.alpha);
  return out;
}

// Rebuilds a pruned model from the unpruned weights and its prune log.
template <typename T>
PrunedModel<T> apply_prune_log(ModelWeights<T> weights, const ModelConfig& cfg,
                               const PruneLog& log) {
  if (log.original_n_layers != cfg.n_layers) {
    throw Error(ErrorKind::kSchema, "prune log was recorded on " +
                                        std::to_string(log.original_n_layers) +
                                        " layers, model has " + std::to_string(cfg.n_layers));
  }
  validate_prune_log(log);
  PrunedModel<T> m{std::move(weights), cfg};
  for (const auto& e : log.entries) m = apply_prune_entry(std::move(m.weights), m.config, e);
  return m;
}

}  // namespace layercull
