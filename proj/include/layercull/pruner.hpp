#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "layercull/calib.hpp"
#include "layercull/compensate.hpp"
#include "layercull/error.hpp"
#include "layercull/eval.hpp"
#include "layercull/metrics.hpp"
#include "layercull/model.hpp"
#include "layercull/prune_log.hpp"

namespace layercull {

template <typename T>
struct IterationView {
  std::size_t step;
  const ModelWeights<T>& weights;  // model the metric was scored on
  const ModelConfig& config;
  const MetricReport& report;
};

template <typename T>
struct PruneOptions {
  bool compensate = true;
  ProtectRule protect_rule = ProtectRule::kAuto;
  // Called after each scoring pass, before the chosen layer is removed.
  std::function<void(const IterationView<T>&)> observer;
};

template <typename T>
struct PruneResult {
  ModelWeights<T> weights;
  ModelConfig config;
  PruneLog log;
  std::vector<MetricReport> reports;
};

namespace detail {

inline PruneLog new_log(const CalibrationSet& calib, const ModelConfig& cfg, std::string mode,
                        bool compensate) {
  PruneLog log;
  log.seed = calib.seed;
  log.calib_fingerprint = calib.fingerprint();
  log.mode = std::move(mode);
  log.compensate = compensate;
  log.original_n_layers = cfg.n_layers;
  return log;
}

inline void check_removal_budget(Metric metric, const ModelConfig& cfg, std::size_t n_remove,
                                 ProtectRule rule, bool iterative) {
  if (n_remove >= cfg.n_layers) {
    throw Error(ErrorKind::kConfig, "cannot remove " + std::to_string(n_remove) + " of " +
                                        std::to_string(cfg.n_layers) + " layers");
  }
  if (!uses_protect_rule(metric)) return;
  // Every depth the loop will score at must leave at least one candidate;
  // a one-shot pass needs n_remove candidates at the starting depth.
  const std::size_t last_depth = iterative ? cfg.n_layers - n_remove + 1 : cfg.n_layers;
  for (std::size_t depth = cfg.n_layers; depth >= last_depth && depth > 0; --depth) {
    const std::size_t free = depth - protected_layers(depth, rule).size();
    const std::size_t needed = iterative ? 1 : n_remove;
    if (free < needed) {
      throw Error(ErrorKind::kConfig,
                  metric_name(metric) + ": protect rule leaves " + std::to_string(free) +
                      " candidate layers at depth " + std::to_string(depth) + ", need " +
                      std::to_string(needed));
    }
  }
}

}  // namespace detail

// Iterative prune-and-compensate: each step scores the current (already
// compensated) model, removes the chosen layer, and fuses the alpha measured
// for it before the next scoring pass. With compensate = false alpha is still
// measured and logged but not fused.
template <typename T>
PruneResult<T> prune_and_comp(const ModelWeights<T>& weights, const ModelConfig& cfg,
                              const CalibrationSet& calib, Metric metric, std::size_t n_remove,
                              const PruneOptions<T>& opts = {}) {
  if (metric == Metric::kCL) {
    throw Error(ErrorKind::kConfig,
                "CL scores contiguous windows and runs one-shot only; use one-shot mode");
  }
  detail::check_removal_budget(metric, cfg, n_remove, opts.protect_rule, /*iterative=*/true);

  PruneResult<T> result{weights, cfg, detail::new_log(calib, cfg, "iterative", opts.compensate),
                        {}};
  std::vector<std::size_t> origin(cfg.n_layers);
  std::iota(origin.begin(), origin.end(), std::size_t{0});
  MetricOptions mopts;
  mopts.protect_rule = opts.protect_rule;

  for (std::size_t step = 0; step < n_remove; ++step) {
    MetricReport report = select_prune_target(metric, result.weights, result.config, calib, mopts);
    if (opts.observer) opts.observer({step, result.weights, result.config, report});
    const std::size_t idx = report.chosen_index;
    auto pruned = prune_and_fuse(result.weights, result.config, calib, idx, 1, origin,
                                 opts.compensate);
    pruned.entry.step = step;
    pruned.entry.metric_name = metric_name(metric);
    result.log.entries.push_back(pruned.entry);
    result.weights = std::move(pruned.weights);
    result.config = pruned.config;
    origin.erase(origin.begin() + static_cast<std::ptrdiff_t>(idx));
    result.reports.push_back(std::move(report));
  }
  return result;
}

// One scoring pass on the original model. Per-layer metrics remove the
// n_remove most removable layers; CL removes its best window of n_remove
// layers. With compensate, every alpha is measured on the original model and
// fused at its own junction, deepest removal first.
template <typename T>
PruneResult<T> one_shot_prune(const ModelWeights<T>& weights, const ModelConfig& cfg,
                              const CalibrationSet& calib, Metric metric, std::size_t n_remove,
                              const PruneOptions<T>& opts = {}) {
  detail::check_removal_budget(metric, cfg, n_remove, opts.protect_rule, /*iterative=*/false);
  PruneResult<T> result{weights, cfg, detail::new_log(calib, cfg, "one-shot", opts.compensate),
                        {}};
  if (n_remove == 0) return result;

  MetricOptions mopts;
  mopts.protect_rule = opts.protect_rule;
  mopts.window_len = metric == Metric::kCL ? n_remove : 1;
  MetricReport report = select_prune_target(metric, weights, cfg, calib, mopts);
  if (opts.observer) opts.observer({0, weights, cfg, report});

  if (metric == Metric::kCL) {
    auto pruned = prune_and_fuse(weights, cfg, calib, report.chosen_index, n_remove, {},
                                 opts.compensate);
    pruned.entry.metric_name = metric_name(metric);
    result.log.entries.push_back(pruned.entry);
    result.weights = std::move(pruned.weights);
    result.config = pruned.config;
    result.reports.push_back(std::move(report));
    return result;
  }

  auto order = removal_order(report);
  if (order.size() < n_remove) {
    throw Error(ErrorKind::kConfig, metric_name(metric) + ": only " +
                                        std::to_string(order.size()) +
                                        " candidate layers for " + std::to_string(n_remove) +
                                        " removals");
  }
  order.resize(n_remove);
  std::sort(order.rbegin(), order.rend());

  std::vector<double> alphas;
  for (const auto l : order) alphas.push_back(estimate_alpha(weights, cfg, calib, l).alpha);

  // Deepest first, so shallower current indices still equal original ones.
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t l = order[i];
    auto pruned = prune_layers(std::move(result.weights), result.config, l);
    if (opts.compensate) fuse_alpha_inplace(pruned.weights, l, alphas[i]);
    result.weights = std::move(pruned.weights);
    result.config = pruned.config;

    PruneLogEntry e;
    e.step = i;
    e.metric_name = metric_name(metric);
    e.removed_original_index = l;
    e.removed_current_index = l;
    e.alpha = alphas[i];
    e.gain_ratio_percent = (alphas[i] - 1.0) * 100.0;
    e.fused = opts.compensate;
    result.log.entries.push_back(e);
  }
  result.reports.push_back(std::move(report));
  return result;
}

struct AblationRow {
  std::string arm;
  bool iterative = false;
  bool compensate = false;
  std::size_t remaining_layers = 0;
  double perplexity = 0.0;
  PruneLog log;
};

// The four arms: one-shot, +IterPrune, +MagComp, and both (Prune&Comp). Each
// pruned model is evaluated on eval_sequences.
template <typename T>
std::vector<AblationRow> run_ablation_matrix(const ModelWeights<T>& weights,
                                             const ModelConfig& cfg, const CalibrationSet& calib,
                                             const TokenBatch& eval_sequences, Metric metric,
                                             std::size_t n_remove,
                                             ProtectRule rule = ProtectRule::kAuto) {
  struct Arm {
    const char* name;
    bool iterative;
    bool compensate;
  };
  static constexpr Arm kArms[] = {{"one-shot", false, false},
                                  {"+IterPrune", true, false},
                                  {"+MagComp", false, true},
                                  {"+IterPrune+MagComp", true, true}};
  std::vector<AblationRow> rows;
  for (const auto& arm : kArms) {
    PruneOptions<T> opts;
    opts.compensate = arm.compensate;
    opts.protect_rule = rule;
    auto pruned = arm.iterative ? prune_and_comp(weights, cfg, calib, metric, n_remove, opts)
                                : one_shot_prune(weights, cfg, calib, metric, n_remove, opts);
    AblationRow row;
    row.arm = arm.name;
    row.iterative = arm.iterative;
    row.compensate = arm.compensate;
    row.remaining_layers = pruned.config.n_layers;
    row.perplexity = evaluate_perplexity(pruned.weights, pruned.config, eval_sequences).perplexity;
    row.log = std::move(pruned.log);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace layercull
