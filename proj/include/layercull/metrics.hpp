#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "layercull/calib.hpp"
#include "layercull/error.hpp"
#include "layercull/eval.hpp"
#include "layercull/magnitude.hpp"
#include "layercull/model.hpp"

namespace layercull {

enum class Metric { kBI, kCL, kPPL, kTaylorPlus, kMagPlus };

inline constexpr Metric kAllMetrics[] = {Metric::kBI, Metric::kCL, Metric::kPPL,
                                         Metric::kTaylorPlus, Metric::kMagPlus};

inline std::string metric_name(Metric m) {
  switch (m) {
    case Metric::kBI: return "BI";
    case Metric::kCL: return "CL";
    case Metric::kPPL: return "PPL";
    case Metric::kTaylorPlus: return "TAYLOR_PLUS";
    case Metric::kMagPlus: return "MAG_PLUS";
  }
  return "?";
}

// Spelling used on the command line.
inline std::string metric_flag(Metric m) {
  switch (m) {
    case Metric::kBI: return "bi";
    case Metric::kCL: return "cl";
    case Metric::kPPL: return "ppl";
    case Metric::kTaylorPlus: return "taylor+";
    case Metric::kMagPlus: return "mag+";
  }
  return "?";
}

// Accepts either spelling, case-insensitively.
inline Metric parse_metric(std::string name) {
  std::transform(name.begin(), name.end(), name.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (const Metric m : kAllMetrics) {
    std::string canonical = metric_name(m);
    std::transform(canonical.begin(), canonical.end(), canonical.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (name == metric_flag(m) || name == canonical) return m;
  }
  throw Error(ErrorKind::kConfig,
              "unknown metric '" + name + "' (valid: bi, cl, ppl, taylor+, mag+)");
}

// Higher score means more redundant for the cosine metrics; lower score means
// less important for the others.
inline bool higher_is_redundant(Metric m) { return m == Metric::kBI || m == Metric::kCL; }

inline bool uses_protect_rule(Metric m) {
  return m == Metric::kTaylorPlus || m == Metric::kMagPlus;
}

enum class ProtectRule {
  kAuto,      // first 4 and last 2 layers; scaled rule when that leaves nothing
  kAbsolute,  // always first 4 and last 2
  kScaled,    // always first ceil(4L/32) and last ceil(2L/32)
};

// Layers the Taylor+ / Mag+ scores may never select in a model of n_layers.
inline std::set<std::size_t> protected_layers(std::size_t n_layers,
                                              ProtectRule rule = ProtectRule::kAuto) {
  std::size_t head = 4, tail = 2;
  const bool scaled = rule == ProtectRule::kScaled || (rule == ProtectRule::kAuto && n_layers <= 6);
  if (scaled) {
    head = (4 * n_layers + 31) / 32;
    tail = (2 * n_layers + 31) / 32;
  }
  std::set<std::size_t> out;
  for (std::size_t i = 0; i < std::min(head, n_layers); ++i) out.insert(i);
  for (std::size_t i = 0; i < std::min(tail, n_layers); ++i) out.insert(n_layers - 1 - i);
  return out;
}

struct MetricOptions {
  std::size_t window_len = 1;  // CL only
  ProtectRule protect_rule = ProtectRule::kAuto;
  std::set<std::size_t> extra_protected;  // caller-imposed exclusions, any metric
};

struct MetricReport {
  Metric metric = Metric::kBI;
  std::vector<double> scores;  // per layer, or per window start for CL
  std::set<std::size_t> protected_indices;
  std::size_t chosen_index = 0;
  std::size_t window_len = 1;
  std::size_t zero_vector_count = 0;  // cosine metrics: zero hidden states scored as 0
};

// Candidate indices ordered from most to least removable, protected ones
// excluded. Ties resolve to the lowest index.
inline std::vector<std::size_t> removal_order(const MetricReport& r) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < r.scores.size(); ++i) {
    if (!r.protected_indices.count(i)) idx.push_back(i);
  }
  const bool desc = higher_is_redundant(r.metric);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const double sa = r.scores[a], sb = r.scores[b];
    return desc ? sa > sb : sa < sb;
  });
  return idx;
}

namespace detail {

inline void finish_report(MetricReport& r) {
  const auto order = removal_order(r);
  if (order.empty()) {
    throw Error(ErrorKind::kConfig, metric_name(r.metric) + ": no candidate layers remain after " +
                                        std::to_string(r.protected_indices.size()) +
                                        " protected indices");
  }
  r.chosen_index = order.front();
}

// Mean cosine between X^(l)_t and X^(l+n)_t over every sequence and token.
template <typename T>
MetricReport cosine_scores(const ModelWeights<T>& weights, const ModelConfig& cfg,
                           const CalibrationSet& calib, std::size_t n, Metric metric) {
  MetricReport r;
  r.metric = metric;
  r.window_len = n;
  const std::size_t candidates = cfg.n_layers - n + 1;
  std::vector<double> sums(candidates, 0.0);
  for_each_traced_sequence(weights, cfg, calib.sequences, [&](const HiddenTrace<T>& trace,
                                                              std::size_t b) {
    const std::size_t len = trace.states[0].dim(1), c = trace.states[0].dim(2);
    for (std::size_t l = 0; l < candidates; ++l) {
      const auto& a = trace.states[l];
      const auto& z = trace.states[l + n];
      for (std::size_t t = 0; t < len; ++t) {
        double dot = 0.0, na = 0.0, nz = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
          const double x = a.at(b, t, k), y = z.at(b, t, k);
          dot += x * y;
          na += x * x;
          nz += y * y;
        }
        if (na == 0.0 || nz == 0.0) {
          ++r.zero_vector_count;
          continue;
        }
        sums[l] += dot / std::sqrt(na * nz);
      }
    }
  });
  const double samples = static_cast<double>(calib.count * calib.seq_len);
  for (auto& s : sums) s /= samples;
  r.scores = std::move(sums);
  return r;
}

template <typename T>
double layer_linear_sum(const LayerWeights<T>& layer, const LayerWeights<T>* grads) {
  double sum = 0.0;
  if (!grads) {
    for_each_linear(layer, [&](const char*, const Tensor<T>& w) {
      for (const T v : w.storage()) sum += std::abs(static_cast<double>(v));
    });
    return sum;
  }
  std::vector<const Tensor<T>*> g;
  for_each_linear(*grads, [&](const char*, const Tensor<T>& t) { g.push_back(&t); });
  std::size_t i = 0;
  for_each_linear(layer, [&](const char*, const Tensor<T>& w) {
    const Tensor<T>& gw = *g[i++];
    for (std::size_t e = 0; e < w.size(); ++e) {
      sum += std::abs(static_cast<double>(gw[e]) * static_cast<double>(w[e]));
    }
  });
  return sum;
}

inline void require_layers(const ModelConfig& cfg, std::size_t minimum, Metric m) {
  if (cfg.n_layers < minimum) {
    throw Error(ErrorKind::kConfig, metric_name(m) + " needs at least " +
                                        std::to_string(minimum) + " layers, model has " +
                                        std::to_string(cfg.n_layers));
  }
}

}  // namespace detail

// Block influence: mean cosine similarity between a layer's input and output.
template <typename T>
MetricReport bi_scores(const ModelWeights<T>& weights, const ModelConfig& cfg,
                       const CalibrationSet& calib, const MetricOptions& opts = {}) {
  detail::require_layers(cfg, 2, Metric::kBI);
  MetricReport r = detail::cosine_scores(weights, cfg, calib, 1, Metric::kBI);
  r.protected_indices = opts.extra_protected;
  detail::finish_report(r);
  return r;
}

// Cosine similarity across a window of n contiguous layers, scored per start.
template <typename T>
MetricReport cl_scores(const ModelWeights<T>& weights, const ModelConfig& cfg,
                       const CalibrationSet& calib, std::size_t n,
                       const MetricOptions& opts = {}) {
  if (n == 0 || n > cfg.n_layers) {
    throw Error(ErrorKind::kConfig, "CL window length " + std::to_string(n) +
                                        " invalid for a model of " +
                                        std::to_string(cfg.n_layers) + " layers");
  }
  MetricReport r = detail::cosine_scores(weights, cfg, calib, n, Metric::kCL);
  r.protected_indices = opts.extra_protected;
  detail::finish_report(r);
  return r;
}

// Calibration perplexity with each single layer skipped (no compensation).
template <typename T>
MetricReport ppl_scores(const ModelWeights<T>& weights, const ModelConfig& cfg,
                        const CalibrationSet& calib, const MetricOptions& opts = {}) {
  detail::require_layers(cfg, 2, Metric::kPPL);
  MetricReport r;
  r.metric = Metric::kPPL;
  r.protected_indices = opts.extra_protected;
  r.scores.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    r.scores[l] = evaluate_perplexity(weights, cfg, calib.sequences, {l}).perplexity;
  }
  detail::finish_report(r);
  return r;
}

// Per layer: sum over its projection weights of |dL(D)/dW * W|, with L(D) the
// mean next-token loss over the whole calibration set.
template <typename T>
MetricReport taylor_scores(const ModelWeights<T>& weights, const ModelConfig& cfg,
                           const CalibrationSet& calib, const MetricOptions& opts = {}) {
  MetricReport r;
  r.metric = Metric::kTaylorPlus;
  r.protected_indices = protected_layers(cfg.n_layers, opts.protect_rule);
  r.protected_indices.insert(opts.extra_protected.begin(), opts.extra_protected.end());
  const auto [inputs, targets] = shift_for_next_token(calib.sequences);
  const auto grads = backward_weight_grads(weights, cfg, inputs, targets);
  r.scores.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    r.scores[l] = detail::layer_linear_sum(weights.layers[l], &grads.tensors.layers[l]);
  }
  detail::finish_report(r);
  return r;
}

// Per layer: sum of |W| over its projection weights. Needs no calibration data.
template <typename T>
MetricReport mag_scores(const ModelWeights<T>& weights, const ModelConfig& cfg,
                        const MetricOptions& opts = {}) {
  MetricReport r;
  r.metric = Metric::kMagPlus;
  r.protected_indices = protected_layers(cfg.n_layers, opts.protect_rule);
  r.protected_indices.insert(opts.extra_protected.begin(), opts.extra_protected.end());
  r.scores.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    r.scores[l] = detail::layer_linear_sum<T>(weights.layers[l], nullptr);
  }
  detail::finish_report(r);
  return r;
}

template <typename T>
MetricReport select_prune_target(Metric metric, const ModelWeights<T>& weights,
                                 const ModelConfig& cfg, const CalibrationSet& calib,
                                 const MetricOptions& opts = {}) {
  switch (metric) {
    case Metric::kBI: return bi_scores(weights, cfg, calib, opts);
    case Metric::kCL: return cl_scores(weights, cfg, calib, opts.window_len, opts);
    case Metric::kPPL: return ppl_scores(weights, cfg, calib, opts);
    case Metric::kTaylorPlus: return taylor_scores(weights, cfg, calib, opts);
    case Metric::kMagPlus: return mag_scores(weights, cfg, opts);
  }
  throw Error(ErrorKind::kConfig, "unhandled metric");
}

}  // namespace layercull
