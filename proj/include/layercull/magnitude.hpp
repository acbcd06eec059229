#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "layercull/calib.hpp"
#include "layercull/error.hpp"
#include "layercull/model.hpp"

namespace layercull {

// Sequences per traced forward. Statistics are per sequence, so chunking only
// bounds memory; results do not depend on it.
inline constexpr std::size_t kTraceChunk = 8;

// Added to every channel-norm denominator so dead channels stay finite.
inline constexpr double kChannelNormFloor = 1e-12;

struct GainReport {
  std::vector<double> delta_percent;  // one entry per layer
  std::string computed_over;          // calibration fingerprint
};

struct CompensationFactor {
  double alpha = 1.0;
  std::size_t span_start = 0;
  std::size_t span_len = 1;
  std::size_t sample_count = 0;
};

// Runs traced forwards over `sequences` in chunks and calls
// fn(trace, row_in_chunk) once per sequence, in sequence order.
template <typename T, typename Fn>
void for_each_traced_sequence(const ModelWeights<T>& weights, const ModelConfig& cfg,
                              const TokenBatch& sequences, Fn&& fn) {
  const std::size_t s = sequences.dim(0);
  for (std::size_t start = 0; start < s; start += kTraceChunk) {
    const std::size_t n = std::min(kTraceChunk, s - start);
    const auto result =
        forward(weights, cfg, slice_rows(sequences, start, n), /*capture_trace=*/true);
    for (std::size_t i = 0; i < n; ++i) fn(*result.trace, i);
  }
}

// (1/C) sum_k ||to[:,k]||_1 / ||from[:,k]||_1 for sequence b of two [B x T x C]
// trace states; the L1 norm runs over the token axis.
template <typename T>
double channel_gain(const Tensor<T>& from, const Tensor<T>& to, std::size_t b) {
  const std::size_t len = from.dim(1), c = from.dim(2);
  std::vector<double> num(c, 0.0), den(c, 0.0);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t k = 0; k < c; ++k) {
      den[k] += std::abs(static_cast<double>(from.at(b, t, k)));
      num[k] += std::abs(static_cast<double>(to.at(b, t, k)));
    }
  }
  double sum = 0.0;
  for (std::size_t k = 0; k < c; ++k) sum += num[k] / (den[k] + kChannelNormFloor);
  return sum / static_cast<double>(c);
}

namespace detail {

// Mean over sequences of channel_gain(X^(start), X^(start + span)) for each
// requested start.
template <typename T>
std::vector<double> mean_span_gains(const ModelWeights<T>& weights, const ModelConfig& cfg,
                                    const CalibrationSet& calib, std::size_t span,
                                    const std::vector<std::size_t>& starts) {
  std::vector<double> sums(starts.size(), 0.0);
  for_each_traced_sequence(weights, cfg, calib.sequences,
                           [&](const HiddenTrace<T>& trace, std::size_t b) {
                             for (std::size_t i = 0; i < starts.size(); ++i) {
                               sums[i] += channel_gain(trace.states[starts[i]],
                                                       trace.states[starts[i] + span], b);
                             }
                           });
  for (auto& v : sums) {
    v /= static_cast<double>(calib.count);
    if (!std::isfinite(v)) throw Error(ErrorKind::kNumeric, "non-finite magnitude gain");
  }
  return sums;
}

}  // namespace detail

// Per-layer magnitude gain ratio in percent: (mean gain - 1) * 100.
template <typename T>
GainReport gain_ratios(const ModelWeights<T>& weights, const ModelConfig& cfg,
                       const CalibrationSet& calib) {
  std::vector<std::size_t> starts(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) starts[l] = l;
  GainReport report;
  report.computed_over = calib.fingerprint();
  report.delta_percent = detail::mean_span_gains(weights, cfg, calib, 1, starts);
  for (auto& v : report.delta_percent) v = (v - 1.0) * 100.0;
  return report;
}

// Compensation factor for removing layers [span_start, span_start + span_len)
// of the current model: the same statistic taken between the span endpoints.
template <typename T>
CompensationFactor estimate_alpha(const ModelWeights<T>& weights, const ModelConfig& cfg,
                                  const CalibrationSet& calib, std::size_t span_start,
                                  std::size_t span_len = 1) {
  if (span_len == 0 || span_start + span_len > cfg.n_layers) {
    throw Error(ErrorKind::kIndex, "span [" + std::to_string(span_start) + ", " +
                                       std::to_string(span_start + span_len) +
                                       ") outside a model of " + std::to_string(cfg.n_layers) +
                                       " layers");
  }
  CompensationFactor f;
  f.span_start = span_start;
  f.span_len = span_len;
  f.sample_count = calib.count;
  f.alpha = detail::mean_span_gains(weights, cfg, calib, span_len, {span_start})[0];
  return f;
}

}  // namespace layercull
