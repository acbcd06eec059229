#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "layercull/calib.hpp"
#include "layercull/model.hpp"

namespace layercull {

// Sequences per forward while evaluating; bounds the logits buffer.
inline constexpr std::size_t kEvalChunk = 8;

struct PerplexityResult {
  double perplexity = 0.0;
  double mean_nll = 0.0;
  std::size_t positions = 0;
  std::vector<std::string> warnings;  // e.g. overflow to +inf
};

// exp of the mean next-token NLL over every position of every sequence.
// Optional removed/junction_scales evaluate the runtime skip semantics of
// forward_with_skip instead of the plain model.
template <typename T>
PerplexityResult evaluate_perplexity(const ModelWeights<T>& weights, const ModelConfig& cfg,
                                     const TokenBatch& sequences,
                                     const std::set<std::size_t>& removed = {},
                                     const std::map<std::size_t, double>& junction_scales = {}) {
  const std::size_t s = sequences.dim(0);
  std::vector<double> nll;
  for (std::size_t start = 0; start < s; start += kEvalChunk) {
    const auto [inputs, targets] =
        shift_for_next_token(slice_rows(sequences, start, std::min(kEvalChunk, s - start)));
    const Tensor<T> logits =
        removed.empty() && junction_scales.empty()
            ? forward(weights, cfg, inputs).logits
            : forward_with_skip(weights, cfg, inputs, removed, junction_scales);
    const auto part = token_nll(logits, targets);
    nll.insert(nll.end(), part.begin(), part.end());
  }
  PerplexityResult r;
  double sum = 0.0;
  for (const double v : nll) sum += v;
  r.positions = nll.size();
  r.mean_nll = sum / static_cast<double>(nll.size());
  r.perplexity = std::exp(r.mean_nll);
  if (std::isinf(r.perplexity) || std::isnan(r.perplexity)) {
    r.perplexity = std::numeric_limits<double>::infinity();
    r.warnings.push_back("perplexity overflowed (mean NLL " + std::to_string(r.mean_nll) + ")");
  }
  return r;
}

template <typename T>
double perplexity(const ModelWeights<T>& weights, const ModelConfig& cfg,
                  const CalibrationSet& data) {
  return evaluate_perplexity(weights, cfg, data.sequences).perplexity;
}

}  // namespace layercull
