#pragma once

#include <cmath>
#include <algorithm>
#include <cstdint>
#include <vector>

#include "layercull/model.hpp"
#include "layercull/rng.hpp"

namespace layercull {

struct ToyInit {
  double embed_scale = 1.0;  // embedding entries ~ U(-s, s)
  double proj_scale = 1.0;   // projections ~ U(-s, s) / sqrt(fan_in) * sqrt(3)
  double head_scale = 3.0;   // larger values give peakier next-token distributions
  double gamma_jitter = 0.1;
  // Multiplies the embedding and every w_o / w_down. The function computed is
  // unchanged up to norm eps; only the residual stream gets larger.
  double stream_scale = 1.0;
};

template <typename T>
ModelWeights<T> random_weights(const ModelConfig& cfg, std::uint64_t seed,
                               const ToyInit& init = {}) {
  cfg.validate();
  PortableRng rng(seed);
  ModelWeights<T> w = make_zero_weights<T>(cfg);
  auto fill = [&](Tensor<T>& t, double bound) {
    for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
  };
  auto fill_gamma = [&](Tensor<T>& t) {
    for (auto& v : t.storage()) {
      v = static_cast<T>(1.0 + rng.uniform(-init.gamma_jitter, init.gamma_jitter));
    }
  };
  const double sqrt3 = std::sqrt(3.0);
  const double in_c = init.proj_scale * sqrt3 / std::sqrt(static_cast<double>(cfg.d_model));
  const double in_ff = init.proj_scale * sqrt3 / std::sqrt(static_cast<double>(cfg.d_ff));
  fill(w.w_embed, init.embed_scale);
  for (auto& l : w.layers) {
    fill_gamma(l.norm_attn_gamma);
    fill(l.w_q, in_c);
    fill(l.w_k, in_c);
    fill(l.w_v, in_c);
    fill(l.w_o, in_c);
    fill_gamma(l.norm_mlp_gamma);
    fill(l.w_gate, in_c);
    fill(l.w_up, in_c);
    fill(l.w_down, in_ff);
  }
  fill_gamma(w.final_norm_gamma);
  fill(w.lm_head, init.head_scale * sqrt3 / std::sqrt(static_cast<double>(cfg.d_model)));
  if (init.stream_scale != 1.0) {
    const T s = static_cast<T>(init.stream_scale);
    w.w_embed *= s;
    for (auto& l : w.layers) {
      l.w_o *= s;
      l.w_down *= s;
    }
  }
  return w;
}

// Zeroes both residual branches of a layer, making it an exact identity.
template <typename T>
void make_identity_layer(ModelWeights<T>& w, std::size_t layer) {
  w.layers.at(layer).w_o.fill(T{});
  w.layers.at(layer).w_down.fill(T{});
}

// Draws a token stream from the model itself: contiguous segments of
// segment_len tokens, each sampled autoregressively at the given temperature.
// Text produced this way has a known-good predictor (the unpruned model).
template <typename T>
std::vector<std::int32_t> sample_corpus(const ModelWeights<T>& w, const ModelConfig& cfg,
                                        std::size_t n_tokens, std::size_t segment_len,
                                        double temperature, std::uint64_t seed) {
  PortableRng rng(seed);
  std::vector<std::int32_t> out;
  out.reserve(n_tokens);
  segment_len = std::min(segment_len, cfg.max_seq_len);
  std::vector<double> probs(cfg.vocab_size);
  while (out.size() < n_tokens) {
    std::vector<std::int32_t> seg{static_cast<std::int32_t>(rng.below(cfg.vocab_size))};
    while (seg.size() < segment_len && out.size() + seg.size() < n_tokens) {
      TokenBatch tokens({1, seg.size()}, seg);
      const auto logits = forward(w, cfg, tokens).logits;
      const std::size_t last = (seg.size() - 1) * cfg.vocab_size;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < cfg.vocab_size; ++i) {
        mx = std::max(mx, static_cast<double>(logits[last + i]) / temperature);
      }
      double sum = 0.0;
      for (std::size_t i = 0; i < cfg.vocab_size; ++i) {
        probs[i] = std::exp(static_cast<double>(logits[last + i]) / temperature - mx);
        sum += probs[i];
      }
      double u = rng.uniform() * sum;
      std::size_t pick = cfg.vocab_size - 1;
      for (std::size_t i = 0; i < cfg.vocab_size; ++i) {
        if (u < probs[i]) {
          pick = i;
          break;
        }
        u -= probs[i];
      }
      seg.push_back(static_cast<std::int32_t>(pick));
    }
    out.insert(out.end(), seg.begin(), seg.end());
  }
  out.resize(n_tokens);
  return out;
}

}  // namespace layercull
