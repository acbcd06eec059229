#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "layercull/error.hpp"
#include "layercull/parallel.hpp"
#include "layercull/tensor.hpp"

namespace layercull {

using TokenBatch = Tensor<std::int32_t>;

struct ModelConfig {
  std::size_t n_layers = 0;
  std::size_t d_model = 0;
  std::size_t n_heads = 0;
  std::size_t d_head = 0;
  std::size_t d_ff = 0;
  std::size_t vocab_size = 0;
  double norm_eps = 1e-6;
  double rope_theta = 10000.0;
  std::size_t max_seq_len = 0;

  bool operator==(const ModelConfig&) const = default;

  // n_layers may be zero: a fully pruned model is embed -> final norm -> head.
  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorKind::kConfig, m); };
    if (d_model == 0 || n_heads == 0 || d_head == 0 || d_ff == 0 || max_seq_len == 0) {
      fail("model dimensions must be positive");
    }
    if (vocab_size < 2) fail("vocab_size must be at least 2");
    if (d_model != n_heads * d_head) {
      fail("d_model (" + std::to_string(d_model) + ") != n_heads * d_head (" +
           std::to_string(n_heads) + " * " + std::to_string(d_head) + ")");
    }
    if (d_head % 2 != 0) fail("d_head must be even for rotary embeddings");
    if (!(norm_eps > 0.0)) fail("norm_eps must be positive");
    if (!(rope_theta > 0.0)) fail("rope_theta must be positive");
  }
};

template <typename T>
struct LayerWeights {
  Tensor<T> norm_attn_gamma;  // [C]
  Tensor<T> w_q, w_k, w_v;    // [C x C]
  Tensor<T> w_o;              // [C x C]
  Tensor<T> norm_mlp_gamma;   // [C]
  Tensor<T> w_gate, w_up;     // [C x d_ff]
  Tensor<T> w_down;           // [d_ff x C]

  bool operator==(const LayerWeights&) const = default;
};

template <typename T>
struct ModelWeights {
  using value_type = T;

  Tensor<T> w_embed;  // [vocab x C]
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_norm_gamma;  // [C]
  Tensor<T> lm_head;           // [C x vocab]

  bool operator==(const ModelWeights&) const = default;
};

// Calls fn(field_name, tensor) for the seven projection matrices of a layer.
// These are the "linear weights" the Taylor+ and Mag+ scores sum over.
template <typename Layer, typename Fn>
void for_each_linear(Layer& layer, Fn&& fn) {
  fn("attn.q.weight", layer.w_q);
  fn("attn.k.weight", layer.w_k);
  fn("attn.v.weight", layer.w_v);
  fn("attn.o.weight", layer.w_o);
  fn("mlp.gate.weight", layer.w_gate);
  fn("mlp.up.weight", layer.w_up);
  fn("mlp.down.weight", layer.w_down);
}

template <typename Layer, typename Fn>
void for_each_layer_tensor(Layer& layer, Fn&& fn) {
  fn("norm_attn.gamma", layer.norm_attn_gamma);
  fn("norm_mlp.gamma", layer.norm_mlp_gamma);
  for_each_linear(layer, fn);
}

// Visits every tensor under its checkpoint name in canonical order:
// embed, layers in index order, final norm, head.
template <typename Weights, typename Fn>
void for_each_tensor(Weights& weights, Fn&& fn) {
  fn(std::string("embed.weight"), weights.w_embed);
  for (std::size_t i = 0; i < weights.layers.size(); ++i) {
    const std::string prefix = "layers." + std::to_string(i) + ".";
    for_each_layer_tensor(weights.layers[i],
                          [&](const char* field, auto& t) { fn(prefix + field, t); });
  }
  fn(std::string("final_norm.gamma"), weights.final_norm_gamma);
  fn(std::string("lm_head.weight"), weights.lm_head);
}

// Expected shape of every tensor name for a config, in canonical order.
inline std::vector<std::pair<std::string, Shape>> expected_tensor_shapes(const ModelConfig& cfg) {
  std::vector<std::pair<std::string, Shape>> out;
  const std::size_t c = cfg.d_model;
  out.emplace_back("embed.weight", Shape{cfg.vocab_size, c});
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "norm_attn.gamma", Shape{c});
    out.emplace_back(p + "norm_mlp.gamma", Shape{c});
    out.emplace_back(p + "attn.q.weight", Shape{c, c});
    out.emplace_back(p + "attn.k.weight", Shape{c, c});
    out.emplace_back(p + "attn.v.weight", Shape{c, c});
    out.emplace_back(p + "attn.o.weight", Shape{c, c});
    out.emplace_back(p + "mlp.gate.weight", Shape{c, cfg.d_ff});
    out.emplace_back(p + "mlp.up.weight", Shape{c, cfg.d_ff});
    out.emplace_back(p + "mlp.down.weight", Shape{cfg.d_ff, c});
  }
  out.emplace_back("final_norm.gamma", Shape{c});
  out.emplace_back("lm_head.weight", Shape{c, cfg.vocab_size});
  return out;
}

template <typename T>
ModelWeights<T> make_zero_weights(const ModelConfig& cfg) {
  ModelWeights<T> w;
  const std::size_t c = cfg.d_model;
  w.w_embed = Tensor<T>({cfg.vocab_size, c});
  w.layers.resize(cfg.n_layers);
  for (auto& l : w.layers) {
    l.norm_attn_gamma = Tensor<T>({c}, T{1});
    l.norm_mlp_gamma = Tensor<T>({c}, T{1});
    l.w_q = Tensor<T>({c, c});
    l.w_k = Tensor<T>({c, c});
    l.w_v = Tensor<T>({c, c});
    l.w_o = Tensor<T>({c, c});
    l.w_gate = Tensor<T>({c, cfg.d_ff});
    l.w_up = Tensor<T>({c, cfg.d_ff});
    l.w_down = Tensor<T>({cfg.d_ff, c});
  }
  w.final_norm_gamma = Tensor<T>({c}, T{1});
  w.lm_head = Tensor<T>({c, cfg.vocab_size});
  return w;
}

template <typename T>
void validate_weights(const ModelWeights<T>& weights, const ModelConfig& cfg) {
  cfg.validate();
  if (weights.layers.size() != cfg.n_layers) {
    throw Error(ErrorKind::kSchema, "config declares " + std::to_string(cfg.n_layers) +
                                        " layers but weights hold " +
                                        std::to_string(weights.layers.size()));
  }
  const auto expected = expected_tensor_shapes(cfg);
  std::size_t i = 0;
  for_each_tensor(weights, [&](const std::string& name, const Tensor<T>& t) {
    const auto& [ename, eshape] = expected[i++];
    if (t.shape() != eshape) {
      throw Error(ErrorKind::kSchema, "tensor " + name + ": expected shape " +
                                          shape_to_string(eshape) + ", got " +
                                          shape_to_string(t.shape()));
    }
  });
}

template <typename T>
struct HiddenTrace {
  // states[l] is the input of layer l, [B x T x C]; the last entry feeds the final norm.
  std::vector<Tensor<T>> states;
};

template <typename T>
struct GradientSet {
  ModelWeights<T> tensors;  // same layout and shapes as the weights
  double loss = 0.0;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // [B x T x vocab]
  std::optional<HiddenTrace<T>> trace;
};

// Rows [start, start + n) of a [B x T] batch.
inline TokenBatch slice_rows(const TokenBatch& batch, std::size_t start, std::size_t n) {
  TokenBatch out({n, batch.dim(1)});
  for (std::size_t i = 0; i < n; ++i) {
    const auto src = batch.row(start + i);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

// Splits [S x T] sequences into inputs [S x (T-1)] and next-token targets.
inline std::pair<TokenBatch, TokenBatch> shift_for_next_token(const TokenBatch& sequences) {
  if (sequences.rank() != 2 || sequences.dim(1) < 2) {
    throw Error(ErrorKind::kInput, "next-token split needs [S x T] sequences with T >= 2, got " +
                                       shape_to_string(sequences.shape()));
  }
  const std::size_t s = sequences.dim(0), t = sequences.dim(1);
  TokenBatch inputs({s, t - 1}), targets({s, t - 1});
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j + 1 < t; ++j) {
      inputs.at(i, j) = sequences.at(i, j);
      targets.at(i, j) = sequences.at(i, j + 1);
    }
  }
  return {std::move(inputs), std::move(targets)};
}

namespace detail {

// Which layers run, in order, and the runtime scale applied to the residual
// stream just before each of them (and before the final norm).
struct ExecutionPlan {
  std::vector<std::size_t> layers;
  std::vector<double> pre_scale;
  double final_scale = 1.0;

  static ExecutionPlan full(std::size_t n_layers) {
    ExecutionPlan p;
    for (std::size_t i = 0; i < n_layers; ++i) p.layers.push_back(i);
    p.pre_scale.assign(n_layers, 1.0);
    return p;
  }
};

template <typename T>
struct LayerCache {
  Tensor<T> x_in;    // residual input [T x C]
  std::vector<T> inv_rms_attn;
  Tensor<T> h_attn;  // normalized input to q/k/v
  Tensor<T> q, k, v; // q, k after rotation
  std::vector<T> probs;  // [H x T x T] causal attention weights
  Tensor<T> attn_concat;
  Tensor<T> x_mid;   // residual after attention
  std::vector<T> inv_rms_mlp;
  Tensor<T> h_mlp;
  Tensor<T> gate, up, act;
};

template <typename T>
struct SequenceCache {
  std::vector<std::size_t> positions;
  std::vector<LayerCache<T>> layers;
  Tensor<T> x_final;
  std::vector<T> inv_rms_final;
  Tensor<T> h_final;
};

template <typename T>
T silu(T x) {
  return x / (T{1} + std::exp(-x));
}

template <typename T>
Tensor<T> attention_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            const ModelConfig& cfg, std::vector<T>* probs_out) {
  const std::size_t len = q.dim(0), dh = cfg.d_head;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor<T> out({len, cfg.d_model});
  std::vector<T> probs(cfg.n_heads * len * len, T{});
  std::vector<T> row(len);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < len; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        T dot{};
        for (std::size_t d = 0; d < dh; ++d) dot += q.at(i, off + d) * k.at(j, off + d);
        row[j] = dot * scale;
        mx = std::max(mx, row[j]);
      }
      T sum{};
      for (std::size_t j = 0; j <= i; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      T* p = &probs[(h * len + i) * len];
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] = row[j] / sum;
        for (std::size_t d = 0; d < dh; ++d) out.at(i, off + d) += p[j] * v.at(j, off + d);
      }
    }
  }
  if (probs_out) *probs_out = std::move(probs);
  return out;
}

template <typename T>
Tensor<T> layer_forward(const LayerWeights<T>& lw, const ModelConfig& cfg, Tensor<T> x,
                        std::span<const std::size_t> positions, LayerCache<T>* cache) {
  std::vector<T> inv_a;
  Tensor<T> h = rmsnorm(x, lw.norm_attn_gamma, cfg.norm_eps, &inv_a);
  Tensor<T> v = matmul(h, lw.w_v);
  auto [q, k] = rope_apply(matmul(h, lw.w_q), matmul(h, lw.w_k), positions, cfg.d_head,
                           cfg.rope_theta);
  std::vector<T> probs;
  Tensor<T> attn = attention_forward(q, k, v, cfg, cache ? &probs : nullptr);
  Tensor<T> x_mid = x;
  x_mid += matmul(attn, lw.w_o);

  std::vector<T> inv_m;
  Tensor<T> h2 = rmsnorm(x_mid, lw.norm_mlp_gamma, cfg.norm_eps, &inv_m);
  Tensor<T> gate = matmul(h2, lw.w_gate);
  Tensor<T> up = matmul(h2, lw.w_up);
  Tensor<T> act(gate.shape());
  for (std::size_t i = 0; i < act.size(); ++i) act[i] = silu(gate[i]) * up[i];
  Tensor<T> x_out = x_mid;
  x_out += matmul(act, lw.w_down);

  if (cache) {
    cache->x_in = std::move(x);
    cache->inv_rms_attn = std::move(inv_a);
    cache->h_attn = std::move(h);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->attn_concat = std::move(attn);
    cache->x_mid = std::move(x_mid);
    cache->inv_rms_mlp = std::move(inv_m);
    cache->h_mlp = std::move(h2);
    cache->gate = std::move(gate);
    cache->up = std::move(up);
    cache->act = std::move(act);
  }
  return x_out;
}

inline void check_tokens(std::span<const std::int32_t> tokens, const ModelConfig& cfg) {
  if (tokens.size() > cfg.max_seq_len) {
    throw Error(ErrorKind::kInput, "sequence length " + std::to_string(tokens.size()) +
                                       " exceeds max_seq_len " +
                                       std::to_string(cfg.max_seq_len));
  }
  for (const auto id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw Error(ErrorKind::kInput, "token id " + std::to_string(id) +
                                         " outside vocabulary of size " +
                                         std::to_string(cfg.vocab_size));
    }
  }
}

// Runs one sequence through the plan. trace receives the residual stream
// entering each planned layer plus the final-norm input.
template <typename T>
Tensor<T> sequence_forward(const ModelWeights<T>& w, const ModelConfig& cfg,
                           std::span<const std::int32_t> tokens, const ExecutionPlan& plan,
                           std::vector<Tensor<T>>* trace, SequenceCache<T>* cache) {
  const std::size_t len = tokens.size(), c = cfg.d_model;
  std::vector<std::size_t> positions(len);
  for (std::size_t t = 0; t < len; ++t) positions[t] = t;

  Tensor<T> x({len, c});
  for (std::size_t t = 0; t < len; ++t) {
    const auto src = w.w_embed.row(static_cast<std::size_t>(tokens[t]));
    std::copy(src.begin(), src.end(), x.row(t).begin());
  }
  if (cache) cache->layers.resize(plan.layers.size());
  for (std::size_t s = 0; s < plan.layers.size(); ++s) {
    if (plan.pre_scale[s] != 1.0) x *= static_cast<T>(plan.pre_scale[s]);
    if (trace) trace->push_back(x);
    x = layer_forward(w.layers[plan.layers[s]], cfg, std::move(x), positions,
                      cache ? &cache->layers[s] : nullptr);
  }
  if (plan.final_scale != 1.0) x *= static_cast<T>(plan.final_scale);
  if (trace) trace->push_back(x);

  std::vector<T> inv_f;
  Tensor<T> hf = rmsnorm(x, w.final_norm_gamma, cfg.norm_eps, &inv_f);
  Tensor<T> logits = matmul(hf, w.lm_head);
  if (cache) {
    cache->positions = std::move(positions);
    cache->x_final = std::move(x);
    cache->inv_rms_final = std::move(inv_f);
    cache->h_final = std::move(hf);
  }
  return logits;
}

template <typename T>
ForwardResult<T> batch_forward(const ModelWeights<T>& w, const ModelConfig& cfg,
                               const TokenBatch& tokens, const ExecutionPlan& plan,
                               bool capture_trace) {
  if (tokens.rank() != 2) {
    throw Error(ErrorKind::kDimension,
                "tokens must be [B x T], got " + shape_to_string(tokens.shape()));
  }
  const std::size_t b = tokens.dim(0), len = tokens.dim(1), c = cfg.d_model;
  for (std::size_t i = 0; i < b; ++i) check_tokens(tokens.row(i), cfg);

  ForwardResult<T> result;
  result.logits = Tensor<T>({b, len, cfg.vocab_size});
  std::vector<std::vector<Tensor<T>>> traces(capture_trace ? b : 0);
  parallel_for(b, [&](std::size_t i) {
    Tensor<T> logits = sequence_forward<T>(w, cfg, tokens.row(i), plan,
                                        capture_trace ? &traces[i] : nullptr, nullptr);
    std::copy(logits.storage().begin(), logits.storage().end(), result.logits.row(i).begin());
  });
  if (capture_trace) {
    HiddenTrace<T> trace;
    const std::size_t depth = plan.layers.size() + 1;
    trace.states.assign(depth, Tensor<T>({b, len, c}));
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t l = 0; l < depth; ++l) {
        const auto& src = traces[i][l].storage();
        std::copy(src.begin(), src.end(), trace.states[l].row(i).begin());
      }
    }
    result.trace = std::move(trace);
  }
  return result;
}

}  // namespace detail

// Full forward pass. With capture_trace the input of every layer (and of the
// final norm) is recorded.
template <typename T>
ForwardResult<T> forward(const ModelWeights<T>& weights, const ModelConfig& cfg,
                         const TokenBatch& tokens, bool capture_trace = false) {
  return detail::batch_forward(weights, cfg, tokens, detail::ExecutionPlan::full(cfg.n_layers),
                               capture_trace);
}

// Reference semantics for pruning: layers in `removed` are skipped and the
// residual stream is multiplied by junction_scales[j] right before it enters
// surviving layer j (j == n_layers addresses the final norm). Used as the
// oracle for offline weight fusion.
template <typename T>
Tensor<T> forward_with_skip(const ModelWeights<T>& weights, const ModelConfig& cfg,
                            const TokenBatch& tokens, const std::set<std::size_t>& removed,
                            const std::map<std::size_t, double>& junction_scales = {}) {
  for (const auto idx : removed) {
    if (idx >= cfg.n_layers) {
      throw Error(ErrorKind::kIndex, "removed layer " + std::to_string(idx) + " >= n_layers " +
                                         std::to_string(cfg.n_layers));
    }
  }
  detail::ExecutionPlan plan;
  for (const auto& [j, alpha] : junction_scales) {
    if (j > cfg.n_layers || removed.count(j)) {
      throw Error(ErrorKind::kIndex, "junction scale keyed by " + std::to_string(j) +
                                         ", which is not a surviving layer or the final norm");
    }
    if (!(alpha > 0.0) || !std::isfinite(alpha)) {
      throw Error(ErrorKind::kInput, "junction scale must be positive and finite");
    }
  }
  auto scale_at = [&](std::size_t j) {
    const auto it = junction_scales.find(j);
    return it == junction_scales.end() ? 1.0 : it->second;
  };
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (removed.count(l)) continue;
    plan.layers.push_back(l);
    plan.pre_scale.push_back(scale_at(l));
  }
  plan.final_scale = scale_at(cfg.n_layers);
  return detail::batch_forward(weights, cfg, tokens, plan, false).logits;
}

// Per-position negative log-likelihood in double precision, [B*T] in row order.
template <typename T>
std::vector<double> token_nll(const Tensor<T>& logits, const TokenBatch& targets) {
  if (logits.rank() != 3 || targets.rank() != 2 || logits.dim(0) != targets.dim(0) ||
      logits.dim(1) != targets.dim(1)) {
    throw Error(ErrorKind::kDimension, "logits " + shape_to_string(logits.shape()) +
                                           " do not match targets " +
                                           shape_to_string(targets.shape()));
  }
  const std::size_t v = logits.dim(2);
  const std::size_t n = targets.size();
  std::vector<double> out(n);
  for (std::size_t p = 0; p < n; ++p) {
    const auto target = targets[p];
    if (target < 0 || static_cast<std::size_t>(target) >= v) {
      throw Error(ErrorKind::kInput, "target id " + std::to_string(target) +
                                         " outside vocabulary of size " + std::to_string(v));
    }
    const T* row = &logits[p * v];
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < v; ++i) mx = std::max(mx, static_cast<double>(row[i]));
    double sum = 0.0;
    for (std::size_t i = 0; i < v; ++i) sum += std::exp(static_cast<double>(row[i]) - mx);
    out[p] = mx + std::log(sum) - static_cast<double>(row[target]);
  }
  return out;
}

// Mean over all positions of -log softmax(logits)[target].
template <typename T>
double cross_entropy(const Tensor<T>& logits, const TokenBatch& targets) {
  const auto nll = token_nll(logits, targets);
  double sum = 0.0;
  for (const double v : nll) sum += v;
  return sum / static_cast<double>(nll.size());
}

namespace detail {

template <typename T>
void rmsnorm_backward(const Tensor<T>& x, const std::vector<T>& inv_rms, const Tensor<T>& gamma,
                      const Tensor<T>& dy, Tensor<T>& dx, Tensor<T>& dgamma) {
  const std::size_t c = gamma.dim(0), rows = x.size() / c;
  for (std::size_t r = 0; r < rows; ++r) {
    const T inv = inv_rms[r];
    T dot{};
    for (std::size_t i = 0; i < c; ++i) {
      const T n = x[r * c + i] * inv;
      const T dn = dy[r * c + i] * gamma[i];
      dgamma[i] += dy[r * c + i] * n;
      dot += dn * n;
    }
    dot /= static_cast<T>(c);
    for (std::size_t i = 0; i < c; ++i) {
      const T n = x[r * c + i] * inv;
      const T dn = dy[r * c + i] * gamma[i];
      dx[r * c + i] += inv * (dn - n * dot);
    }
  }
}

// Back-propagates d(x_out) through one layer. Accumulates weight gradients
// into g and returns d(x_in).
template <typename T>
Tensor<T> layer_backward(const LayerWeights<T>& lw, const ModelConfig& cfg,
                         const LayerCache<T>& cache, std::span<const std::size_t> positions,
                         const Tensor<T>& dx_out, LayerWeights<T>& g) {
  const std::size_t len = cache.x_in.dim(0), dh = cfg.d_head;

  // MLP branch
  g.w_down += matmul_at_b(cache.act, dx_out);
  Tensor<T> dact = matmul_a_bt(dx_out, lw.w_down);
  Tensor<T> dgate(dact.shape()), dup(dact.shape());
  for (std::size_t i = 0; i < dact.size(); ++i) {
    const T z = cache.gate[i];
    const T sig = T{1} / (T{1} + std::exp(-z));
    dup[i] = dact[i] * z * sig;
    dgate[i] = dact[i] * cache.up[i] * sig * (T{1} + z * (T{1} - sig));
  }
  g.w_gate += matmul_at_b(cache.h_mlp, dgate);
  g.w_up += matmul_at_b(cache.h_mlp, dup);
  Tensor<T> dh2 = matmul_a_bt(dgate, lw.w_gate);
  dh2 += matmul_a_bt(dup, lw.w_up);
  Tensor<T> dx_mid = dx_out;
  rmsnorm_backward(cache.x_mid, cache.inv_rms_mlp, lw.norm_mlp_gamma, dh2, dx_mid,
                   g.norm_mlp_gamma);

  // attention branch
  g.w_o += matmul_at_b(cache.attn_concat, dx_mid);
  Tensor<T> dattn = matmul_a_bt(dx_mid, lw.w_o);
  Tensor<T> dq(cache.q.shape()), dk(cache.k.shape()), dv(cache.v.shape());
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<T> dp(len);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < len; ++i) {
      const T* p = &cache.probs[(h * len + i) * len];
      T weighted{};
      for (std::size_t j = 0; j <= i; ++j) {
        T dot{};
        for (std::size_t d = 0; d < dh; ++d) {
          dot += dattn.at(i, off + d) * cache.v.at(j, off + d);
          dv.at(j, off + d) += p[j] * dattn.at(i, off + d);
        }
        dp[j] = dot;
        weighted += p[j] * dot;
      }
      for (std::size_t j = 0; j <= i; ++j) {
        const T ds = p[j] * (dp[j] - weighted) * scale;
        for (std::size_t d = 0; d < dh; ++d) {
          dq.at(i, off + d) += ds * cache.k.at(j, off + d);
          dk.at(j, off + d) += ds * cache.q.at(i, off + d);
        }
      }
    }
  }
  rope_rotate_inplace(dq, positions, dh, cfg.rope_theta, /*inverse=*/true);
  rope_rotate_inplace(dk, positions, dh, cfg.rope_theta, /*inverse=*/true);
  g.w_q += matmul_at_b(cache.h_attn, dq);
  g.w_k += matmul_at_b(cache.h_attn, dk);
  g.w_v += matmul_at_b(cache.h_attn, dv);
  Tensor<T> dh_attn = matmul_a_bt(dq, lw.w_q);
  dh_attn += matmul_a_bt(dk, lw.w_k);
  dh_attn += matmul_a_bt(dv, lw.w_v);
  Tensor<T> dx_in = dx_mid;
  rmsnorm_backward(cache.x_in, cache.inv_rms_attn, lw.norm_attn_gamma, dh_attn, dx_in,
                   g.norm_attn_gamma);
  return dx_in;
}

// Gradients of sum_t nll(t) / normalizer for one sequence, added into g.
template <typename T>
double sequence_backward(const ModelWeights<T>& w, const ModelConfig& cfg,
                         std::span<const std::int32_t> tokens,
                         std::span<const std::int32_t> targets, double normalizer,
                         ModelWeights<T>& g) {
  SequenceCache<T> cache;
  const auto plan = ExecutionPlan::full(cfg.n_layers);
  Tensor<T> logits = sequence_forward<T>(w, cfg, tokens, plan, nullptr, &cache);
  const std::size_t len = tokens.size(), v = cfg.vocab_size;

  double loss = 0.0;
  Tensor<T> dlogits({len, v});
  for (std::size_t t = 0; t < len; ++t) {
    const auto target = targets[t];
    if (target < 0 || static_cast<std::size_t>(target) >= v) {
      throw Error(ErrorKind::kInput, "target id " + std::to_string(target) +
                                         " outside vocabulary of size " + std::to_string(v));
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < v; ++i) mx = std::max(mx, static_cast<double>(logits.at(t, i)));
    double sum = 0.0;
    for (std::size_t i = 0; i < v; ++i) sum += std::exp(static_cast<double>(logits.at(t, i)) - mx);
    loss += mx + std::log(sum) - static_cast<double>(logits.at(t, target));
    for (std::size_t i = 0; i < v; ++i) {
      const double p = std::exp(static_cast<double>(logits.at(t, i)) - mx) / sum;
      dlogits.at(t, i) = static_cast<T>((p - (i == static_cast<std::size_t>(target) ? 1.0 : 0.0)) /
                                        normalizer);
    }
  }

  g.lm_head += matmul_at_b(cache.h_final, dlogits);
  Tensor<T> dhf = matmul_a_bt(dlogits, w.lm_head);
  Tensor<T> dx(cache.x_final.shape());
  rmsnorm_backward(cache.x_final, cache.inv_rms_final, w.final_norm_gamma, dhf, dx,
                   g.final_norm_gamma);
  for (std::size_t l = cfg.n_layers; l-- > 0;) {
    dx = layer_backward(w.layers[l], cfg, cache.layers[l], cache.positions, dx, g.layers[l]);
  }
  for (std::size_t t = 0; t < len; ++t) {
    auto dst = g.w_embed.row(static_cast<std::size_t>(tokens[t]));
    const auto src = dx.row(t);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
  }
  return loss;
}

}  // namespace detail

// Exact gradients of cross_entropy(forward(tokens), targets) with respect to
// every weight tensor. Per-sequence gradients are summed in sequence order so
// the result does not depend on the worker count.
template <typename T>
GradientSet<T> backward_weight_grads(const ModelWeights<T>& weights, const ModelConfig& cfg,
                                     const TokenBatch& tokens, const TokenBatch& targets) {
  if (tokens.rank() != 2 || tokens.shape() != targets.shape()) {
    throw Error(ErrorKind::kDimension, "tokens " + shape_to_string(tokens.shape()) +
                                           " and targets " + shape_to_string(targets.shape()) +
                                           " must both be [B x T]");
  }
  const std::size_t b = tokens.dim(0);
  for (std::size_t i = 0; i < b; ++i) detail::check_tokens(tokens.row(i), cfg);
  const double normalizer = static_cast<double>(tokens.size());

  GradientSet<T> out;
  out.tensors = make_zero_weights<T>(cfg);
  for_each_tensor(out.tensors, [](const std::string&, Tensor<T>& t) { t.fill(T{}); });

  const std::size_t chunk = std::max<std::size_t>(1, thread_count());
  for (std::size_t start = 0; start < b; start += chunk) {
    const std::size_t n = std::min(chunk, b - start);
    std::vector<ModelWeights<T>> partial(n);
    std::vector<double> losses(n);
    parallel_for(n, [&](std::size_t i) {
      partial[i] = make_zero_weights<T>(cfg);
      for_each_tensor(partial[i], [](const std::string&, Tensor<T>& t) { t.fill(T{}); });
      losses[i] = detail::sequence_backward(weights, cfg, tokens.row(start + i),
                                            targets.row(start + i), normalizer, partial[i]);
    });
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<Tensor<T>*> dst;
      for_each_tensor(out.tensors, [&](const std::string&, Tensor<T>& t) { dst.push_back(&t); });
      std::size_t k = 0;
      for_each_tensor(partial[i], [&](const std::string&, Tensor<T>& t) { *dst[k++] += t; });
      out.loss += losses[i];
    }
  }
  out.loss /= normalizer;
  for_each_tensor(out.tensors, [](const std::string& name, const Tensor<T>& t) {
    if (!all_finite(t.data())) {
      throw Error(ErrorKind::kNumeric, "non-finite gradient in " + name);
    }
  });
  return out;
}

}  // namespace layercull
