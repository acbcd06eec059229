#pragma once

// Deliberately naive reference implementations used as test oracles. Nothing
// here calls into the library's kernels; weights are only read element-wise.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <vector>

#include "layercull/model.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

template <typename T>
Mat to_mat(const layercull::Tensor<T>& t) {
  const std::size_t r = t.dim(0), c = t.rank() == 2 ? t.dim(1) : 1;
  Mat m(r, std::vector<double>(c));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m[i][j] = static_cast<double>(t[i * c + j]);
  return m;
}

template <typename T>
std::vector<double> to_vec(const layercull::Tensor<T>& t) {
  return std::vector<double>(t.storage().begin(), t.storage().end());
}

inline Mat matmul(const Mat& a, const Mat& b) {
  const std::size_t m = a.size(), k = b.size(), n = b.empty() ? 0 : b[0].size();
  Mat out(m, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i][p] * b[p][j];
      out[i][j] = s;
    }
  return out;
}

inline std::vector<double> rmsnorm(const std::vector<double>& x, const std::vector<double>& g,
                                   double eps) {
  double ms = 0.0;
  for (double v : x) ms += v * v;
  ms /= static_cast<double>(x.size());
  const double d = std::sqrt(ms + eps);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / d * g[i];
  return out;
}

// Applies the explicit 2x2 rotation matrix [[cos, -sin], [sin, cos]] to each
// (2i, 2i+1) pair of one head vector at position pos.
inline void rotate_head(double* v, std::size_t head_dim, double pos, double theta) {
  for (std::size_t i = 0; i < head_dim / 2; ++i) {
    const double ang = pos / std::pow(theta, 2.0 * i / static_cast<double>(head_dim));
    const double r[2][2] = {{std::cos(ang), -std::sin(ang)}, {std::sin(ang), std::cos(ang)}};
    const double a = v[2 * i], b = v[2 * i + 1];
    v[2 * i] = r[0][0] * a + r[0][1] * b;
    v[2 * i + 1] = r[1][0] * a + r[1][1] * b;
  }
}

struct Layer {
  std::vector<double> g_attn, g_mlp;
  Mat q, k, v, o, gate, up, down;
};

struct Model {
  layercull::ModelConfig cfg;
  Mat embed, head;
  std::vector<double> g_final;
  std::vector<Layer> layers;
};

template <typename T>
Model load(const layercull::ModelWeights<T>& w, const layercull::ModelConfig& cfg) {
  Model m;
  m.cfg = cfg;
  m.embed = to_mat(w.w_embed);
  m.head = to_mat(w.lm_head);
  m.g_final = to_vec(w.final_norm_gamma);
  for (const auto& l : w.layers) {
    m.layers.push_back({to_vec(l.norm_attn_gamma), to_vec(l.norm_mlp_gamma), to_mat(l.w_q),
                        to_mat(l.w_k), to_mat(l.w_v), to_mat(l.w_o), to_mat(l.w_gate),
                        to_mat(l.w_up), to_mat(l.w_down)});
  }
  return m;
}

// Residual stream after one layer, for a single sequence x[T][C].
inline Mat run_layer(const Layer& L, const layercull::ModelConfig& cfg, Mat x) {
  const std::size_t T = x.size(), C = cfg.d_model, H = cfg.n_heads, D = cfg.d_head;
  Mat h(T);
  for (std::size_t t = 0; t < T; ++t) h[t] = rmsnorm(x[t], L.g_attn, cfg.norm_eps);
  Mat q = matmul(h, L.q), k = matmul(h, L.k), v = matmul(h, L.v);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t hd = 0; hd < H; ++hd) {
      rotate_head(&q[t][hd * D], D, static_cast<double>(t), cfg.rope_theta);
      rotate_head(&k[t][hd * D], D, static_cast<double>(t), cfg.rope_theta);
    }
  Mat att(T, std::vector<double>(C, 0.0));
  for (std::size_t hd = 0; hd < H; ++hd)
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> s(t + 1);
      double mx = -1e300;
      for (std::size_t u = 0; u <= t; ++u) {
        double d = 0.0;
        for (std::size_t i = 0; i < D; ++i) d += q[t][hd * D + i] * k[u][hd * D + i];
        s[u] = d / std::sqrt(static_cast<double>(D));
        mx = std::max(mx, s[u]);
      }
      double z = 0.0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t u = 0; u <= t; ++u)
        for (std::size_t i = 0; i < D; ++i) att[t][hd * D + i] += s[u] / z * v[u][hd * D + i];
    }
  const Mat o = matmul(att, L.o);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) x[t][c] += o[t][c];
  for (std::size_t t = 0; t < T; ++t) h[t] = rmsnorm(x[t], L.g_mlp, cfg.norm_eps);
  Mat g = matmul(h, L.gate);
  const Mat u = matmul(h, L.up);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t f = 0; f < g[t].size(); ++f) g[t][f] = g[t][f] / (1.0 + std::exp(-g[t][f])) * u[t][f];
  const Mat d = matmul(g, L.down);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) x[t][c] += d[t][c];
  return x;
}

struct SeqOut {
  Mat logits;             // [T][V]
  std::vector<Mat> trace;  // input of each executed layer, then the final-norm input
};

// Splices the layer list by hand and multiplies the stream by scales[j] just
// before original layer j runs (j == n_layers: before the final norm).
inline SeqOut forward_seq(const Model& m, const std::vector<std::int32_t>& tokens,
                          const std::set<std::size_t>& removed = {},
                          const std::map<std::size_t, double>& scales = {}) {
  std::vector<const Layer*> kept;
  std::vector<double> pre;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    if (removed.count(l)) continue;
    kept.push_back(&m.layers[l]);
    pre.push_back(scales.count(l) ? scales.at(l) : 1.0);
  }
  const double final_scale = scales.count(m.layers.size()) ? scales.at(m.layers.size()) : 1.0;
  Mat x;
  for (auto id : tokens) x.push_back(m.embed[static_cast<std::size_t>(id)]);
  SeqOut out;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    for (auto& r : x)
      for (auto& v : r) v *= pre[i];
    out.trace.push_back(x);
    x = run_layer(*kept[i], m.cfg, x);
  }
  for (auto& r : x)
    for (auto& v : r) v *= final_scale;
  out.trace.push_back(x);
  Mat h;
  for (const auto& r : x) h.push_back(rmsnorm(r, m.g_final, m.cfg.norm_eps));
  out.logits = matmul(h, m.head);
  return out;
}

inline std::vector<std::int32_t> row(const layercull::TokenBatch& b, std::size_t i) {
  const auto r = b.row(i);
  return {r.begin(), r.end()};
}

// -log softmax(z)[target] written directly as log(sum exp) - z[target].
inline double nll(const std::vector<double>& z, std::int32_t target) {
  double s = 0.0;
  for (double v : z) s += std::exp(v);
  return std::log(s) - z[static_cast<std::size_t>(target)];
}

// Two passes: collect every next-token log-prob, then reduce.
inline double perplexity(const Model& m, const layercull::TokenBatch& seqs,
                         const std::set<std::size_t>& removed = {}) {
  std::vector<double> logps;
  for (std::size_t s = 0; s < seqs.dim(0); ++s) {
    auto toks = row(seqs, s);
    const auto targets = std::vector<std::int32_t>(toks.begin() + 1, toks.end());
    toks.pop_back();
    const auto out = forward_seq(m, toks, removed);
    for (std::size_t t = 0; t < targets.size(); ++t) logps.push_back(-nll(out.logits[t], targets[t]));
  }
  double sum = 0.0;
  for (double v : logps) sum += v;
  return std::exp(-sum / static_cast<double>(logps.size()));
}

inline double mean_loss(const Model& m, const layercull::TokenBatch& inputs,
                        const layercull::TokenBatch& targets) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t s = 0; s < inputs.dim(0); ++s) {
    const auto out = forward_seq(m, row(inputs, s));
    const auto tg = row(targets, s);
    for (std::size_t t = 0; t < tg.size(); ++t, ++n) sum += nll(out.logits[t], tg[t]);
  }
  return sum / static_cast<double>(n);
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return d / std::sqrt(na * nb);
}

// Mean cosine between X^(l) and X^(l+n) for every window start l.
inline std::vector<double> window_cosines(const Model& m, const layercull::TokenBatch& seqs,
                                          std::size_t n) {
  const std::size_t L = m.layers.size();
  std::vector<double> sums(L - n + 1, 0.0);
  double count = 0.0;
  for (std::size_t s = 0; s < seqs.dim(0); ++s) {
    const auto tr = forward_seq(m, row(seqs, s)).trace;
    for (std::size_t t = 0; t < tr[0].size(); ++t) {
      count += 1.0;
      for (std::size_t l = 0; l + n <= L; ++l) sums[l] += cosine(tr[l][t], tr[l + n][t]);
    }
  }
  for (auto& v : sums) v /= count;
  return sums;
}

// Per sequence: (1/C) sum_k sum_t |b[t][k]| / (sum_t |a[t][k]| + 1e-12); mean over sequences.
inline double span_gain(const Model& m, const layercull::TokenBatch& seqs, std::size_t start,
                        std::size_t n) {
  double total = 0.0;
  for (std::size_t s = 0; s < seqs.dim(0); ++s) {
    const auto tr = forward_seq(m, row(seqs, s)).trace;
    const Mat& a = tr[start];
    const Mat& b = tr[start + n];
    double g = 0.0;
    for (std::size_t k = 0; k < a[0].size(); ++k) {
      double na = 0.0, nb = 0.0;
      for (std::size_t t = 0; t < a.size(); ++t) {
        na += std::abs(a[t][k]);
        nb += std::abs(b[t][k]);
      }
      g += nb / (na + 1e-12);
    }
    total += g / static_cast<double>(a[0].size());
  }
  return total / static_cast<double>(seqs.dim(0));
}

// Central finite difference of f with respect to one weight entry.
template <typename T>
double central_diff(layercull::ModelWeights<T>& w, T& entry, double h,
                    const std::function<double(const layercull::ModelWeights<T>&)>& f) {
  const T saved = entry;
  entry = saved + static_cast<T>(h);
  const double up = f(w);
  entry = saved - static_cast<T>(h);
  const double down = f(w);
  entry = saved;
  return (up - down) / (2.0 * h);
}

// Gradient agreement measure: |a - b| / max(|a|, |b|, floor).
inline double rel_err(double a, double b, double floor = 1e-7) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace oracle
