#pragma once

#include <unistd.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "layercull/layercull.hpp"
#include "oracle.hpp"

namespace testutil {

using namespace layercull;

inline ModelConfig config(std::size_t layers, std::size_t c = 16, std::size_t heads = 2,
                          std::size_t ff = 32, std::size_t vocab = 32, std::size_t max_len = 64) {
  ModelConfig cfg;
  cfg.n_layers = layers;
  cfg.d_model = c;
  cfg.n_heads = heads;
  cfg.d_head = c / heads;
  cfg.d_ff = ff;
  cfg.vocab_size = vocab;
  cfg.max_seq_len = max_len;
  return cfg;
}

inline std::vector<std::int32_t> random_tokens(std::size_t n, std::size_t vocab,
                                               std::uint64_t seed) {
  PortableRng rng(seed);
  std::vector<std::int32_t> out(n);
  for (auto& t : out) t = static_cast<std::int32_t>(rng.below(vocab));
  return out;
}

inline CalibrationSet random_calib(const ModelConfig& cfg, std::size_t count, std::size_t len,
                                   std::uint64_t seed) {
  const auto corpus = random_tokens(count * len * 2, cfg.vocab_size, seed);
  return make_calibration(corpus, len, count, seed);
}

inline TokenBatch batch(std::size_t b, std::size_t t, std::size_t vocab, std::uint64_t seed) {
  return TokenBatch({b, t}, random_tokens(b * t, vocab, seed));
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("layercull_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Max |logit| difference between a [B x T x V] tensor and the oracle forward.
template <typename T>
double oracle_logit_diff(const Tensor<T>& logits, const oracle::Model& m, const TokenBatch& tokens,
                         const std::set<std::size_t>& removed = {},
                         const std::map<std::size_t, double>& scales = {}) {
  double worst = 0.0;
  const std::size_t v = logits.dim(2);
  for (std::size_t b = 0; b < tokens.dim(0); ++b) {
    const auto ref = oracle::forward_seq(m, oracle::row(tokens, b), removed, scales).logits;
    for (std::size_t t = 0; t < ref.size(); ++t)
      for (std::size_t k = 0; k < v; ++k)
        worst = std::max(worst, std::abs(static_cast<double>(logits.at(b, t, k)) - ref[t][k]));
  }
  return worst;
}

}  // namespace testutil
