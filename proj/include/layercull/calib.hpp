#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "layercull/error.hpp"
#include "layercull/model.hpp"
#include "layercull/rng.hpp"

namespace layercull {

// 64-bit FNV-1a, used for content fingerprints.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  void update_u64(std::uint64_t v) { update(&v, sizeof(v)); }

  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(state_));
    return buf;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

// Which part of a corpus windows may come from. The first half of the window
// slots is reserved for calibration and the second half for evaluation, so
// the two never share tokens.
enum class Split { kAll, kCalib, kEval };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::kAll: return "all";
    case Split::kCalib: return "calib";
    case Split::kEval: return "eval";
  }
  return "all";
}

inline Split parse_split(const std::string& s) {
  if (s == "all") return Split::kAll;
  if (s == "calib") return Split::kCalib;
  if (s == "eval") return Split::kEval;
  throw Error(ErrorKind::kConfig, "unknown split '" + s + "' (expected all, calib or eval)");
}

struct CalibrationSet {
  TokenBatch sequences;  // [count x seq_len]
  std::size_t seq_len = 0;
  std::size_t count = 0;
  std::string source_hash;
  std::uint64_t seed = 0;
  std::vector<std::size_t> window_starts;  // token offsets into the corpus, ascending

  bool operator==(const CalibrationSet&) const = default;

  // Identifies the exact token content and sampling parameters.
  std::string fingerprint() const {
    Fnv1a h;
    h.update(source_hash);
    h.update_u64(seq_len);
    h.update_u64(count);
    h.update_u64(seed);
    for (const auto s : window_starts) h.update_u64(s);
    h.update(sequences.storage().data(), sequences.size() * sizeof(std::int32_t));
    return h.hex();
  }
};

inline std::string hash_tokens(std::span<const std::int32_t> tokens) {
  Fnv1a h;
  for (const auto id : tokens) {
    const auto v = static_cast<std::uint32_t>(id);
    h.update(&v, sizeof(v));
  }
  return h.hex();
}

// Reads a corpus of token ids. Files ending in .jsonl hold one {"ids": [...]}
// object per line (concatenated in file order); anything else is a flat array
// of little-endian uint32 ids.
inline std::vector<std::int32_t> read_token_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open corpus " + path.string());
  std::vector<std::int32_t> ids;
  auto push = [&](std::uint64_t v) {
    if (v > static_cast<std::uint64_t>(std::numeric_limits<std::int32_t>::max())) {
      throw Error(ErrorKind::kInput, path.string() + ": token id " + std::to_string(v) +
                                         " does not fit a signed 32-bit id");
    }
    ids.push_back(static_cast<std::int32_t>(v));
  };
  if (path.extension() == ".jsonl") {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        for (const auto& v : j.at("ids")) push(v.get<std::uint64_t>());
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::kInput,
                    path.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    return ids;
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  if (bytes.size() % 4 != 0) {
    throw Error(ErrorKind::kInput, path.string() + ": size " + std::to_string(bytes.size()) +
                                       " is not a multiple of 4 bytes");
  }
  ids.reserve(bytes.size() / 4);
  for (std::size_t i = 0; i < bytes.size(); i += 4) {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + i, 4);
    push(v);
  }
  return ids;
}

inline void write_token_corpus(const std::filesystem::path& path,
                               std::span<const std::int32_t> ids) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  for (const auto id : ids) {
    const auto v = static_cast<std::uint32_t>(id);
    out.write(reinterpret_cast<const char*>(&v), 4);
  }
  if (!out) throw Error(ErrorKind::kIo, "failed writing " + path.string());
}

// Picks `count` non-overlapping windows of `seq_len` tokens. The corpus is cut
// into floor(N / seq_len) slots; a Fisher-Yates shuffle seeded by `seed`
// orders the slots of the requested split and the first `count` are kept in
// ascending corpus order.
inline CalibrationSet make_calibration(std::span<const std::int32_t> corpus, std::size_t seq_len,
                                       std::size_t count, std::uint64_t seed,
                                       Split split = Split::kAll,
                                       std::string source_hash = {}) {
  if (seq_len < 2) throw Error(ErrorKind::kInput, "calibration seq_len must be at least 2");
  if (count < 1) throw Error(ErrorKind::kInput, "calibration count must be at least 1");
  const std::size_t slots = corpus.size() / seq_len;
  std::size_t lo = 0, hi = slots;
  if (split == Split::kCalib) hi = slots / 2;
  if (split == Split::kEval) lo = slots / 2;
  if (hi - lo < count) {
    const std::size_t factor = split == Split::kAll ? 1 : 2;
    throw Error(ErrorKind::kInput,
                "corpus too short: " + std::to_string(count) + " windows of " +
                    std::to_string(seq_len) + " tokens in split '" + to_string(split) +
                    "' need " + std::to_string(factor * count * seq_len) + " tokens, have " +
                    std::to_string(corpus.size()));
  }
  std::vector<std::size_t> order(hi - lo);
  std::iota(order.begin(), order.end(), lo);
  PortableRng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.below(i)]);
  }
  order.resize(count);
  std::sort(order.begin(), order.end());

  CalibrationSet set;
  set.seq_len = seq_len;
  set.count = count;
  set.seed = seed;
  set.source_hash = source_hash.empty() ? hash_tokens(corpus) : std::move(source_hash);
  set.sequences = TokenBatch({count, seq_len});
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t start = order[i] * seq_len;
    set.window_starts.push_back(start);
    std::copy_n(corpus.begin() + static_cast<std::ptrdiff_t>(start), seq_len,
                set.sequences.row(i).begin());
  }
  return set;
}

inline CalibrationSet load_calibration(const std::filesystem::path& path, std::size_t seq_len,
                                       std::size_t count, std::uint64_t seed,
                                       Split split = Split::kAll) {
  const auto corpus = read_token_corpus(path);
  return make_calibration(corpus, seq_len, count, seed, split);
}

}  // namespace layercull
