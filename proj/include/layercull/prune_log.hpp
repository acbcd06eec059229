#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "layercull/error.hpp"

namespace layercull {

struct PruneLogEntry {
  std::size_t step = 0;
  std::string metric_name;
  std::size_t removed_original_index = 0;  // index in the unpruned model
  std::size_t removed_current_index = 0;   // index at the time of removal
  std::size_t span_len = 1;                // > 1 only for contiguous-window removals
  double alpha = 1.0;                      // measured compensation factor
  double gain_ratio_percent = 0.0;         // (alpha - 1) * 100
  bool fused = false;                      // whether alpha was folded into the weights

  bool operator==(const PruneLogEntry&) const = default;
};

struct PruneLog {
  std::vector<PruneLogEntry> entries;
  std::uint64_t seed = 0;
  std::string calib_fingerprint;
  std::string mode;  // "iterative" or "one-shot"
  bool compensate = false;
  std::size_t original_n_layers = 0;

  bool operator==(const PruneLog&) const = default;
};

// Walks the entries against the surviving-layer list of the unpruned model and
// returns the original index each removal resolves to. Throws if an entry
// points past the current depth.
inline std::vector<std::size_t> replay_original_indices(const PruneLog& log) {
  std::vector<std::size_t> surviving(log.original_n_layers);
  std::iota(surviving.begin(), surviving.end(), std::size_t{0});
  std::vector<std::size_t> out;
  for (const auto& e : log.entries) {
    if (e.span_len == 0 || e.removed_current_index + e.span_len > surviving.size()) {
      throw Error(ErrorKind::kIndex, "prune log step " + std::to_string(e.step) +
                                         " removes layers past the current depth " +
                                         std::to_string(surviving.size()));
    }
    const auto first = surviving.begin() + static_cast<std::ptrdiff_t>(e.removed_current_index);
    out.push_back(*first);
    surviving.erase(first, first + static_cast<std::ptrdiff_t>(e.span_len));
  }
  return out;
}

inline void validate_prune_log(const PruneLog& log) {
  std::set<std::size_t> seen;
  const auto replayed = replay_original_indices(log);
  for (std::size_t i = 0; i < log.entries.size(); ++i) {
    const auto& e = log.entries[i];
    if (!(e.alpha > 0.0)) {
      throw Error(ErrorKind::kSchema,
                  "prune log step " + std::to_string(e.step) + " has non-positive alpha");
    }
    if (replayed[i] != e.removed_original_index) {
      throw Error(ErrorKind::kSchema, "prune log step " + std::to_string(e.step) +
                                          " maps to original layer " +
                                          std::to_string(replayed[i]) + " but records " +
                                          std::to_string(e.removed_original_index));
    }
    for (std::size_t k = 0; k < e.span_len; ++k) {
      if (!seen.insert(e.removed_original_index + k).second) {
        throw Error(ErrorKind::kSchema, "prune log removes original layer " +
                                            std::to_string(e.removed_original_index + k) +
                                            " twice");
      }
    }
  }
}

// Original layer indices still present after applying the log.
inline std::vector<std::size_t> surviving_original_indices(const PruneLog& log) {
  replay_original_indices(log);  // bounds check
  std::vector<std::size_t> surviving(log.original_n_layers);
  std::iota(surviving.begin(), surviving.end(), std::size_t{0});
  for (const auto& e : log.entries) {
    const auto first = surviving.begin() + static_cast<std::ptrdiff_t>(e.removed_current_index);
    surviving.erase(first, first + static_cast<std::ptrdiff_t>(e.span_len));
  }
  return surviving;
}

}  // namespace layercull
