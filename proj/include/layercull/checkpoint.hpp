#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "layercull/error.hpp"
#include "layercull/model.hpp"
#include "layercull/prune_log.hpp"

// Checkpoint layout
//
//   <name>.safetensors     8-byte little-endian header length, JSON header
//                          {tensor name: {dtype, shape, data_offsets}},
//                          raw little-endian buffers
//   <name>.config.json     ModelConfig
//   <name>.prunelog.json   PruneLog (optional)
//
// Tensor names: embed.weight, layers.{i}.attn.{q|k|v|o}.weight,
// layers.{i}.mlp.{gate|up|down}.weight, layers.{i}.norm_{attn|mlp}.gamma,
// final_norm.gamma, lm_head.weight.

namespace layercull {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

using nlohmann::json;

struct CheckpointPaths {
  std::filesystem::path tensors;
  std::filesystem::path config;
  std::filesystem::path prune_log;
};

// Accepts "<name>" or "<name>.safetensors".
inline CheckpointPaths checkpoint_paths(const std::filesystem::path& path) {
  std::string base = path.string();
  constexpr std::string_view ext = ".safetensors";
  if (base.size() > ext.size() && base.compare(base.size() - ext.size(), ext.size(), ext) == 0) {
    base.resize(base.size() - ext.size());
  }
  return {base + ".safetensors", base + ".config.json", base + ".prunelog.json"};
}

inline json config_to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},     {"d_model", c.d_model},
              {"n_heads", c.n_heads},       {"d_head", c.d_head},
              {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size},
              {"norm_eps", c.norm_eps},     {"rope_theta", c.rope_theta},
              {"max_seq_len", c.max_seq_len}};
}

inline ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_head = j.at("d_head").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.norm_eps = j.at("norm_eps").get<double>();
    c.rope_theta = j.at("rope_theta").get<double>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kSchema, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

inline json prune_log_to_json(const PruneLog& log) {
  json entries = json::array();
  for (const auto& e : log.entries) {
    entries.push_back(json{{"step", e.step},
                           {"metric_name", e.metric_name},
                           {"removed_original_index", e.removed_original_index},
                           {"removed_current_index", e.removed_current_index},
                           {"span_len", e.span_len},
                           {"alpha", e.alpha},
                           {"gain_ratio_percent", e.gain_ratio_percent},
                           {"fused", e.fused}});
  }
  return json{{"entries", entries},
              {"seed", log.seed},
              {"calib_fingerprint", log.calib_fingerprint},
              {"mode", log.mode},
              {"compensate", log.compensate},
              {"original_n_layers", log.original_n_layers}};
}

inline PruneLog prune_log_from_json(const json& j) {
  PruneLog log;
  try {
    log.seed = j.at("seed").get<std::uint64_t>();
    log.calib_fingerprint = j.at("calib_fingerprint").get<std::string>();
    log.mode = j.at("mode").get<std::string>();
    log.compensate = j.at("compensate").get<bool>();
    log.original_n_layers = j.at("original_n_layers").get<std::size_t>();
    for (const auto& je : j.at("entries")) {
      PruneLogEntry e;
      e.step = je.at("step").get<std::size_t>();
      e.metric_name = je.at("metric_name").get<std::string>();
      e.removed_original_index = je.at("removed_original_index").get<std::size_t>();
      e.removed_current_index = je.at("removed_current_index").get<std::size_t>();
      e.span_len = je.at("span_len").get<std::size_t>();
      e.alpha = je.at("alpha").get<double>();
      e.gain_ratio_percent = je.at("gain_ratio_percent").get<double>();
      e.fused = je.at("fused").get<bool>();
      log.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kSchema, std::string("prune log: ") + e.what());
  }
  validate_prune_log(log);
  return log;
}

namespace detail {

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::kIo, "failed writing " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline json read_json_file(const std::filesystem::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kSchema, path.string() + ": " + e.what());
  }
}

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "F32";
  else if constexpr (std::is_same_v<T, double>) return "F64";
  else static_assert(sizeof(T) == 0, "unsupported element type");
}

template <typename Src, typename T>
void copy_converted(const char* bytes, std::size_t n, std::vector<T>& out) {
  out.resize(n);
  if constexpr (std::is_same_v<Src, T>) {
    std::memcpy(out.data(), bytes, n * sizeof(T));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      Src v;
      std::memcpy(&v, bytes + i * sizeof(Src), sizeof(Src));
      out[i] = static_cast<T>(v);
    }
  }
}

}  // namespace detail

// Serializes tensors in canonical order. Header keys are sorted and the header
// is space-padded to a multiple of 8 bytes, so equal inputs give equal bytes.
template <typename T>
std::string encode_safetensors(const ModelWeights<T>& weights) {
  json header = json::object();
  header["__metadata__"] = json{{"format", "layercull"}};
  std::string payload;
  for_each_tensor(weights, [&](const std::string& name, const Tensor<T>& t) {
    const std::size_t begin = payload.size();
    payload.append(reinterpret_cast<const char*>(t.storage().data()), t.size() * sizeof(T));
    header[name] = json{{"dtype", detail::dtype_name<T>()},
                        {"shape", t.shape()},
                        {"data_offsets", {begin, payload.size()}}};
  });
  std::string head = header.dump();
  head.append((8 - head.size() % 8) % 8, ' ');
  std::string out(8, '\0');
  const std::uint64_t len = head.size();
  std::memcpy(out.data(), &len, sizeof(len));
  out += head;
  out += payload;
  return out;
}

template <typename T>
ModelWeights<T> decode_safetensors(std::string_view bytes, const ModelConfig& cfg,
                                   const std::string& source = "<memory>") {
  if (bytes.size() < 8) throw Error(ErrorKind::kSchema, source + ": truncated header length");
  std::uint64_t head_len = 0;
  std::memcpy(&head_len, bytes.data(), sizeof(head_len));
  if (head_len > bytes.size() - 8) {
    throw Error(ErrorKind::kSchema, source + ": header length exceeds file size");
  }
  json header;
  try {
    header = json::parse(bytes.substr(8, head_len));
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kSchema, source + ": bad header: " + e.what());
  }
  const std::string_view data = bytes.substr(8 + head_len);

  std::map<std::string, std::vector<T>> buffers;
  const auto expected = expected_tensor_shapes(cfg);
  std::set<std::string> expected_names;
  for (const auto& [name, shape] : expected) {
    expected_names.insert(name);
    if (!header.contains(name)) {
      throw Error(ErrorKind::kSchema, source + ": missing tensor " + name);
    }
    const json& entry = header[name];
    Shape shape_found;
    std::string dtype;
    std::size_t begin = 0, end = 0;
    try {
      shape_found = entry.at("shape").get<Shape>();
      dtype = entry.at("dtype").get<std::string>();
      begin = entry.at("data_offsets").at(0).get<std::size_t>();
      end = entry.at("data_offsets").at(1).get<std::size_t>();
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kSchema, source + ": tensor " + name + ": " + e.what());
    }
    if (shape_found != shape) {
      throw Error(ErrorKind::kSchema, source + ": tensor " + name + ": expected shape " +
                                          shape_to_string(shape) + ", got " +
                                          shape_to_string(shape_found));
    }
    const std::size_t elem = dtype == "F32" ? 4 : dtype == "F64" ? 8 : 0;
    if (elem == 0) {
      throw Error(ErrorKind::kSchema, source + ": tensor " + name + ": unsupported dtype " + dtype);
    }
    const std::size_t n = shape_numel(shape);
    if (end < begin || end > data.size() || end - begin != n * elem) {
      throw Error(ErrorKind::kSchema, source + ": tensor " + name + ": bad data offsets");
    }
    auto& buf = buffers[name];
    if (elem == 4) detail::copy_converted<float>(data.data() + begin, n, buf);
    else detail::copy_converted<double>(data.data() + begin, n, buf);
  }
  for (const auto& [name, _] : header.items()) {
    if (name != "__metadata__" && !expected_names.count(name)) {
      throw Error(ErrorKind::kSchema, source + ": unexpected tensor " + name + " for a " +
                                          std::to_string(cfg.n_layers) + "-layer config");
    }
  }

  ModelWeights<T> weights = make_zero_weights<T>(cfg);
  for_each_tensor(weights, [&](const std::string& name, Tensor<T>& t) {
    t = Tensor<T>(t.shape(), std::move(buffers.at(name)));
  });
  return weights;
}

// Element type recorded for embed.weight in a tensor file ("F32" or "F64").
inline std::string checkpoint_dtype(const std::filesystem::path& path) {
  const auto paths = checkpoint_paths(path);
  const std::string bytes = detail::read_file(paths.tensors);
  if (bytes.size() < 8) throw Error(ErrorKind::kSchema, paths.tensors.string() + ": truncated");
  std::uint64_t head_len = 0;
  std::memcpy(&head_len, bytes.data(), sizeof(head_len));
  if (head_len > bytes.size() - 8) {
    throw Error(ErrorKind::kSchema, paths.tensors.string() + ": header length exceeds file size");
  }
  try {
    const json header = json::parse(std::string_view(bytes).substr(8, head_len));
    return header.at("embed.weight").at("dtype").get<std::string>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kSchema, paths.tensors.string() + ": " + e.what());
  }
}

template <typename T>
struct Checkpoint {
  ModelConfig config;
  ModelWeights<T> weights;
};

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  const auto paths = checkpoint_paths(path);
  Checkpoint<T> ck;
  ck.config = config_from_json(detail::read_json_file(paths.config));
  ck.weights = decode_safetensors<T>(detail::read_file(paths.tensors), ck.config,
                                     paths.tensors.string());
  validate_weights(ck.weights, ck.config);
  return ck;
}

inline std::optional<PruneLog> load_prune_log(const std::filesystem::path& path) {
  const auto paths = checkpoint_paths(path);
  if (!std::filesystem::exists(paths.prune_log)) return std::nullopt;
  return prune_log_from_json(detail::read_json_file(paths.prune_log));
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     const ModelWeights<T>& weights, const std::optional<PruneLog>& log = {}) {
  validate_weights(weights, cfg);
  const auto paths = checkpoint_paths(path);
  if (paths.tensors.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(paths.tensors.parent_path(), ec);
  }
  detail::write_file(paths.tensors, encode_safetensors(weights));
  detail::write_file(paths.config, config_to_json(cfg).dump(2) + "\n");
  if (log) {
    validate_prune_log(*log);
    detail::write_file(paths.prune_log, prune_log_to_json(*log).dump(2) + "\n");
  } else {
    // A log left over from an earlier save would describe different weights.
    std::error_code ec;
    std::filesystem::remove(paths.prune_log, ec);
  }
}

}  // namespace layercull
