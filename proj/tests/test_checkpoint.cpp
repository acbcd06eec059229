#include <gtest/gtest.h>

#include <cstring>

#include "helpers.hpp"

using namespace layercull;
using testutil::config;
using testutil::slurp;
using testutil::TempDir;

namespace {

void spit(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary) << bytes;
}

// Parses the tensor-file header, lets fn edit it, and writes the file back
// with the payload untouched.
template <typename Fn>
void edit_header(const std::filesystem::path& file, Fn&& fn) {
  const std::string bytes = slurp(file);
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data(), 8);
  auto header = json::parse(bytes.substr(8, len));
  fn(header);
  const std::string head = header.dump();
  std::string out(8, '\0');
  const std::uint64_t n = head.size();
  std::memcpy(out.data(), &n, 8);
  spit(file, out + head + bytes.substr(8 + len));
}

Error load_error(const std::filesystem::path& p) {
  try {
    load_checkpoint<float>(p);
  } catch (const Error& e) {
    return e;
  }
  ADD_FAILURE() << "load succeeded";
  return Error(ErrorKind::kIo, "none");
}

PruneLog sample_log() {
  PruneLog log;
  log.seed = 17;
  log.calib_fingerprint = "00ff00ff00ff00ff";
  log.mode = "iterative";
  log.compensate = true;
  log.original_n_layers = 5;
  log.entries.push_back({0, "BI", 3, 3, 1, 1.2345678901234567, 23.45678901234567, true});
  log.entries.push_back({1, "BI", 4, 3, 1, 0.9876543210987654, -1.2345432101234, true});
  return log;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitwise) {
  TempDir dir;
  for (const std::uint64_t seed : {0u, 1u}) {
    const auto cfg = config(3, 16, 2, 24, 40);
    const auto wf = random_weights<float>(cfg, seed);
    save_checkpoint(dir / "f.safetensors", cfg, wf);
    const auto ck = load_checkpoint<float>(dir / "f.safetensors");
    EXPECT_EQ(ck.config, cfg);
    EXPECT_EQ(ck.weights, wf);

    const auto wd = random_weights<double>(cfg, seed);
    save_checkpoint(dir / "d", cfg, wd);
    EXPECT_EQ(checkpoint_dtype(dir / "d"), "F64");
    EXPECT_EQ(load_checkpoint<double>(dir / "d").weights, wd);
  }
}

TEST(Checkpoint, ConfigFieldsSurviveExactly) {
  TempDir dir;
  auto cfg = config(2, 8, 2, 16, 16);
  cfg.norm_eps = 1.2345678901234e-7;
  cfg.rope_theta = 500000.123;
  cfg.max_seq_len = 77;
  save_checkpoint(dir / "m", cfg, random_weights<float>(cfg, 3));
  EXPECT_EQ(load_checkpoint<float>(dir / "m").config, cfg);
}

TEST(Checkpoint, DoubleFileLoadsAsFloat) {
  TempDir dir;
  const auto cfg = config(1, 8, 2, 16, 16);
  const auto wd = random_weights<double>(cfg, 5);
  save_checkpoint(dir / "m", cfg, wd);
  const auto wf = load_checkpoint<float>(dir / "m").weights;
  EXPECT_EQ(wf.lm_head[3], static_cast<float>(wd.lm_head[3]));
}

TEST(Checkpoint, SavesAreByteIdentical) {
  TempDir dir;
  const auto cfg = config(4);
  const auto w = random_weights<float>(cfg, 9);
  save_checkpoint(dir / "a", cfg, w, sample_log());
  save_checkpoint(dir / "b", cfg, w, sample_log());
  for (const char* ext : {".safetensors", ".config.json", ".prunelog.json"}) {
    const auto a = slurp(dir / (std::string("a") + ext));
    EXPECT_FALSE(a.empty()) << ext;
    EXPECT_EQ(a, slurp(dir / (std::string("b") + ext))) << ext;
  }
}

TEST(Checkpoint, ContainerLayout) {
  TempDir dir;
  const auto cfg = config(1, 8, 2, 16, 16);
  save_checkpoint(dir / "m", cfg, random_weights<float>(cfg, 1));
  const std::string bytes = slurp(dir / "m.safetensors");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data(), 8);
  EXPECT_EQ(len % 8, 0u);
  const auto header = json::parse(bytes.substr(8, len));
  std::vector<std::string> keys;
  for (const auto& [k, _] : header.items()) keys.push_back(k);
  EXPECT_TRUE(std::is_sorted(keys.begin(), keys.end()));
  std::size_t payload = 0;
  for (const auto& [name, shape] : expected_tensor_shapes(cfg)) {
    ASSERT_TRUE(header.contains(name)) << name;
    EXPECT_EQ(header[name]["dtype"], "F32");
    EXPECT_EQ(header[name]["shape"].get<Shape>(), shape);
    payload += shape_numel(shape) * 4;
  }
  EXPECT_EQ(bytes.size(), 8 + len + payload);
  EXPECT_TRUE(header.contains("layers.0.attn.q.weight"));
  EXPECT_TRUE(header.contains("layers.0.mlp.down.weight"));
  EXPECT_TRUE(header.contains("layers.0.norm_mlp.gamma"));
  EXPECT_TRUE(header.contains("final_norm.gamma"));
}

TEST(Checkpoint, PruneLogRoundTrip) {
  TempDir dir;
  auto cfg = config(3);
  save_checkpoint(dir / "m", cfg, random_weights<float>(cfg, 2), sample_log());
  const auto log = load_prune_log(dir / "m");
  ASSERT_TRUE(log);
  EXPECT_EQ(*log, sample_log());
}

TEST(Checkpoint, SaveWithoutLogDropsStaleLog) {
  TempDir dir;
  auto cfg = config(3);
  const auto w = random_weights<float>(cfg, 2);
  save_checkpoint(dir / "m", cfg, w, sample_log());
  save_checkpoint(dir / "m", cfg, w);
  EXPECT_FALSE(load_prune_log(dir / "m"));
}

TEST(Checkpoint, ZeroLayerModel) {
  TempDir dir;
  const auto cfg = config(0);
  const auto w = random_weights<float>(cfg, 4);
  save_checkpoint(dir / "z", cfg, w);
  const auto ck = load_checkpoint<float>(dir / "z");
  EXPECT_TRUE(ck.weights.layers.empty());
  EXPECT_EQ(ck.config.n_layers, 0u);
  EXPECT_EQ(ck.weights, w);
}

TEST(Checkpoint, MissingTensorIsNamed) {
  TempDir dir;
  const auto cfg = config(2);
  save_checkpoint(dir / "m", cfg, random_weights<float>(cfg, 1));
  edit_header(dir / "m.safetensors", [](json& h) { h.erase("layers.1.mlp.up.weight"); });
  const auto e = load_error(dir / "m");
  EXPECT_EQ(e.kind(), ErrorKind::kSchema);
  EXPECT_NE(std::string(e.what()).find("layers.1.mlp.up.weight"), std::string::npos) << e.what();
}

TEST(Checkpoint, ConfigDeclaresMoreLayersThanStored) {
  TempDir dir;
  const auto cfg = config(2);
  save_checkpoint(dir / "m", cfg, random_weights<float>(cfg, 1));
  auto j = json::parse(slurp(dir / "m.config.json"));
  j["n_layers"] = 3;
  spit(dir / "m.config.json", j.dump());
  const auto e = load_error(dir / "m");
  EXPECT_EQ(e.kind(), ErrorKind::kSchema);
  EXPECT_NE(std::string(e.what()).find("layers.2."), std::string::npos) << e.what();
}

TEST(Checkpoint, ExtraTensorIsRejected) {
  TempDir dir;
  const auto cfg = config(2);
  save_checkpoint(dir / "m", cfg, random_weights<float>(cfg, 1));
  auto j = json::parse(slurp(dir / "m.config.json"));
  j["n_layers"] = 1;
  spit(dir / "m.config.json", j.dump());
  const auto e = load_error(dir / "m");
  EXPECT_EQ(e.kind(), ErrorKind::kSchema);
  EXPECT_NE(std::string(e.what()).find("unexpected tensor layers.1"), std::string::npos)
      << e.what();
}

TEST(Checkpoint, ShapeMismatchReportsExpectedAndActual) {
  TempDir dir;
  const auto cfg = config(1, 16, 2, 32);
  save_checkpoint(dir / "m", cfg, random_weights<float>(cfg, 1));
  auto j = json::parse(slurp(dir / "m.config.json"));
  j["d_ff"] = 24;
  spit(dir / "m.config.json", j.dump());
  const auto e = load_error(dir / "m");
  EXPECT_EQ(e.kind(), ErrorKind::kSchema);
  const std::string msg = e.what();
  EXPECT_NE(msg.find("[16x24]"), std::string::npos) << msg;
  EXPECT_NE(msg.find("[16x32]"), std::string::npos) << msg;
}

TEST(Checkpoint, CorruptContainers) {
  TempDir dir;
  const auto cfg = config(1);
  save_checkpoint(dir / "m", cfg, random_weights<float>(cfg, 1));
  const std::string good = slurp(dir / "m.safetensors");

  spit(dir / "m.safetensors", good.substr(0, 5));
  EXPECT_EQ(load_error(dir / "m").kind(), ErrorKind::kSchema);

  spit(dir / "m.safetensors", good.substr(0, good.size() - 4));
  EXPECT_EQ(load_error(dir / "m").kind(), ErrorKind::kSchema);

  spit(dir / "m.safetensors", good);
  edit_header(dir / "m.safetensors", [](json& h) { h["lm_head.weight"]["dtype"] = "BF16"; });
  EXPECT_NE(std::string(load_error(dir / "m").what()).find("BF16"), std::string::npos);

  spit(dir / "m.safetensors", good);
  spit(dir / "m.config.json", "{\"n_layers\": ");
  EXPECT_EQ(load_error(dir / "m").kind(), ErrorKind::kSchema);
}

TEST(Checkpoint, MissingFileIsIoErrorWithPath) {
  TempDir dir;
  const auto e = load_error(dir / "nope");
  EXPECT_EQ(e.kind(), ErrorKind::kIo);
  EXPECT_NE(std::string(e.what()).find("nope"), std::string::npos);
}

TEST(Checkpoint, UnwritablePathIsIoError) {
  const auto cfg = config(1);
  try {
    save_checkpoint("/proc/layercull/none/m", cfg, random_weights<float>(cfg, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIo);
    EXPECT_NE(std::string(e.what()).find("/proc/layercull/none/m"), std::string::npos);
  }
}

TEST(PruneLog, ReplayAndValidation) {
  const auto log = sample_log();
  EXPECT_EQ(replay_original_indices(log), (std::vector<std::size_t>{3, 4}));
  EXPECT_EQ(surviving_original_indices(log), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_NO_THROW(validate_prune_log(log));

  auto bad = log;
  bad.entries[1].removed_original_index = 2;
  EXPECT_THROW(validate_prune_log(bad), Error);
  bad = log;
  bad.entries[0].alpha = 0.0;
  EXPECT_THROW(validate_prune_log(bad), Error);
  bad = log;
  bad.entries[1].removed_current_index = 4;
  EXPECT_THROW(validate_prune_log(bad), Error);
  EXPECT_THROW(surviving_original_indices(bad), Error);
}

TEST(PruneLog, InvalidLogIsNotSaved) {
  TempDir dir;
  const auto cfg = config(2);
  auto log = sample_log();
  log.entries[0].alpha = -1.0;
  EXPECT_THROW(save_checkpoint(dir / "m", cfg, random_weights<float>(cfg, 1), log), Error);
}

TEST(PruneLog, MalformedJsonIsSchemaError) {
  TempDir dir;
  const auto cfg = config(2);
  save_checkpoint(dir / "m", cfg, random_weights<float>(cfg, 1), sample_log());
  auto j = json::parse(slurp(dir / "m.prunelog.json"));
  j["entries"][0].erase("alpha");
  spit(dir / "m.prunelog.json", j.dump());
  try {
    load_prune_log(dir / "m");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kSchema);
  }
}
