#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "layercull/layercull.hpp"

namespace layercull::cli {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumericFailure = 3 };

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
    case ErrorKind::kIndex: return kUsage;
    case ErrorKind::kNumeric: return kNumericFailure;
    default: return kData;
  }
}

// Shortest text that parses back to the same double.
inline std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return {buf, res.ptr};
}

struct CalibFlags {
  std::string path;
  std::size_t seq_len = 128;
  std::size_t count = 32;
  std::uint64_t seed = 0;
  std::string split = "all";

  void add_to(CLI::App& app, bool required = true) {
    auto* opt = app.add_option("--calib", path, "token corpus (.bin uint32 or .jsonl)");
    if (required) opt->required();
    app.add_option("--calib-seq-len", seq_len, "tokens per calibration sequence")
        ->check(CLI::Range(2, 1 << 20));
    app.add_option("--calib-count", count, "number of calibration sequences")
        ->check(CLI::Range(1, 1 << 20));
    app.add_option("--seed", seed, "window-selection seed");
    app.add_option("--split", split, "corpus half to draw from")
        ->check(CLI::IsMember({"all", "calib", "eval"}));
  }

  CalibrationSet load() const {
    return load_calibration(path, seq_len, count, seed, parse_split(split));
  }
};

inline ProtectRule parse_protect_rule(const std::string& s) {
  if (s == "auto") return ProtectRule::kAuto;
  if (s == "absolute") return ProtectRule::kAbsolute;
  return ProtectRule::kScaled;
}

template <typename Fn>
void with_checkpoint(const std::string& path, Fn&& fn) {
  const std::string dtype = checkpoint_dtype(path);
  if (dtype == "F64") {
    fn(load_checkpoint<double>(path));
  } else if (dtype == "F32") {
    fn(load_checkpoint<float>(path));
  } else {
    throw Error(ErrorKind::kSchema, path + ": unsupported dtype " + dtype);
  }
}

// Writes to `path` if given, otherwise to `out`.
class ReportSink {
 public:
  ReportSink(const std::string& path, std::ostream& out) : out_(&out) {
    if (!path.empty()) {
      file_.open(path, std::ios::trunc);
      if (!file_) throw Error(ErrorKind::kIo, "cannot open " + path + " for writing");
      out_ = &file_;
    }
  }
  std::ostream& stream() { return *out_; }

 private:
  std::ofstream file_;
  std::ostream* out_;
};

inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Training-free layer pruning with magnitude compensation", "layercull"};
  app.require_subcommand(1);
  app.fallthrough();
  std::size_t threads = 0;
  app.add_option("--threads", threads, "worker threads (0: LAYERCULL_THREADS or all cores)");

  std::string model, out_path, metric = "bi", mode = "iterative", protect = "auto";
  CalibFlags calib;
  std::size_t window = 0, n_remove = 1;
  bool compensate = true;
  auto add_model = [&](CLI::App* sub) {
    sub->add_option("--model", model, "checkpoint path")->required();
  };
  auto add_protect = [&](CLI::App* sub) {
    sub->add_option("--protect", protect, "protect rule for taylor+ / mag+")
        ->check(CLI::IsMember({"auto", "absolute", "scaled"}));
  };

  auto* gains = app.add_subcommand("inspect-gains", "per-layer magnitude gain ratios as CSV");
  add_model(gains);
  calib.add_to(*gains);
  gains->add_option("--out", out_path, "write the CSV here instead of stdout");

  auto* score = app.add_subcommand("score", "per-layer importance scores as CSV");
  add_model(score);
  calib.add_to(*score);
  score->add_option("--metric", metric, "bi, cl, ppl, taylor+ or mag+")->required();
  score->add_option("--window", window, "CL window length")->check(CLI::PositiveNumber);
  add_protect(score);
  score->add_option("--out", out_path, "write the CSV here instead of stdout");

  auto* prune = app.add_subcommand("prune", "remove layers and fuse compensation");
  add_model(prune);
  calib.add_to(*prune);
  prune->add_option("--metric", metric, "bi, cl, ppl, taylor+ or mag+")->required();
  prune->add_option("--n-remove", n_remove, "layers to remove")->required();
  prune->add_option("--mode", mode, "iterative or one-shot")
      ->check(CLI::IsMember({"iterative", "one-shot"}));
  prune->add_flag("--compensate,!--no-compensate", compensate, "fuse alpha (default on)");
  add_protect(prune);
  prune->add_option("--out", out_path, "output checkpoint path")->required();

  std::string data;
  std::size_t seq_len = 128, count = 32;
  std::uint64_t seed = 0;
  std::string split = "eval";
  auto* ppl = app.add_subcommand("eval-ppl", "perplexity on held-out windows");
  add_model(ppl);
  ppl->add_option("--data", data, "token corpus")->required();
  ppl->add_option("--seq-len", seq_len, "tokens per window")->check(CLI::Range(2, 1 << 20));
  ppl->add_option("--count", count, "number of windows")->check(CLI::Range(1, 1 << 20));
  ppl->add_option("--seed", seed, "window-selection seed");
  ppl->add_option("--split", split, "corpus half to draw from")
      ->check(CLI::IsMember({"all", "calib", "eval"}));

  std::size_t layer = 0;
  std::optional<double> alpha;
  std::optional<double> tolerance;
  double perturb_wo = 1.0;
  auto* verify = app.add_subcommand("verify-fusion", "fused model vs runtime-scaled skip");
  add_model(verify);
  calib.add_to(*verify);
  verify->add_option("--layer", layer, "layer to remove")->required();
  verify->add_option("--alpha", alpha, "compensation factor (default: measured)")
      ->check(CLI::PositiveNumber);
  verify->add_option("--tolerance", tolerance, "max logit diff (default 1e-4 F32, 1e-9 F64)")
      ->check(CLI::NonNegativeNumber);
  verify->add_option("--perturb-wo", perturb_wo,
                     "scale one fused w_o by this factor, to exercise the failure path")
      ->check(CLI::PositiveNumber);

  ModelConfig toy_cfg;
  toy_cfg.n_layers = 8;
  toy_cfg.d_model = 64;
  toy_cfg.n_heads = 4;
  toy_cfg.d_ff = 128;
  toy_cfg.vocab_size = 256;
  toy_cfg.max_seq_len = 256;
  ToyInit init;
  init.stream_scale = 1000.0;  // keeps norm eps negligible next to the residual stream
  std::string dtype = "f32";
  std::vector<std::size_t> identity_layers;
  auto* toy = app.add_subcommand("toy-model", "write a random checkpoint");
  toy->add_option("--out", out_path, "output checkpoint path")->required();
  toy->add_option("--layers", toy_cfg.n_layers, "decoder layers");
  toy->add_option("--d-model", toy_cfg.d_model, "hidden width");
  toy->add_option("--heads", toy_cfg.n_heads, "attention heads");
  toy->add_option("--d-ff", toy_cfg.d_ff, "MLP width");
  toy->add_option("--vocab", toy_cfg.vocab_size, "vocabulary size");
  toy->add_option("--max-seq-len", toy_cfg.max_seq_len, "longest supported sequence");
  toy->add_option("--seed", seed, "initialization seed");
  toy->add_option("--dtype", dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  toy->add_option("--stream-scale", init.stream_scale,
                  "multiply embed, w_o and w_down (same function, larger residual stream)")
      ->check(CLI::PositiveNumber);
  toy->add_option("--identity-layers", identity_layers, "layers whose branches are zeroed")
      ->delimiter(',');

  std::size_t n_tokens = 65536, segment_len = 64;
  double temperature = 1.0;
  auto* corpus = app.add_subcommand("toy-corpus", "sample a token corpus from a model");
  add_model(corpus);
  corpus->add_option("--out", out_path, "output .bin path")->required();
  corpus->add_option("--tokens", n_tokens, "corpus length")->check(CLI::PositiveNumber);
  corpus->add_option("--segment-len", segment_len, "tokens per sampled segment")
      ->check(CLI::PositiveNumber);
  corpus->add_option("--temperature", temperature, "sampling temperature")
      ->check(CLI::PositiveNumber);
  corpus->add_option("--seed", seed, "sampling seed");

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  set_thread_count(threads);
  try {
    if (gains->parsed()) {
      const auto set = calib.load();
      ReportSink sink(out_path, out);
      with_checkpoint(model, [&](const auto& ck) {
        const auto report = gain_ratios(ck.weights, ck.config, set);
        sink.stream() << "layer_index,delta_percent\n";
        for (std::size_t l = 0; l < report.delta_percent.size(); ++l) {
          sink.stream() << l << "," << num(report.delta_percent[l]) << "\n";
        }
      });
    } else if (score->parsed()) {
      const Metric m = parse_metric(metric);
      const auto set = calib.load();
      MetricOptions opts;
      opts.protect_rule = parse_protect_rule(protect);
      opts.window_len = window ? window : 1;
      ReportSink sink(out_path, out);
      with_checkpoint(model, [&](const auto& ck) {
        const auto r = select_prune_target(m, ck.weights, ck.config, set, opts);
        sink.stream() << "index,score,protected,chosen\n";
        for (std::size_t i = 0; i < r.scores.size(); ++i) {
          sink.stream() << i << "," << num(r.scores[i]) << "," << r.protected_indices.count(i)
                        << "," << (i == r.chosen_index) << "\n";
        }
        if (r.zero_vector_count) {
          err << "warning: " << r.zero_vector_count << " zero hidden-state vectors scored as 0\n";
        }
      });
    } else if (prune->parsed()) {
      const Metric m = parse_metric(metric);
      if (m == Metric::kCL && mode == "iterative") {
        err << "error: --metric cl removes one contiguous window; use --mode one-shot\n";
        return kUsage;
      }
      const auto set = calib.load();
      with_checkpoint(model, [&](const auto& ck) {
        using T = typename std::decay_t<decltype(ck.weights)>::value_type;
        PruneOptions<T> opts;
        opts.compensate = compensate;
        opts.protect_rule = parse_protect_rule(protect);
        auto result = mode == "iterative"
                          ? prune_and_comp(ck.weights, ck.config, set, m, n_remove, opts)
                          : one_shot_prune(ck.weights, ck.config, set, m, n_remove, opts);
        save_checkpoint(out_path, result.config, result.weights, result.log);

        out << "step,removed_original_index,removed_current_index,span_len,alpha,fused,"
               "ppl_before,ppl_after\n";
        PrunedModel<T> cur{ck.weights, ck.config};
        double before = perplexity(cur.weights, cur.config, set);
        for (const auto& e : result.log.entries) {
          cur = apply_prune_entry(std::move(cur.weights), cur.config, e);
          const double after = perplexity(cur.weights, cur.config, set);
          out << e.step << "," << e.removed_original_index << "," << e.removed_current_index
              << "," << e.span_len << "," << num(e.alpha) << "," << e.fused << "," << num(before)
              << "," << num(after) << "\n";
          before = after;
        }
      });
    } else if (ppl->parsed()) {
      const auto set = load_calibration(data, seq_len, count, seed, parse_split(split));
      with_checkpoint(model, [&](const auto& ck) {
        const auto r = evaluate_perplexity(ck.weights, ck.config, set.sequences);
        for (const auto& w : r.warnings) err << "warning: " << w << "\n";
        out << "perplexity,mean_nll,positions\n"
            << num(r.perplexity) << "," << num(r.mean_nll) << "," << r.positions << "\n";
      });
    } else if (verify->parsed()) {
      const auto set = calib.load();
      int code = kOk;
      with_checkpoint(model, [&](const auto& ck) {
        using T = typename std::decay_t<decltype(ck.weights)>::value_type;
        const double a = alpha ? *alpha : estimate_alpha(ck.weights, ck.config, set, layer).alpha;
        auto fused = prune_layers(ck.weights, ck.config, layer);
        fuse_alpha_inplace(fused.weights, layer, a);
        if (perturb_wo != 1.0) {
          if (fused.weights.layers.empty()) {
            throw Error(ErrorKind::kConfig, "--perturb-wo needs a surviving layer");
          }
          fused.weights.layers[layer > 0 ? layer - 1 : 0].w_o *= static_cast<T>(perturb_wo);
        }
        const auto got = forward(fused.weights, fused.config, set.sequences).logits;
        const auto want =
            forward_with_skip(ck.weights, ck.config, set.sequences, {layer}, {{layer + 1, a}});
        const double diff = max_abs_diff(got, want);
        const double tol = tolerance ? *tolerance : (sizeof(T) == 8 ? 1e-9 : 1e-4);
        const bool ok = diff <= tol;
        out << "layer,alpha,max_logit_diff,tolerance,status\n"
            << layer << "," << num(a) << "," << num(diff) << "," << num(tol) << ","
            << (ok ? "PASS" : "FAIL") << "\n";
        if (!ok) {
          err << "error: fused forward differs from runtime scaling by " << num(diff)
              << " (tolerance " << num(tol) << ")\n";
          code = kNumericFailure;
        }
      });
      return code;
    } else if (toy->parsed()) {
      toy_cfg.d_head = toy_cfg.n_heads ? toy_cfg.d_model / toy_cfg.n_heads : 0;
      if (toy_cfg.n_heads == 0 || toy_cfg.d_model % toy_cfg.n_heads) {
        throw Error(ErrorKind::kConfig, "--d-model must be a multiple of --heads");
      }
      auto write = [&](auto w) {
        for (const auto l : identity_layers) {
          if (l >= toy_cfg.n_layers) {
            throw Error(ErrorKind::kIndex, "identity layer " + std::to_string(l) + " out of range");
          }
          make_identity_layer(w, l);
        }
        save_checkpoint(out_path, toy_cfg, w);
      };
      if (dtype == "f64") {
        write(random_weights<double>(toy_cfg, seed, init));
      } else {
        write(random_weights<float>(toy_cfg, seed, init));
      }
    } else if (corpus->parsed()) {
      with_checkpoint(model, [&](const auto& ck) {
        write_token_corpus(out_path, sample_corpus(ck.weights, ck.config, n_tokens, segment_len,
                                                   temperature, seed));
      });
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  }
  return kOk;
}

}  // namespace layercull::cli
