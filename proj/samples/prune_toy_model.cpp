// Prunes two layers from a random toy model with Prune&Comp and saves the result.
#include <cstdio>
#include <filesystem>

#include "layercull/layercull.hpp"

using namespace layercull;

int main(int argc, char** argv) {
  const std::filesystem::path out = argc > 1 ? argv[1] : "pruned_toy";

  ModelConfig cfg;
  cfg.n_layers = 8;
  cfg.d_model = 64;
  cfg.n_heads = 4;
  cfg.d_head = 16;
  cfg.d_ff = 128;
  cfg.vocab_size = 256;
  cfg.max_seq_len = 128;
  const auto weights = random_weights<float>(cfg, 0, ToyInit{.stream_scale = 1000.0});

  // Text sampled from the model itself, split into calibration and held-out halves.
  const auto corpus = sample_corpus(weights, cfg, 64 * 32, 64, 1.0, 1);
  const auto calib = make_calibration(corpus, 64, 12, 0, Split::kCalib);
  const auto held_out = make_calibration(corpus, 64, 12, 0, Split::kEval);

  const auto gains = gain_ratios(weights, cfg, calib).delta_percent;
  for (std::size_t l = 0; l < gains.size(); ++l) std::printf("layer %zu  gain %+.2f%%\n", l, gains[l]);

  PruneOptions<float> opts;
  opts.protect_rule = ProtectRule::kScaled;
  const auto pruned = prune_and_comp(weights, cfg, calib, Metric::kTaylorPlus, 2, opts);
  for (const auto& e : pruned.log.entries) {
    std::printf("step %zu: removed layer %zu, alpha %.4f\n", e.step, e.removed_original_index, e.alpha);
  }
  std::printf("held-out ppl: dense %.3f, pruned %.3f\n",
              evaluate_perplexity(weights, cfg, held_out.sequences).perplexity,
              evaluate_perplexity(pruned.weights, pruned.config, held_out.sequences).perplexity);

  save_checkpoint(out, pruned.config, pruned.weights, pruned.log);
  std::printf("wrote %s\n", checkpoint_paths(out).tensors.c_str());
}
