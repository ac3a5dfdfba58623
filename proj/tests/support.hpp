#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include "caac/config.hpp"
#include "caac/data.hpp"
#include "caac/decoder.hpp"
#include "caac/trainer.hpp"
#include "caac/random.hpp"
#include "caac/signal.hpp"
#include "caac/tensor.hpp"

namespace caac::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Spectrogram of a random waveform long enough for `frames` frames.
inline signal::Spectrogram random_spectrogram(std::size_t frames, Rng& rng, std::size_t frame_size = 32) {
  signal::StftConfig cfg{frame_size, frame_size / 2, 1e-10};
  signal::Waveform w;
  w.samples.resize(frame_size + (frames - 1) * cfg.hop);
  for (double& x : w.samples) x = rng.uniform(-1, 1);
  return signal::log_power_spectrogram(w, cfg);
}

/// Best score over every complete sequence: each ends in the end symbol
/// or has exactly max_len tokens, never contains an earlier end symbol and
/// avoids the banned tokens.
inline double exhaustive_best(const StepFunction& step, const BeamConfig& cfg) {
  double best = -INFINITY;
  std::vector<std::pair<std::vector<int>, double>> frontier{{{special::start}, 0.0}};
  for (std::size_t len = 1; len <= cfg.max_len && !frontier.empty(); ++len) {
    std::vector<std::vector<int>> prefixes;
    for (const auto& f : frontier) prefixes.push_back(f.first);
    const auto rows = step(prefixes);
    std::vector<std::pair<std::vector<int>, double>> next;
    for (std::size_t i = 0; i < frontier.size(); ++i)
      for (std::size_t v = 0; v < rows[i].size(); ++v) {
        const int tok = static_cast<int>(v);
        if (std::find(cfg.banned.begin(), cfg.banned.end(), tok) != cfg.banned.end()) continue;
        const double score = frontier[i].second + rows[i][v];
        if (tok == special::end || len == cfg.max_len) {
          best = std::max(best, score);
        } else {
          auto seq = frontier[i].first;
          seq.push_back(tok);
          next.emplace_back(std::move(seq), score);
        }
      }
    frontier = std::move(next);
  }
  return best;
}

/// Synthetic clips with their spectrograms, vocabulary and training view.
struct ToyCorpus {
  std::vector<data::DatasetRecord> records;
  data::Vocabulary vocab;
  std::vector<signal::Spectrogram> specs;
  std::vector<TrainExample> examples;

  ToyCorpus(std::uint64_t seed, std::size_t clips, std::size_t captions, const signal::StftConfig& stft = {})
      : records(data::generate(seed, clips, captions)), vocab(data::Vocabulary::build(records)) {
    for (const auto& r : records) specs.push_back(signal::log_power_spectrogram({r.samples, r.sample_rate}, stft));
    for (std::size_t i = 0; i < records.size(); ++i) {
      TrainExample ex{&specs[i], {}};
      for (const auto& c : records[i].captions) ex.captions.push_back(vocab.encode(c));
      examples.push_back(std::move(ex));
    }
  }
  ToyCorpus(const ToyCorpus&) = delete;
  ToyCorpus& operator=(const ToyCorpus&) = delete;
};

/// Small model dimensions that keep unit-test training runs fast.
inline RunConfig small_run_config() {
  RunConfig c;
  c.audio_stem_channels = 4;
  c.audio_base_channels = 8;
  c.embed_len = 16;
  c.text_model_dim = 16;
  c.text_heads = 2;
  c.text_ffn_dim = 32;
  c.decoder_model_dim = 16;
  c.decoder_heads = 2;
  c.decoder_ffn_dim = 32;
  c.batch_size = 4;
  c.epochs = 2;
  c.warmup_epochs = 1;
  return c;
}

}  // namespace caac::testing
