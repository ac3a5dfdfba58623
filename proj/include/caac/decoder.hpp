#pragma once

// Transformer caption decoder conditioned on the audio embedding, the
// caption and total training losses, and beam-search decoding.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "caac/encoder.hpp"
#include "caac/nn.hpp"

namespace caac {

namespace special {
inline constexpr int pad = 0;
inline constexpr int start = 1;
inline constexpr int end = 2;
inline constexpr int unk = 3;
}  // namespace special

struct DecoderConfig {
  std::size_t vocab_size = 0;
  std::size_t model_dim = 32;
  std::size_t heads = 4;
  std::size_t blocks = 2;
  std::size_t ffn_dim = 64;
  std::size_t memory_dim = 64;  // embed_len of the audio head
  std::size_t max_len = 24;     // longest input sequence, start symbol included
  double dropout = 0.2;
  double label_smoothing = 0.1;

  void validate() const;
};

/// Pre-norm blocks of causal self-attention, cross-attention over the audio
/// embedding (a one-element memory) and a feed-forward layer.
class Decoder {
 public:
  Decoder(const DecoderConfig& cfg, Rng& rng);

  /// tokens: b x m ids, audio: [b, memory_dim]. Returns logits [b, m, V].
  Tensor forward(const TokenBatch& tokens, const Tensor& audio, const nn::Context& ctx) const;

  const DecoderConfig& config() const noexcept { return cfg_; }
  void collect(nn::ParameterSet& set, const std::string& prefix) const;

 private:
  struct Block {
    nn::LayerNorm self_norm, cross_norm, ffn_norm;
    nn::MultiHeadAttention self_attn, cross_attn;
    nn::FeedForward ffn;
  };

  DecoderConfig cfg_;
  nn::Embedding embed_;
  std::vector<Block> blocks_;
  nn::LayerNorm final_norm_;
  nn::Linear out_;
};

/// Decoder inputs and shifted targets for teacher forcing. Each sequence is
/// a full tokenized caption [start, ..., end]; inputs drop the last token,
/// targets drop the first, and padded target slots hold -1.
struct TeacherForcing {
  TokenBatch inputs;
  std::vector<int> targets;
};

TeacherForcing make_teacher_forcing(std::span<const std::vector<int>> captions);

/// Mean over non-ignored positions of
///   (1 - eps) * -log p[target] + eps * mean_v(-log p[v]).
Tensor caption_ce_loss(const Tensor& logits, std::span<const int> targets, double eps);

/// alpha * l_cl + (1 - alpha) * l_ce.
Tensor total_loss(const Tensor& l_cl, const Tensor& l_ce, double alpha);

struct CaptionHypothesis {
  std::vector<int> tokens;  // start symbol first
  double log_prob = 0.0;
  bool finished = false;
  std::vector<double> step_scores;  // cumulative log_prob after each generated token
};

struct BeamConfig {
  std::size_t beam_size = 3;
  std::size_t max_len = 20;  // generated tokens, end symbol included
  std::vector<int> banned = {special::pad, special::start, special::unk};
};

/// Maps a set of prefixes to one log-probability row per prefix.
using StepFunction = std::function<std::vector<std::vector<double>>(const std::vector<std::vector<int>>&)>;

/// Expands every live hypothesis by every allowed token, keeps the best
/// beam_size candidates ordered by score, then by smaller token sequence,
/// and retires those ending in the end symbol or at max_len. Stops once no
/// live hypothesis can overtake the best finished one.
CaptionHypothesis beam_search(const StepFunction& step, const BeamConfig& cfg);

/// Argmax decoding with the same banned set and tie rule.
CaptionHypothesis greedy_search(const StepFunction& step, const BeamConfig& cfg);

/// Drops start, end and pad symbols.
std::vector<int> strip_special(std::span<const int> tokens);

/// Step function running the decoder in evaluation mode on one audio row.
StepFunction decoder_step(const Decoder& decoder, const Tensor& audio_row);

}  // namespace caac
