#pragma once

// Dual-head encoder: an audio head over log-power spectrograms and a text
// head over caption tokens, both ending in a linear map to embed_len.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "caac/nn.hpp"
#include "caac/signal.hpp"

namespace caac {

enum class Modality { audio, text };

/// Weight scale of the final projection of each head. At initialization the
/// shared bias dominates, so untrained embeddings of different inputs point
/// in similar directions.
inline constexpr double kProjectionInitScale = 0.1;

/// b x L rows of audio (A_i) or text (T_i) embeddings.
struct EmbeddingBatch {
  Tensor rows;
  Modality modality = Modality::audio;

  std::size_t size() const { return rows.dim(0); }
  std::size_t length() const { return rows.dim(1); }
};

/// Row-major token ids padded with pad_id (0) on the right.
struct TokenBatch {
  static constexpr int pad_id = 0;

  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<int> ids;

  static TokenBatch from_sequences(std::span<const std::vector<int>> seqs);
  int at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
  std::vector<std::uint8_t> mask() const;
};

struct AudioHeadConfig {
  std::size_t stem_channels = 8;
  std::size_t base_channels = 16;  // block i emits base_channels << i channels
  std::size_t dual_path_blocks = 2;
  std::size_t bottlenecks_per_path = 1;
  std::size_t stem_stride = 2;
  std::size_t embed_len = 64;
  double dropout = 0.2;

  void validate() const;
};

struct TextHeadConfig {
  std::size_t vocab_size = 0;
  std::size_t model_dim = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_dim = 64;
  std::size_t embed_len = 64;
  double dropout = 0.2;

  void validate() const;
};

/// Valid frame counts per sample; frames past them are batch padding.
using FrameCounts = std::span<const std::size_t>;

/// Sets frames at or past valid[b] of x [B, C, T, F] to fill. Returns x
/// itself when valid is empty.
Tensor mask_frames(const Tensor& x, FrameCounts valid, double fill = 0.0);

/// Frame counts after a stride-s layer: ceil(t / s).
std::vector<std::size_t> strided_counts(FrameCounts valid, std::size_t stride);

/// conv1x1 -> conv3x3 (strided) -> conv1x1, each batch-normalized, with a
/// projected shortcut when the shape changes. With frame counts, padded
/// frames are zeroed ahead of the 3x3 conv so they act as its zero padding.
class Bottleneck {
 public:
  Bottleneck(std::size_t in_ch, std::size_t out_ch, std::size_t stride, Rng& rng);
  Tensor forward(const Tensor& x, bool training, FrameCounts valid = {}) const;
  void collect(nn::ParameterSet& set, const std::string& prefix) const;
  std::size_t stride() const noexcept { return stride_; }

 private:
  nn::Conv2d reduce_, spatial_, expand_, shortcut_;
  nn::BatchNorm2d reduce_bn_, spatial_bn_, expand_bn_, shortcut_bn_;
  bool project_ = false;
  std::size_t stride_ = 1;
};

/// Two paths over the same input, multiplied elementwise. Path one is a
/// bottleneck stack; path two is max-pool, 3x3 conv, 1x1 conv, batch-norm.
/// Both halve the time and frequency extents (rounding up).
class DualPathBlock {
 public:
  DualPathBlock(std::size_t in_ch, std::size_t out_ch, std::size_t bottlenecks, Rng& rng);
  /// x must already be zero past the frame counts; so is the result.
  Tensor forward(const Tensor& x, bool training, FrameCounts valid = {}) const;
  void collect(nn::ParameterSet& set, const std::string& prefix) const;

  nn::BatchNorm2d& path2_norm() noexcept { return path2_bn_; }

 private:
  std::vector<Bottleneck> path1_;
  nn::Conv2d path2_conv3_, path2_conv1_;
  nn::BatchNorm2d path2_bn_;
};

class AudioHead {
 public:
  AudioHead(const AudioHeadConfig& cfg, Rng& rng);

  /// Spectrograms may differ in frame count; shorter ones are padded with
  /// their silence value and padded frames are excluded from pooling.
  EmbeddingBatch forward(std::span<const signal::Spectrogram* const> batch, const nn::Context& ctx) const;
  EmbeddingBatch forward(std::span<const signal::Spectrogram> batch, const nn::Context& ctx) const;

  DualPathBlock& block(std::size_t i) { return blocks_.at(i); }
  const AudioHeadConfig& config() const noexcept { return cfg_; }
  void collect(nn::ParameterSet& set, const std::string& prefix) const;

 private:
  AudioHeadConfig cfg_;
  nn::Conv2d stem_;
  nn::BatchNorm2d stem_bn_;
  std::vector<DualPathBlock> blocks_;
  nn::Linear project_;
};

class TextHead {
 public:
  TextHead(const TextHeadConfig& cfg, Rng& rng);

  /// Pads are masked out of attention and pooling. Throws
  /// std::out_of_range for ids outside the vocabulary and
  /// std::invalid_argument for rows with no tokens.
  EmbeddingBatch forward(const TokenBatch& tokens, const nn::Context& ctx) const;

  std::size_t invocation_count() const noexcept { return invocations_; }
  const TextHeadConfig& config() const noexcept { return cfg_; }
  void collect(nn::ParameterSet& set, const std::string& prefix) const;

 private:
  struct Layer {
    nn::LayerNorm attn_norm, ffn_norm;
    nn::MultiHeadAttention attn;
    nn::FeedForward ffn;
  };

  TextHeadConfig cfg_;
  nn::Embedding embed_;
  std::vector<Layer> layers_;
  nn::LayerNorm final_norm_;
  nn::Linear project_;
  mutable std::size_t invocations_ = 0;
};

/// Both heads plus the frozen switch. Frozen heads run in evaluation mode
/// and are left out of optimizer updates; gradients still flow through
/// their outputs.
class ClipEncoder {
 public:
  ClipEncoder(const AudioHeadConfig& audio, const TextHeadConfig& text, Rng& rng);

  AudioHead audio;
  TextHead text;

  void set_frozen(bool flag) noexcept { frozen_ = flag; }
  bool frozen() const noexcept { return frozen_; }

  /// Context the heads should run under given the caller's context.
  nn::Context head_context(const nn::Context& ctx) const;

  nn::ParameterSet parameters() const;

 private:
  bool frozen_ = false;
};

}  // namespace caac
