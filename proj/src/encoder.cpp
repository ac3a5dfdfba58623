#include "caac/encoder.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace caac {

namespace {
// Stands in for the max-pool's own -inf padding on padded frames.
constexpr double kPoolPadding = -1e30;
}  // namespace

TokenBatch TokenBatch::from_sequences(std::span<const std::vector<int>> seqs) {
  TokenBatch out;
  out.rows = seqs.size();
  for (const auto& s : seqs) out.cols = std::max(out.cols, s.size());
  out.ids.assign(out.rows * out.cols, pad_id);
  for (std::size_t r = 0; r < out.rows; ++r) std::copy(seqs[r].begin(), seqs[r].end(), out.ids.begin() + r * out.cols);
  return out;
}

std::vector<std::uint8_t> TokenBatch::mask() const {
  std::vector<std::uint8_t> m(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) m[i] = ids[i] != pad_id ? 1 : 0;
  return m;
}

void AudioHeadConfig::validate() const {
  if (embed_len < 8) throw std::invalid_argument("audio head: embed_len must be at least 8");
  if (dual_path_blocks < 1) throw std::invalid_argument("audio head: at least one dual-path block is required");
  if (bottlenecks_per_path < 1) throw std::invalid_argument("audio head: at least one bottleneck per path is required");
  if (stem_channels == 0 || base_channels == 0) throw std::invalid_argument("audio head: channel counts must be positive");
  if (stem_stride == 0) throw std::invalid_argument("audio head: stem stride must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("audio head: dropout must lie in [0, 1)");
}

void TextHeadConfig::validate() const {
  if (vocab_size < 5) throw std::invalid_argument("text head: vocabulary too small");
  if (embed_len < 8) throw std::invalid_argument("text head: embed_len must be at least 8");
  if (layers < 1) throw std::invalid_argument("text head: at least one layer is required");
  if (heads == 0 || model_dim % heads != 0)
    throw std::invalid_argument("text head: model_dim " + std::to_string(model_dim) + " not divisible by " +
                                std::to_string(heads) + " heads");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("text head: dropout must lie in [0, 1)");
}

Tensor mask_frames(const Tensor& x, FrameCounts valid, double fill) {
  if (valid.empty()) return x;
  if (x.rank() != 4 || x.dim(0) != valid.size()) throw ShapeError("mask_frames: expected [B, C, T, F] with B counts");
  const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2), F = x.dim(3);
  bool padded = false;
  for (auto t : valid) padded = padded || t < T;
  if (!padded) return x;
  std::vector<double> keep(x.numel()), offset(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < T; ++t) {
        const bool in = t < valid[b];
        const std::size_t base = ((b * C + c) * T + t) * F;
        std::fill_n(keep.begin() + base, F, in ? 1.0 : 0.0);
        std::fill_n(offset.begin() + base, F, in ? 0.0 : fill);
      }
  const Tensor kept = mul(x, Tensor::from_data(x.shape(), std::move(keep)));
  return fill == 0.0 ? kept : add(kept, Tensor::from_data(x.shape(), std::move(offset)));
}

std::vector<std::size_t> strided_counts(FrameCounts valid, std::size_t stride) {
  std::vector<std::size_t> out(valid.begin(), valid.end());
  for (auto& t : out) t = (t + stride - 1) / stride;
  return out;
}

Bottleneck::Bottleneck(std::size_t in_ch, std::size_t out_ch, std::size_t stride, Rng& rng) {
  const std::size_t mid = std::max<std::size_t>(2, out_ch / 4);
  reduce_ = nn::Conv2d(in_ch, mid, 1, 1, 0, rng);
  reduce_bn_ = nn::BatchNorm2d(mid);
  spatial_ = nn::Conv2d(mid, mid, 3, stride, 1, rng);
  spatial_bn_ = nn::BatchNorm2d(mid);
  expand_ = nn::Conv2d(mid, out_ch, 1, 1, 0, rng);
  expand_bn_ = nn::BatchNorm2d(out_ch);
  stride_ = stride;
  project_ = stride != 1 || in_ch != out_ch;
  if (project_) {
    shortcut_ = nn::Conv2d(in_ch, out_ch, 1, stride, 0, rng);
    shortcut_bn_ = nn::BatchNorm2d(out_ch);
  }
}

Tensor Bottleneck::forward(const Tensor& x, bool training, FrameCounts valid) const {
  Tensor h = relu(reduce_bn_.forward(reduce_.forward(x), training));
  h = mask_frames(h, valid);
  h = relu(spatial_bn_.forward(spatial_.forward(h), training));
  h = expand_bn_.forward(expand_.forward(h), training);
  const Tensor skip = project_ ? shortcut_bn_.forward(shortcut_.forward(x), training) : x;
  return mask_frames(relu(add(h, skip)), strided_counts(valid, stride_));
}

void Bottleneck::collect(nn::ParameterSet& set, const std::string& prefix) const {
  reduce_.collect(set, prefix + ".reduce");
  reduce_bn_.collect(set, prefix + ".reduce_bn");
  spatial_.collect(set, prefix + ".spatial");
  spatial_bn_.collect(set, prefix + ".spatial_bn");
  expand_.collect(set, prefix + ".expand");
  expand_bn_.collect(set, prefix + ".expand_bn");
  if (project_) {
    shortcut_.collect(set, prefix + ".shortcut");
    shortcut_bn_.collect(set, prefix + ".shortcut_bn");
  }
}

DualPathBlock::DualPathBlock(std::size_t in_ch, std::size_t out_ch, std::size_t bottlenecks, Rng& rng) {
  path1_.emplace_back(in_ch, out_ch, 2, rng);
  for (std::size_t i = 1; i < bottlenecks; ++i) path1_.emplace_back(out_ch, out_ch, 1, rng);
  path2_conv3_ = nn::Conv2d(in_ch, out_ch, 3, 1, 1, rng);
  path2_conv1_ = nn::Conv2d(out_ch, out_ch, 1, 1, 0, rng);
  path2_bn_ = nn::BatchNorm2d(out_ch);
}

Tensor DualPathBlock::forward(const Tensor& x, bool training, FrameCounts valid) const {
  Tensor a = x;
  std::vector<std::size_t> counts(valid.begin(), valid.end());
  for (const auto& b : path1_) {
    a = b.forward(a, training, counts);
    counts = strided_counts(counts, b.stride());
  }
  Tensor p = max_pool2d(mask_frames(x, valid, kPoolPadding), 3, 2, 1);
  p = mask_frames(p, counts);
  p = path2_conv1_.forward(path2_conv3_.forward(p));
  p = path2_bn_.forward(p, training);
  return mask_frames(mul(a, p), counts);
}

void DualPathBlock::collect(nn::ParameterSet& set, const std::string& prefix) const {
  for (std::size_t i = 0; i < path1_.size(); ++i) path1_[i].collect(set, prefix + ".path1." + std::to_string(i));
  path2_conv3_.collect(set, prefix + ".path2.conv3");
  path2_conv1_.collect(set, prefix + ".path2.conv1");
  path2_bn_.collect(set, prefix + ".path2.bn");
}

AudioHead::AudioHead(const AudioHeadConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  stem_ = nn::Conv2d(1, cfg.stem_channels, 7, cfg.stem_stride, 3, rng);
  stem_bn_ = nn::BatchNorm2d(cfg.stem_channels);
  std::size_t in = cfg.stem_channels;
  for (std::size_t i = 0; i < cfg.dual_path_blocks; ++i) {
    const std::size_t out = cfg.base_channels << i;
    blocks_.emplace_back(in, out, cfg.bottlenecks_per_path, rng);
    in = out;
  }
  project_ = nn::Linear(in, cfg.embed_len, rng, true, kProjectionInitScale);
}

EmbeddingBatch AudioHead::forward(std::span<const signal::Spectrogram* const> batch, const nn::Context& ctx) const {
  if (batch.empty()) throw std::invalid_argument("audio head: empty batch");
  const std::size_t bins = batch.front()->bins;
  std::size_t t_max = 0;
  std::vector<std::size_t> valid(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& s = *batch[b];
    if (s.frames == 0) throw std::invalid_argument("audio head: spectrogram " + std::to_string(b) + " has no frames");
    if (s.bins != bins) throw ShapeError("audio head: spectrograms disagree on bin count");
    valid[b] = s.frames;
    t_max = std::max(t_max, s.frames);
  }

  std::vector<double> v(batch.size() * t_max * bins);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& s = *batch[b];
    double* dst = v.data() + b * t_max * bins;
    std::copy(s.values.begin(), s.values.end(), dst);
  }
  Tensor x = Tensor::from_data({batch.size(), 1, t_max, bins}, std::move(v));

  x = relu(stem_bn_.forward(stem_.forward(x), ctx.training));
  valid = strided_counts(valid, cfg_.stem_stride);
  x = mask_frames(x, valid);
  for (const auto& block : blocks_) {
    x = block.forward(x, ctx.training, valid);
    valid = strided_counts(valid, 2);
  }
  Tensor pooled = masked_time_mean(x, valid);
  pooled = nn::apply_dropout(pooled, ctx, cfg_.dropout);
  return {project_.forward(pooled), Modality::audio};
}

EmbeddingBatch AudioHead::forward(std::span<const signal::Spectrogram> batch, const nn::Context& ctx) const {
  std::vector<const signal::Spectrogram*> ptrs;
  ptrs.reserve(batch.size());
  for (const auto& s : batch) ptrs.push_back(&s);
  return forward(std::span<const signal::Spectrogram* const>(ptrs), ctx);
}

void AudioHead::collect(nn::ParameterSet& set, const std::string& prefix) const {
  stem_.collect(set, prefix + ".stem");
  stem_bn_.collect(set, prefix + ".stem_bn");
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(set, prefix + ".block" + std::to_string(i));
  project_.collect(set, prefix + ".project");
}

TextHead::TextHead(const TextHeadConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  embed_ = nn::Embedding(cfg.vocab_size, cfg.model_dim, rng);
  for (std::size_t i = 0; i < cfg.layers; ++i)
    layers_.push_back({nn::LayerNorm(cfg.model_dim), nn::LayerNorm(cfg.model_dim),
                       nn::MultiHeadAttention(cfg.model_dim, cfg.model_dim, cfg.heads, rng),
                       nn::FeedForward(cfg.model_dim, cfg.ffn_dim, rng)});
  final_norm_ = nn::LayerNorm(cfg.model_dim);
  project_ = nn::Linear(cfg.model_dim, cfg.embed_len, rng, true, kProjectionInitScale);
}

EmbeddingBatch TextHead::forward(const TokenBatch& tokens, const nn::Context& ctx) const {
  ++invocations_;
  if (tokens.rows == 0 || tokens.cols == 0) throw std::invalid_argument("text head: empty token batch");
  const auto mask = tokens.mask();
  for (std::size_t r = 0; r < tokens.rows; ++r) {
    const auto first = mask.begin() + static_cast<std::ptrdiff_t>(r * tokens.cols);
    if (std::find(first, first + static_cast<std::ptrdiff_t>(tokens.cols), 1) == first + static_cast<std::ptrdiff_t>(tokens.cols))
      throw std::invalid_argument("text head: row " + std::to_string(r) + " has no tokens");
  }
  const std::size_t b = tokens.rows, m = tokens.cols, d = cfg_.model_dim;

  Tensor x = add(embed_.forward(tokens.ids, {b, m}), nn::sinusoidal_positions(b, m, d));
  x = nn::apply_dropout(x, ctx, cfg_.dropout);
  const Tensor attn_mask = nn::key_padding_mask(mask, b, m, cfg_.heads);
  for (const auto& layer : layers_) {
    const Tensor h = layer.attn_norm.forward(x);
    x = add(x, nn::apply_dropout(layer.attn.forward(h, h, attn_mask), ctx, cfg_.dropout));
    x = add(x, nn::apply_dropout(layer.ffn.forward(layer.ffn_norm.forward(x), ctx, cfg_.dropout), ctx, cfg_.dropout));
  }
  x = final_norm_.forward(x);
  Tensor pooled = masked_seq_mean(x, mask);
  return {project_.forward(pooled), Modality::text};
}

void TextHead::collect(nn::ParameterSet& set, const std::string& prefix) const {
  embed_.collect(set, prefix + ".embed");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = prefix + ".layer" + std::to_string(i);
    layers_[i].attn_norm.collect(set, p + ".attn_norm");
    layers_[i].attn.collect(set, p + ".attn");
    layers_[i].ffn_norm.collect(set, p + ".ffn_norm");
    layers_[i].ffn.collect(set, p + ".ffn");
  }
  final_norm_.collect(set, prefix + ".final_norm");
  project_.collect(set, prefix + ".project");
}

ClipEncoder::ClipEncoder(const AudioHeadConfig& audio_cfg, const TextHeadConfig& text_cfg, Rng& rng)
    : audio(audio_cfg, rng), text(text_cfg, rng) {
  if (audio_cfg.embed_len != text_cfg.embed_len)
    throw std::invalid_argument("encoder: audio and text embedding lengths differ");
}

nn::Context ClipEncoder::head_context(const nn::Context& ctx) const {
  nn::Context out = ctx;
  if (frozen_) out.training = false;
  return out;
}

nn::ParameterSet ClipEncoder::parameters() const {
  nn::ParameterSet set;
  audio.collect(set, "encoder.audio");
  text.collect(set, "encoder.text");
  return set;
}

}  // namespace caac
