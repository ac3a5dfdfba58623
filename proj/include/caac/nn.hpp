#pragma once

// Layer building blocks shared by the encoder heads and the decoder.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "caac/ops.hpp"
#include "caac/random.hpp"
#include "caac/tensor.hpp"

namespace caac::nn {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Ordered registry of learnable parameters and non-learnable state buffers
/// (batch-norm running statistics). Names are dotted paths such as
/// "audio.block0.path2.bn.gain".
class ParameterSet {
 public:
  void add_parameter(std::string name, Tensor t);
  void add_buffer(std::string name, Tensor t);

  const std::vector<NamedTensor>& parameters() const noexcept { return params_; }
  const std::vector<NamedTensor>& buffers() const noexcept { return buffers_; }

  void append(const ParameterSet& other);
  void zero_grad();
  std::size_t scalar_count() const;

  /// FNV-1a over the bit patterns of every parameter and buffer value.
  std::uint64_t checksum() const;

 private:
  void check_unique(const std::string& name) const;
  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
};

/// Forward-pass mode. rng feeds dropout and is only read in training mode.
struct Context {
  bool training = false;
  Rng* rng = nullptr;
};

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng);

class Linear {
 public:
  Linear() = default;
  /// Weights are U(+-weight_scale / sqrt(in)); the bias is U(+-1 / sqrt(in)).
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true, double weight_scale = 1.0);
  Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(ParameterSet& set, const std::string& prefix) const;

  Tensor weight;  // [in, out]
  Tensor bias;    // [out] or undefined
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias); }
  void collect(ParameterSet& set, const std::string& prefix) const;

  Tensor gain;
  Tensor bias;
};

class Embedding {
 public:
  Embedding() = default;
  Embedding(std::size_t vocab, std::size_t dim, Rng& rng);
  Tensor forward(std::span<const int> ids, const Shape& id_shape) const { return embedding(table, ids, id_shape); }
  void collect(ParameterSet& set, const std::string& prefix) const;

  Tensor table;  // [vocab, dim]
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride, std::size_t pad, Rng& rng);
  Tensor forward(const Tensor& x) const { return conv2d(x, weight, Tensor{}, stride_, pad_); }
  void collect(ParameterSet& set, const std::string& prefix) const;

  Tensor weight;  // [out, in, k, k]; no bias, batch-norm follows every conv

 private:
  std::size_t stride_ = 1;
  std::size_t pad_ = 0;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels);
  /// Running statistics are updated in place in training mode.
  Tensor forward(const Tensor& x, bool training) const;
  void collect(ParameterSet& set, const std::string& prefix) const;

  Tensor gain;
  Tensor bias;
  Tensor running_mean;
  Tensor running_var;
};

/// Multi-head scaled dot-product attention. Queries come from a [b, m, d]
/// sequence; keys and values from a [b, n, memory_dim] memory.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t model_dim, std::size_t memory_dim, std::size_t heads, Rng& rng);

  /// mask, when defined, is an additive [b*heads, m, n] constant (0 or a
  /// large negative value).
  Tensor forward(const Tensor& query, const Tensor& memory, const Tensor& mask) const;
  void collect(ParameterSet& set, const std::string& prefix) const;

  std::size_t heads() const noexcept { return heads_; }

 private:
  std::size_t heads_ = 1;
  Linear q_, k_, v_, o_;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(std::size_t dim, std::size_t hidden, Rng& rng);
  Tensor forward(const Tensor& x, const Context& ctx, double dropout_rate) const;
  void collect(ParameterSet& set, const std::string& prefix) const;

 private:
  Linear in_, out_;
};

/// Additive mask value for disallowed attention links. exp() of it
/// underflows to exactly zero.
inline constexpr double kMaskedLogit = -1e9;

/// Sinusoidal position table repeated over the batch: [batch, length, dim].
Tensor sinusoidal_positions(std::size_t batch, std::size_t length, std::size_t dim);

/// [b*heads, m, m] mask hiding key positions whose pad byte is zero.
Tensor key_padding_mask(std::span<const std::uint8_t> valid, std::size_t batch, std::size_t length, std::size_t heads);

/// [b*heads, m, m] mask hiding future positions.
Tensor causal_mask(std::size_t batch, std::size_t length, std::size_t heads);

/// Applies dropout through ctx when training.
Tensor apply_dropout(const Tensor& x, const Context& ctx, double rate);

}  // namespace caac::nn
