#include "caac/nn.hpp"

#include <bit>
#include <cmath>
#include <stdexcept>

namespace caac::nn {

void ParameterSet::check_unique(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) throw std::invalid_argument("duplicate parameter name " + name);
  for (const auto& b : buffers_)
    if (b.name == name) throw std::invalid_argument("duplicate buffer name " + name);
}

void ParameterSet::add_parameter(std::string name, Tensor t) {
  check_unique(name);
  t.set_requires_grad(true);
  params_.push_back({std::move(name), std::move(t)});
}

void ParameterSet::add_buffer(std::string name, Tensor t) {
  check_unique(name);
  buffers_.push_back({std::move(name), std::move(t)});
}

void ParameterSet::append(const ParameterSet& other) {
  for (const auto& p : other.params_) add_parameter(p.name, p.tensor);
  for (const auto& b : other.buffers_) add_buffer(b.name, b.tensor);
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

std::uint64_t ParameterSet::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const Tensor& t) {
    for (double v : t.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xffu;
        h *= 0x100000001b3ull;
      }
    }
  };
  for (const auto& p : params_) mix(p.tensor);
  for (const auto& b : buffers_) mix(b.tensor);
  return h;
}

Tensor uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng) {
  const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-a, a);
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias, double weight_scale)
    : weight(uniform_fan_in({in, out}, in, rng)) {
  if (weight_scale != 1.0)
    for (double& w : weight.mutable_data()) w *= weight_scale;
  if (with_bias) bias = uniform_fan_in({out}, in, rng);
}

void Linear::collect(ParameterSet& set, const std::string& prefix) const {
  set.add_parameter(prefix + ".weight", weight);
  if (bias.defined()) set.add_parameter(prefix + ".bias", bias);
}

LayerNorm::LayerNorm(std::size_t dim) : gain(Tensor::full({dim}, 1.0, true)), bias(Tensor::zeros({dim}, true)) {}

void LayerNorm::collect(ParameterSet& set, const std::string& prefix) const {
  set.add_parameter(prefix + ".gain", gain);
  set.add_parameter(prefix + ".bias", bias);
}

Embedding::Embedding(std::size_t vocab, std::size_t dim, Rng& rng) {
  std::vector<double> v(vocab * dim);
  for (auto& x : v) x = rng.normal();
  table = Tensor::from_data({vocab, dim}, std::move(v), true);
}

void Embedding::collect(ParameterSet& set, const std::string& prefix) const {
  set.add_parameter(prefix + ".table", table);
}

Conv2d::Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride, std::size_t pad,
               Rng& rng)
    : weight(uniform_fan_in({out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel, rng)),
      stride_(stride),
      pad_(pad) {}

void Conv2d::collect(ParameterSet& set, const std::string& prefix) const {
  set.add_parameter(prefix + ".weight", weight);
}

BatchNorm2d::BatchNorm2d(std::size_t channels)
    : gain(Tensor::full({channels}, 1.0, true)),
      bias(Tensor::zeros({channels}, true)),
      running_mean(Tensor::zeros({channels})),
      running_var(Tensor::full({channels}, 1.0)) {}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) const {
  Tensor mean_buf = running_mean;
  Tensor var_buf = running_var;
  return batch_norm2d(x, gain, bias, mean_buf, var_buf, training);
}

void BatchNorm2d::collect(ParameterSet& set, const std::string& prefix) const {
  set.add_parameter(prefix + ".gain", gain);
  set.add_parameter(prefix + ".bias", bias);
  set.add_buffer(prefix + ".running_mean", running_mean);
  set.add_buffer(prefix + ".running_var", running_var);
}

MultiHeadAttention::MultiHeadAttention(std::size_t model_dim, std::size_t memory_dim, std::size_t heads, Rng& rng)
    : heads_(heads),
      q_(model_dim, model_dim, rng),
      k_(memory_dim, model_dim, rng),
      v_(memory_dim, model_dim, rng),
      o_(model_dim, model_dim, rng) {
  if (heads == 0 || model_dim % heads != 0)
    throw std::invalid_argument("attention: model dim " + std::to_string(model_dim) + " not divisible by " +
                                std::to_string(heads) + " heads");
}

Tensor MultiHeadAttention::forward(const Tensor& query, const Tensor& memory, const Tensor& mask) const {
  const std::size_t dh = query.dim(2) / heads_;
  const Tensor q = split_heads(q_.forward(query), heads_);
  const Tensor k = split_heads(k_.forward(memory), heads_);
  const Tensor v = split_heads(v_.forward(memory), heads_);
  Tensor scores = scale(bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (mask.defined()) scores = add(scores, mask);
  const Tensor attn = softmax(scores, 2);
  return o_.forward(merge_heads(bmm(attn, v), heads_));
}

void MultiHeadAttention::collect(ParameterSet& set, const std::string& prefix) const {
  q_.collect(set, prefix + ".q");
  k_.collect(set, prefix + ".k");
  v_.collect(set, prefix + ".v");
  o_.collect(set, prefix + ".o");
}

FeedForward::FeedForward(std::size_t dim, std::size_t hidden, Rng& rng) : in_(dim, hidden, rng), out_(hidden, dim, rng) {}

Tensor FeedForward::forward(const Tensor& x, const Context& ctx, double dropout_rate) const {
  return out_.forward(apply_dropout(relu(in_.forward(x)), ctx, dropout_rate));
}

void FeedForward::collect(ParameterSet& set, const std::string& prefix) const {
  in_.collect(set, prefix + ".in");
  out_.collect(set, prefix + ".out");
}

Tensor sinusoidal_positions(std::size_t batch, std::size_t length, std::size_t dim) {
  std::vector<double> v(batch * length * dim);
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t j = 0; j < dim; ++j) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / static_cast<double>(dim));
      const double angle = static_cast<double>(t) * rate;
      const double pe = j % 2 == 0 ? std::sin(angle) : std::cos(angle);
      for (std::size_t b = 0; b < batch; ++b) v[(b * length + t) * dim + j] = pe;
    }
  return Tensor::from_data({batch, length, dim}, std::move(v));
}

Tensor key_padding_mask(std::span<const std::uint8_t> valid, std::size_t batch, std::size_t length, std::size_t heads) {
  if (valid.size() != batch * length) throw ShapeError("key_padding_mask: mask size mismatch");
  std::vector<double> v(batch * heads * length * length, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < length; ++i)
        for (std::size_t j = 0; j < length; ++j)
          if (!valid[b * length + j]) v[(((b * heads + h) * length) + i) * length + j] = kMaskedLogit;
  return Tensor::from_data({batch * heads, length, length}, std::move(v));
}

Tensor causal_mask(std::size_t batch, std::size_t length, std::size_t heads) {
  std::vector<double> v(batch * heads * length * length, 0.0);
  for (std::size_t bh = 0; bh < batch * heads; ++bh)
    for (std::size_t i = 0; i < length; ++i)
      for (std::size_t j = i + 1; j < length; ++j) v[(bh * length + i) * length + j] = kMaskedLogit;
  return Tensor::from_data({batch * heads, length, length}, std::move(v));
}

Tensor apply_dropout(const Tensor& x, const Context& ctx, double rate) {
  if (!ctx.training || rate == 0.0) return x;
  if (ctx.rng == nullptr) throw std::logic_error("training-mode dropout requires a random stream");
  return dropout(x, rate, *ctx.rng, true);
}

}  // namespace caac::nn
