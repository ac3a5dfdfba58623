#pragma once

// Differentiable operations over caac::Tensor.
//
// Elementwise binary ops accept equal shapes or a one-element operand on
// either side; no other broadcasting exists. Layer-level ops (linear, conv,
// pooling, normalization) carry their own fused backward rules.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "caac/random.hpp"
#include "caac/tensor.hpp"

namespace caac {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Throws NumericError when any divisor element is zero.
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

Tensor add_scalar(const Tensor& x, double c);
Tensor scale(const Tensor& x, double c);
Tensor neg(const Tensor& x);

Tensor exp(const Tensor& x);
/// Throws NumericError on non-positive input.
Tensor log(const Tensor& x);
Tensor relu(const Tensor& x);

/// Inverted dropout: keeps each element with probability 1-p and scales it
/// by 1/(1-p). Identity when !training or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// Batched product [B,m,k] x [B,k,n] -> [B,m,n].
Tensor bmm(const Tensor& a, const Tensor& b);
/// Batched product with the second operand transposed: [B,m,k] x [B,n,k] -> [B,m,n].
Tensor bmm_nt(const Tensor& a, const Tensor& b);

/// x[..., in] * w[in, out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor reshape(const Tensor& x, Shape shape);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

/// Normalizes over the last axis, then applies gain and bias (both [d]).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Diagonal of a square matrix as a vector.
Tensor diagonal(const Tensor& x);

/// Scales every row of an [n, d] matrix to unit Euclidean norm. Rows with
/// norm below 1e-12 are rejected.
Tensor normalize_rows(const Tensor& x);

/// Gathers rows of table[V, d] for ids laid out as id_shape; result has
/// shape id_shape + [d].
Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& id_shape);

/// [b, m, h*dh] -> [b*h, m, dh].
Tensor split_heads(const Tensor& x, std::size_t heads);
/// [b*h, m, dh] -> [b, m, h*dh].
Tensor merge_heads(const Tensor& x, std::size_t heads);

/// x[B, Ci, H, W] convolved with w[Co, Ci, k, k]; bias[Co] may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t pad);

/// Max over k x k windows; padded cells never win.
Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad);

/// Per-channel normalization of x[B, C, H, W]. In training mode batch
/// statistics are used and the running buffers (leaf tensors of shape [C])
/// are updated with the given momentum; otherwise the running statistics are
/// used and left untouched.
Tensor batch_norm2d(const Tensor& x, const Tensor& gain, const Tensor& bias, Tensor& running_mean,
                    Tensor& running_var, bool training, double momentum = 0.1, double eps = 1e-5);

/// Mean of x[B, C, T, F] over the first valid_t[b] time rows and all
/// frequency columns of each sample -> [B, C].
Tensor masked_time_mean(const Tensor& x, std::span<const std::size_t> valid_t);

/// Mean of x[B, m, d] over positions whose mask byte is nonzero -> [B, d].
Tensor masked_seq_mean(const Tensor& x, std::span<const std::uint8_t> mask);

/// Label-smoothed negative log-likelihood of log-probabilities logp[N, V],
/// averaged over rows whose target is not negative:
///   (1 - eps) * -logp[target] + eps * mean_v(-logp[v]).
Tensor smoothed_nll(const Tensor& logp, std::span<const int> targets, double eps);

}  // namespace caac
