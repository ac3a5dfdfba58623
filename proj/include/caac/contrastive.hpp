#pragma once

// Cosine-similarity grid between audio and text embeddings and the
// symmetric temperature-scaled cross-entropy that pulls matched pairs onto
// the diagonal.

#include <cstddef>
#include <vector>

#include "caac/encoder.hpp"
#include "caac/tensor.hpp"

namespace caac {

struct ContrastiveConfig {
  double temperature = 0.07;
  double lambda = 0.5;  // weight of the audio-to-text half

  void validate() const;
};

/// S[i][k] = <A_i, T_k> / (|A_i| |T_k|). Rows with norm below 1e-12 throw
/// NumericError.
Tensor cosine_similarity_matrix(const Tensor& audio, const Tensor& text);
Tensor cosine_similarity_matrix(const EmbeddingBatch& audio, const EmbeddingBatch& text);

/// Loss over a square similarity matrix with a fixed temperature.
Tensor contrastive_loss(const Tensor& similarity, const ContrastiveConfig& cfg);

/// Same loss over already-scaled logits S / t. Used directly when the
/// temperature is itself a parameter.
Tensor contrastive_loss_from_logits(const Tensor& logits, double lambda);

/// Row-wise softmax of S / t, row-major b x b.
std::vector<double> row_softmax(const Tensor& similarity, double temperature);

/// Mean over i of softmax(S[i] / t)[i].
double diagonal_dominance(const Tensor& similarity, double temperature);

}  // namespace caac
