#include "caac/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "caac/ops.hpp"

namespace caac {

void ContrastiveConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw std::invalid_argument("contrastive: temperature must be positive");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("contrastive: lambda must lie in [0, 1]");
}

Tensor cosine_similarity_matrix(const Tensor& audio, const Tensor& text) {
  if (audio.rank() != 2 || text.rank() != 2 || audio.shape() != text.shape())
    throw ShapeError("cosine similarity: expected two b x L batches, got " + shape_str(audio.shape()) + " and " +
                     shape_str(text.shape()));
  return matmul(normalize_rows(audio), transpose(normalize_rows(text)));
}

Tensor cosine_similarity_matrix(const EmbeddingBatch& audio, const EmbeddingBatch& text) {
  return cosine_similarity_matrix(audio.rows, text.rows);
}

Tensor contrastive_loss_from_logits(const Tensor& logits, double lambda) {
  if (logits.rank() != 2 || logits.dim(0) != logits.dim(1))
    throw ShapeError("contrastive loss: similarity matrix must be square, got " + shape_str(logits.shape()));
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("contrastive: lambda must lie in [0, 1]");
  const double b = static_cast<double>(logits.dim(0));
  const Tensor audio_to_text = sum(diagonal(log_softmax(logits, 1)));
  const Tensor text_to_audio = sum(diagonal(log_softmax(logits, 0)));
  return scale(add(scale(audio_to_text, lambda), scale(text_to_audio, 1.0 - lambda)), -1.0 / b);
}

Tensor contrastive_loss(const Tensor& similarity, const ContrastiveConfig& cfg) {
  cfg.validate();
  return contrastive_loss_from_logits(scale(similarity, 1.0 / cfg.temperature), cfg.lambda);
}

std::vector<double> row_softmax(const Tensor& similarity, double temperature) {
  if (similarity.rank() != 2 || similarity.dim(0) != similarity.dim(1))
    throw ShapeError("row softmax: similarity matrix must be square");
  if (!(temperature > 0.0)) throw std::invalid_argument("row softmax: temperature must be positive");
  const std::size_t b = similarity.dim(0);
  const auto s = similarity.data();
  std::vector<double> out(b * b);
  for (std::size_t i = 0; i < b; ++i) {
    double mx = s[i * b];
    for (std::size_t k = 1; k < b; ++k) mx = std::max(mx, s[i * b + k]);
    double z = 0.0;
    for (std::size_t k = 0; k < b; ++k) z += out[i * b + k] = std::exp((s[i * b + k] - mx) / temperature);
    for (std::size_t k = 0; k < b; ++k) out[i * b + k] /= z;
  }
  return out;
}

double diagonal_dominance(const Tensor& similarity, double temperature) {
  const auto p = row_softmax(similarity, temperature);
  const std::size_t b = similarity.dim(0);
  double acc = 0.0;
  for (std::size_t i = 0; i < b; ++i) acc += p[i * b + i];
  return acc / static_cast<double>(b);
}

}  // namespace caac
