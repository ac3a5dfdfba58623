#pragma once

// Corpus-level caption metrics over multi-reference items: BLEU-1..4,
// ROUGE-L, CIDEr-D and an exact-match METEOR variant (meteor_lite).

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace caac::metrics {

using Tokens = std::vector<std::string>;

struct EvalItem {
  Tokens candidate;
  std::vector<Tokens> references;
};

using EvalCorpus = std::vector<EvalItem>;

/// Corpus BLEU for orders 1..n_max. Entry n-1 holds BLEU-n. Per-reference
/// max clipping, brevity penalty against the closest reference length
/// (shorter on ties), and precision 1/(2 c_n) for an order with no matches.
std::vector<double> bleu(const EvalCorpus& corpus, std::size_t n_max = 4);

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

/// Mean over items of the best F_beta of LCS precision and recall.
double rouge_l(const EvalCorpus& corpus, double beta = 1.2);

/// CIDEr-D: clipped TF-IDF cosine per order with a gaussian length
/// penalty, averaged over references and orders, times 10. Needs two or
/// more items.
double cider_d(const EvalCorpus& corpus, std::size_t n_max = 4, double sigma = 6.0);

/// Exact-match alignment score of one candidate against one reference:
/// F_mean = 10PR / (R + 9P), times 1 - 0.5 (chunks / matches)^3.
double meteor_lite_sentence(std::span<const std::string> candidate, std::span<const std::string> reference);

/// Mean over items of the best reference score.
double meteor_lite(const EvalCorpus& corpus);

struct MetricReport {
  double bleu1 = 0.0, bleu2 = 0.0, bleu3 = 0.0, bleu4 = 0.0;
  double rouge_l = 0.0;
  double meteor_lite = 0.0;
  double cider = 0.0;

  static std::string csv_header();
  std::string csv_row() const;
};

MetricReport evaluate(const EvalCorpus& corpus);

}  // namespace caac::metrics
