#include "caac/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>

namespace caac::metrics {

namespace {

using NgramCounts = std::map<Tokens, std::size_t>;

NgramCounts ngrams(std::span<const std::string> s, std::size_t n) {
  NgramCounts out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[Tokens(s.begin() + i, s.begin() + i + n)];
  return out;
}

void require_items(const EvalCorpus& corpus, const char* who) {
  if (corpus.empty()) throw std::invalid_argument(std::string(who) + ": empty corpus");
  for (const auto& item : corpus)
    if (item.references.empty()) throw std::invalid_argument(std::string(who) + ": item without references");
}

}  // namespace

std::vector<double> bleu(const EvalCorpus& corpus, std::size_t n_max) {
  require_items(corpus, "bleu");
  std::vector<double> matched(n_max, 0.0), total(n_max, 0.0);
  double cand_len = 0.0, ref_len = 0.0;
  for (const auto& item : corpus) {
    const auto& c = item.candidate;
    cand_len += static_cast<double>(c.size());
    std::size_t best = item.references.front().size();
    for (const auto& r : item.references) {
      const auto d = [&](std::size_t l) { return l > c.size() ? l - c.size() : c.size() - l; };
      if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
    }
    ref_len += static_cast<double>(best);
    for (std::size_t n = 1; n <= n_max; ++n) {
      const auto cand = ngrams(c, n);
      std::map<Tokens, std::size_t> clip;
      for (const auto& r : item.references)
        for (const auto& [g, k] : ngrams(r, n)) clip[g] = std::max(clip[g], k);
      for (const auto& [g, k] : cand) {
        const auto it = clip.find(g);
        if (it != clip.end()) matched[n - 1] += static_cast<double>(std::min(k, it->second));
        total[n - 1] += static_cast<double>(k);
      }
    }
  }

  std::vector<double> out(n_max, 0.0);
  if (cand_len == 0.0) return out;
  const double bp = cand_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  double log_sum = 0.0;
  for (std::size_t n = 0; n < n_max; ++n) {
    if (total[n] == 0.0) break;  // no n-grams of this order: this and higher orders score 0
    const double p = matched[n] > 0.0 ? matched[n] / total[n] : 1.0 / (2.0 * total[n]);
    log_sum += std::log(p);
    out[n] = bp * std::exp(log_sum / static_cast<double>(n + 1));
  }
  return out;
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const EvalCorpus& corpus, double beta) {
  require_items(corpus, "rouge_l");
  double acc = 0.0;
  for (const auto& item : corpus) {
    double best = 0.0;
    for (const auto& r : item.references) {
      const auto l = static_cast<double>(lcs_length(item.candidate, r));
      if (l == 0.0) continue;
      const double p = l / static_cast<double>(item.candidate.size());
      const double rec = l / static_cast<double>(r.size());
      best = std::max(best, (1.0 + beta * beta) * p * rec / (rec + beta * beta * p));
    }
    acc += best;
  }
  return acc / static_cast<double>(corpus.size());
}

double cider_d(const EvalCorpus& corpus, std::size_t n_max, double sigma) {
  require_items(corpus, "cider");
  if (corpus.size() < 2) throw std::invalid_argument("cider: needs at least two items for document frequencies");

  std::map<Tokens, double> df;
  for (const auto& item : corpus) {
    std::set<Tokens> seen;
    for (const auto& r : item.references)
      for (std::size_t n = 1; n <= n_max; ++n)
        for (const auto& [g, k] : ngrams(r, n)) seen.insert(g);
    for (const auto& g : seen) df[g] += 1.0;
  }
  const double log_docs = std::log(static_cast<double>(corpus.size()));

  struct Vec {
    std::vector<std::map<Tokens, double>> w;
    std::vector<double> norm;
    double length = 0.0;
  };
  auto to_vec = [&](const Tokens& s) {
    Vec v{std::vector<std::map<Tokens, double>>(n_max), std::vector<double>(n_max, 0.0),
          static_cast<double>(s.size())};
    for (std::size_t n = 1; n <= n_max; ++n) {
      for (const auto& [g, k] : ngrams(s, n)) {
        const auto it = df.find(g);
        const double idf = log_docs - std::log(std::max(1.0, it == df.end() ? 0.0 : it->second));
        const double x = static_cast<double>(k) * idf;
        v.w[n - 1][g] = x;
        v.norm[n - 1] += x * x;
      }
      v.norm[n - 1] = std::sqrt(v.norm[n - 1]);
    }
    return v;
  };

  double acc = 0.0;
  for (const auto& item : corpus) {
    const Vec hyp = to_vec(item.candidate);
    std::vector<double> per_order(n_max, 0.0);
    for (const auto& r : item.references) {
      const Vec ref = to_vec(r);
      const double delta = hyp.length - ref.length;
      const double gauss = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
      for (std::size_t n = 0; n < n_max; ++n) {
        double dot = 0.0;
        for (const auto& [g, x] : hyp.w[n]) {
          const auto it = ref.w[n].find(g);
          if (it != ref.w[n].end()) dot += std::min(x, it->second) * it->second;
        }
        if (hyp.norm[n] != 0.0 && ref.norm[n] != 0.0) dot /= hyp.norm[n] * ref.norm[n];
        per_order[n] += dot * gauss;
      }
    }
    double score = 0.0;
    for (double s : per_order) score += s / static_cast<double>(item.references.size());
    acc += 10.0 * score / static_cast<double>(n_max);
  }
  return acc / static_cast<double>(corpus.size());
}

double meteor_lite_sentence(std::span<const std::string> candidate, std::span<const std::string> reference) {
  constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
  std::vector<bool> used(reference.size(), false);
  std::vector<std::size_t> align(candidate.size(), none);
  std::size_t prev = none;
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    std::size_t pick = none;
    if (prev != none && prev + 1 < reference.size() && !used[prev + 1] && reference[prev + 1] == candidate[i])
      pick = prev + 1;
    for (std::size_t j = 0; pick == none && j < reference.size(); ++j)
      if (!used[j] && reference[j] == candidate[i]) pick = j;
    if (pick != none) {
      used[pick] = true;
      align[i] = pick;
    }
    prev = pick;
  }

  std::size_t matches = 0, chunks = 0;
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    if (align[i] == none) continue;
    ++matches;
    if (i == 0 || align[i - 1] == none || align[i - 1] + 1 != align[i]) ++chunks;
  }
  if (matches == 0) return 0.0;
  const double m = static_cast<double>(matches);
  const double p = m / static_cast<double>(candidate.size());
  const double r = m / static_cast<double>(reference.size());
  const double f_mean = 10.0 * p * r / (r + 9.0 * p);
  const double frag = static_cast<double>(chunks) / m;
  return f_mean * (1.0 - 0.5 * frag * frag * frag);
}

double meteor_lite(const EvalCorpus& corpus) {
  require_items(corpus, "meteor_lite");
  double acc = 0.0;
  for (const auto& item : corpus) {
    double best = 0.0;
    for (const auto& r : item.references) best = std::max(best, meteor_lite_sentence(item.candidate, r));
    acc += best;
  }
  return acc / static_cast<double>(corpus.size());
}

std::string MetricReport::csv_header() { return "bleu1,bleu2,bleu3,bleu4,rouge_l,meteor_lite,cider"; }

std::string MetricReport::csv_row() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g", bleu1, bleu2, bleu3, bleu4, rouge_l,
                meteor_lite, cider);
  return buf;
}

MetricReport evaluate(const EvalCorpus& corpus) {
  const auto b = bleu(corpus, 4);
  MetricReport r;
  r.bleu1 = b[0];
  r.bleu2 = b[1];
  r.bleu3 = b[2];
  r.bleu4 = b[3];
  r.rouge_l = rouge_l(corpus);
  r.meteor_lite = meteor_lite(corpus);
  r.cider = cider_d(corpus);
  return r;
}

}  // namespace caac::metrics
