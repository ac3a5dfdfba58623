#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "caac/metrics.hpp"
#include "caac/random.hpp"

using namespace caac::metrics;

namespace {

Tokens toks(const std::string& s) {
  Tokens out;
  std::string w;
  for (char c : s + " ") {
    if (c == ' ') {
      if (!w.empty()) out.push_back(w);
      w.clear();
    } else {
      w += c;
    }
  }
  return out;
}

EvalItem item(const std::string& cand, std::vector<std::string> refs) {
  EvalItem it{toks(cand), {}};
  for (const auto& r : refs) it.references.push_back(toks(r));
  return it;
}

// Independent CIDEr-D transcription over joined n-gram strings.
double cider_oracle(const EvalCorpus& corpus, int n_max = 4, double sigma = 6.0) {
  auto grams = [](const Tokens& t, int n) {
    std::map<std::string, double> out;
    for (int i = 0; i + n <= static_cast<int>(t.size()); ++i) {
      std::string key;
      for (int j = 0; j < n; ++j) key += t[static_cast<std::size_t>(i + j)] + "\x1f";
      out[key] += 1.0;
    }
    return out;
  };
  const double N = static_cast<double>(corpus.size());
  double total = 0.0;
  for (const auto& it : corpus) {
    double item_score = 0.0;
    for (int n = 1; n <= n_max; ++n) {
      std::map<std::string, double> df;
      for (const auto& other : corpus) {
        std::set<std::string> seen;
        for (const auto& r : other.references)
          for (const auto& kv : grams(r, n)) seen.insert(kv.first);
        for (const auto& g : seen) df[g] += 1.0;
      }
      auto weigh = [&](const Tokens& t) {
        auto g = grams(t, n);
        for (auto& kv : g) kv.second *= std::log(N) - std::log(std::max(1.0, df[kv.first]));
        return g;
      };
      auto norm = [](const std::map<std::string, double>& v) {
        double s = 0.0;
        for (const auto& kv : v) s += kv.second * kv.second;
        return std::sqrt(s);
      };
      const auto h = weigh(it.candidate);
      double order_sum = 0.0;
      for (const auto& r : it.references) {
        const auto rv = weigh(r);
        double dot = 0.0;
        for (const auto& kv : h)
          if (rv.count(kv.first)) dot += std::min(kv.second, rv.at(kv.first)) * rv.at(kv.first);
        const double nh = norm(h), nr = norm(rv);
        const double cos = (nh > 0 && nr > 0) ? dot / (nh * nr) : dot;
        const double dl = static_cast<double>(it.candidate.size()) - static_cast<double>(r.size());
        order_sum += cos * std::exp(-dl * dl / (2 * sigma * sigma));
      }
      item_score += order_sum / static_cast<double>(it.references.size());
    }
    total += 10.0 * item_score / n_max;
  }
  return total / N;
}

std::size_t brute_lcs(const Tokens& a, const Tokens& b) {
  std::size_t best = 0;
  for (std::size_t mask = 0; mask < (std::size_t{1} << a.size()); ++mask) {
    Tokens sub;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (mask >> i & 1) sub.push_back(a[i]);
    if (sub.size() <= best) continue;
    std::size_t j = 0;
    for (const auto& w : b)
      if (j < sub.size() && sub[j] == w) ++j;
    if (j == sub.size()) best = sub.size();
  }
  return best;
}

}  // namespace

TEST(Bleu, PerfectMatchIsOne) {
  const EvalCorpus c{item("a small dog barks loudly", {"a small dog barks loudly", "x y"}),
                     item("the cat sits on a mat", {"the cat sits on a mat"})};
  for (double b : bleu(c)) EXPECT_EQ(b, 1.0);
}

TEST(Bleu, UnigramClipping) {
  const EvalCorpus c{item("a b c", {"a b d"})};
  EXPECT_NEAR(bleu(c)[0], 2.0 / 3.0, 1e-15);
  // Repeated candidate words are clipped at the best reference count.
  const EvalCorpus r{item("a a a a", {"a b c d", "a a x y"})};
  EXPECT_NEAR(bleu(r)[0], 0.5, 1e-15);
}

TEST(Bleu, BrevityPenalty) {
  const EvalCorpus c{item("a b", {"a b c d", "a b c d e f"})};
  const auto b = bleu(c);
  EXPECT_NEAR(b[0], std::exp(1.0 - 4.0 / 2.0), 1e-15);
  EXPECT_NEAR(b[1], std::exp(1.0 - 4.0 / 2.0), 1e-15);
  EXPECT_LT(b[0], 1.0);
}

TEST(Bleu, ClosestReferenceLengthPrefersShorterOnTies) {
  // Candidate length 4; references of 3 and 5 are equally close. r = 3 gives no
  // brevity penalty, r = 5 would give exp(1 - 5/4).
  const EvalCorpus c{item("a b c d", {"a b c", "a b c d e"})};
  EXPECT_NEAR(bleu(c)[0], 1.0, 1e-15);
}

TEST(Bleu, SmoothingForUnmatchedOrder) {
  // Bigram order: 2 candidate bigrams, none matched -> precision 1/(2*2).
  const EvalCorpus c{item("a b c", {"c b a"})};
  const auto b = bleu(c, 2);
  EXPECT_NEAR(b[0], 1.0, 1e-15);
  EXPECT_NEAR(b[1], std::sqrt(1.0 * 0.25), 1e-15);
}

TEST(Bleu, EmptyCandidatesScoreZero) {
  const EvalCorpus c{item("", {"a b"}), item("", {"c"})};
  for (double b : bleu(c)) EXPECT_EQ(b, 0.0);
}

TEST(RougeL, Fixtures) {
  EXPECT_EQ(rouge_l({item("a b c", {"a b c"})}), 1.0);
  EXPECT_EQ(rouge_l({item("a b c", {"x y z"})}), 0.0);
  EXPECT_EQ(lcs_length(toks("a b c d"), toks("a c b d")), 3u);
  EXPECT_NEAR(rouge_l({item("a b c d", {"a c b d"})}), 0.75, 1e-15);
}

TEST(RougeL, BetaWeighting) {
  // LCS 2, P = 2/2, R = 2/4.
  const double p = 1.0, r = 0.5, b2 = 1.44;
  EXPECT_NEAR(rouge_l({item("a b", {"a b c d"})}), (1 + b2) * p * r / (r + b2 * p), 1e-15);
}

TEST(RougeL, LcsMatchesBruteForce) {
  caac::Rng rng(1);
  const Tokens alpha{"x", "y", "z"};
  for (int trial = 0; trial < 3000; ++trial) {
    Tokens a, b;
    for (std::size_t i = rng.index(9); i > 0; --i) a.push_back(alpha[rng.index(3)]);
    for (std::size_t i = rng.index(9); i > 0; --i) b.push_back(alpha[rng.index(3)]);
    EXPECT_EQ(lcs_length(a, b), brute_lcs(a, b));
  }
}

TEST(Cider, NoSharedNgramsIsZero) {
  const EvalCorpus c{item("p q r", {"a b c"}), item("s t", {"d e f"})};
  EXPECT_EQ(cider_d(c), 0.0);
}

TEST(Cider, NgramInEveryDocumentHasZeroWeight) {
  // "x" appears in both documents; the candidate shares only "x".
  const EvalCorpus c{item("x", {"x a"}), item("q", {"x b"})};
  EXPECT_EQ(cider_d(c), 0.0);
}

TEST(Cider, PerfectDistinctCorpusScoresTen) {
  const EvalCorpus c{item("a b c d e", {"a b c d e"}), item("f g h i j", {"f g h i j"}),
                     item("k l m n o", {"k l m n o"})};
  EXPECT_NEAR(cider_d(c), 10.0, 1e-12);
}

TEST(Cider, MatchesScalarTranscription) {
  const EvalCorpus c{
      item("a dog barks at the cat", {"a dog barks loudly", "the dog barks at a cat", "dogs bark"}),
      item("a cat sits on the mat", {"the cat sits on a mat", "a cat on the mat", "cat sitting"}),
      item("birds sing in the morning", {"birds are singing", "morning birds sing in the trees", "a bird sings"}),
  };
  EXPECT_NEAR(cider_d(c), cider_oracle(c), 1e-9);
  EXPECT_GT(cider_d(c), 0.0);
}

TEST(Cider, RequiresTwoItems) {
  EXPECT_THROW(cider_d({item("a", {"a"})}), std::invalid_argument);
}

TEST(MeteorLite, Identity) {
  EXPECT_NEAR(meteor_lite_sentence(toks("a b c d"), toks("a b c d")), 1.0 - 0.5 / 64.0, 1e-15);
  EXPECT_NEAR(meteor_lite_sentence(toks("a b c d"), toks("a b c d")), 0.9922, 1e-4);
}

TEST(MeteorLite, ZeroMatches) { EXPECT_EQ(meteor_lite_sentence(toks("a b"), toks("c d")), 0.0); }

TEST(MeteorLite, FragmentationPenalty) {
  const double fwd = meteor_lite_sentence(toks("a b c d"), toks("a b c d"));
  const double rev = meteor_lite_sentence(toks("a b c d"), toks("d c b a"));
  EXPECT_NEAR(rev, 0.5, 1e-15);  // four chunks of one match each
  EXPECT_GT(fwd, rev);
}

TEST(MeteorLite, HandWorkedPartialMatch) {
  // matches a, b, d: P = 3/4, R = 3/5, chunks {a b} {d} -> 2.
  const double p = 0.75, r = 0.6;
  const double f = 10 * p * r / (r + 9 * p);
  EXPECT_NEAR(meteor_lite_sentence(toks("a b x d"), toks("a b c d e")), f * (1 - 0.5 * std::pow(2.0 / 3.0, 3)), 1e-15);
}

TEST(Evaluate, PerfectCorpus) {
  const EvalCorpus c{item("a b c d", {"a b c d"}), item("e f g h", {"e f g h"})};
  const auto r = evaluate(c);
  EXPECT_EQ(r.bleu1, 1.0);
  EXPECT_EQ(r.bleu4, 1.0);
  EXPECT_EQ(r.rouge_l, 1.0);
  EXPECT_NEAR(r.meteor_lite, 1.0 - 0.5 / 64.0, 1e-15);
  EXPECT_NEAR(r.cider, 10.0, 1e-12);
}

TEST(Evaluate, EmptyCandidatesAllZero) {
  const EvalCorpus c{item("", {"a b"}), item("", {"c d"})};
  const auto r = evaluate(c);
  for (double v : {r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.rouge_l, r.meteor_lite, r.cider}) EXPECT_EQ(v, 0.0);
}

TEST(Evaluate, CsvLayout) {
  EXPECT_EQ(MetricReport::csv_header(), "bleu1,bleu2,bleu3,bleu4,rouge_l,meteor_lite,cider");
  MetricReport r;
  r.bleu1 = 0.5;
  r.cider = 2.25;
  EXPECT_EQ(r.csv_row(), "0.5,0,0,0,0,0,2.25");
}

TEST(Evaluate, FuzzOrderAndRelabelingInvariance) {
  caac::Rng rng(2);
  const Tokens words{"a", "b", "c", "d", "e", "f"};
  const Tokens renamed{"u", "v", "w", "x", "y", "z"};
  for (int trial = 0; trial < 40; ++trial) {
    EvalCorpus c, relabeled;
    for (int i = 0; i < 4; ++i) {
      EvalItem it, rt;
      for (std::size_t k = rng.index(7); k > 0; --k) it.candidate.push_back(words[rng.index(6)]);
      for (std::size_t r = 1 + rng.index(3); r > 0; --r) {
        Tokens ref;
        for (std::size_t k = 1 + rng.index(6); k > 0; --k) ref.push_back(words[rng.index(6)]);
        it.references.push_back(ref);
      }
      auto map = [&](const Tokens& t) {
        Tokens o;
        for (const auto& w : t) o.push_back(renamed[static_cast<std::size_t>(w[0] - 'a')]);
        return o;
      };
      rt.candidate = map(it.candidate);
      for (const auto& r : it.references) rt.references.push_back(map(r));
      c.push_back(it);
      relabeled.push_back(rt);
    }
    EvalCorpus reversed(c.rbegin(), c.rend());
    const auto a = evaluate(c), b = evaluate(reversed), d = evaluate(relabeled);
    for (const auto* r : {&a, &b, &d})
      for (double v : {r->bleu1, r->bleu2, r->bleu3, r->bleu4, r->rouge_l, r->meteor_lite, r->cider}) {
        EXPECT_TRUE(std::isfinite(v));
        EXPECT_GE(v, 0.0);
      }
    EXPECT_NEAR(a.bleu4, b.bleu4, 1e-12);
    EXPECT_NEAR(a.rouge_l, b.rouge_l, 1e-12);
    EXPECT_NEAR(a.meteor_lite, b.meteor_lite, 1e-12);
    EXPECT_NEAR(a.cider, b.cider, 1e-12);
    EXPECT_EQ(a.csv_row(), d.csv_row());
  }
}
