#include "caac/decoder.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "caac/ops.hpp"

namespace caac {

void DecoderConfig::validate() const {
  if (vocab_size < 5) throw std::invalid_argument("decoder: vocabulary too small");
  if (blocks < 1) throw std::invalid_argument("decoder: at least one block is required");
  if (heads == 0 || model_dim % heads != 0)
    throw std::invalid_argument("decoder: model_dim " + std::to_string(model_dim) + " not divisible by " +
                                std::to_string(heads) + " heads");
  if (max_len < 2) throw std::invalid_argument("decoder: max_len must be at least 2");
  if (memory_dim == 0) throw std::invalid_argument("decoder: memory_dim must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("decoder: dropout must lie in [0, 1)");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0)
    throw std::invalid_argument("decoder: label_smoothing must lie in [0, 1)");
}

Decoder::Decoder(const DecoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  embed_ = nn::Embedding(cfg.vocab_size, cfg.model_dim, rng);
  for (std::size_t i = 0; i < cfg.blocks; ++i)
    blocks_.push_back({nn::LayerNorm(cfg.model_dim), nn::LayerNorm(cfg.model_dim), nn::LayerNorm(cfg.model_dim),
                       nn::MultiHeadAttention(cfg.model_dim, cfg.model_dim, cfg.heads, rng),
                       nn::MultiHeadAttention(cfg.model_dim, cfg.memory_dim, cfg.heads, rng),
                       nn::FeedForward(cfg.model_dim, cfg.ffn_dim, rng)});
  final_norm_ = nn::LayerNorm(cfg.model_dim);
  out_ = nn::Linear(cfg.model_dim, cfg.vocab_size, rng);
}

Tensor Decoder::forward(const TokenBatch& tokens, const Tensor& audio, const nn::Context& ctx) const {
  const std::size_t b = tokens.rows, m = tokens.cols, d = cfg_.model_dim;
  if (b == 0 || m == 0) throw std::invalid_argument("decoder: empty token batch");
  if (m > cfg_.max_len)
    throw std::invalid_argument("decoder: sequence length " + std::to_string(m) + " exceeds max_len " +
                                std::to_string(cfg_.max_len));
  if (audio.rank() != 2 || audio.dim(0) != b || audio.dim(1) != cfg_.memory_dim)
    throw ShapeError("decoder: audio embedding " + shape_str(audio.shape()) + " does not match batch of " +
                     std::to_string(b));

  Tensor x = add(embed_.forward(tokens.ids, {b, m}), nn::sinusoidal_positions(b, m, d));
  x = nn::apply_dropout(x, ctx, cfg_.dropout);
  const Tensor memory = reshape(audio, {b, 1, cfg_.memory_dim});
  const Tensor mask = nn::causal_mask(b, m, cfg_.heads);
  for (const auto& blk : blocks_) {
    const Tensor h = blk.self_norm.forward(x);
    x = add(x, nn::apply_dropout(blk.self_attn.forward(h, h, mask), ctx, cfg_.dropout));
    x = add(x, nn::apply_dropout(blk.cross_attn.forward(blk.cross_norm.forward(x), memory, Tensor{}), ctx,
                                 cfg_.dropout));
    x = add(x, nn::apply_dropout(blk.ffn.forward(blk.ffn_norm.forward(x), ctx, cfg_.dropout), ctx, cfg_.dropout));
  }
  return out_.forward(final_norm_.forward(x));
}

void Decoder::collect(nn::ParameterSet& set, const std::string& prefix) const {
  embed_.collect(set, prefix + ".embed");
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = prefix + ".block" + std::to_string(i);
    blocks_[i].self_norm.collect(set, p + ".self_norm");
    blocks_[i].self_attn.collect(set, p + ".self_attn");
    blocks_[i].cross_norm.collect(set, p + ".cross_norm");
    blocks_[i].cross_attn.collect(set, p + ".cross_attn");
    blocks_[i].ffn_norm.collect(set, p + ".ffn_norm");
    blocks_[i].ffn.collect(set, p + ".ffn");
  }
  final_norm_.collect(set, prefix + ".final_norm");
  out_.collect(set, prefix + ".out");
}

TeacherForcing make_teacher_forcing(std::span<const std::vector<int>> captions) {
  std::vector<std::vector<int>> inputs;
  inputs.reserve(captions.size());
  for (const auto& c : captions) {
    if (c.size() < 2) throw std::invalid_argument("teacher forcing: caption needs at least start and end symbols");
    inputs.emplace_back(c.begin(), c.end() - 1);
  }
  TeacherForcing tf;
  tf.inputs = TokenBatch::from_sequences(inputs);
  tf.targets.assign(tf.inputs.rows * tf.inputs.cols, -1);
  for (std::size_t r = 0; r < captions.size(); ++r)
    for (std::size_t j = 1; j < captions[r].size(); ++j) tf.targets[r * tf.inputs.cols + j - 1] = captions[r][j];
  return tf;
}

Tensor caption_ce_loss(const Tensor& logits, std::span<const int> targets, double eps) {
  if (logits.rank() != 3) throw ShapeError("caption loss: logits must be [b, m, V], got " + shape_str(logits.shape()));
  const std::size_t rows = logits.dim(0) * logits.dim(1), v = logits.dim(2);
  if (targets.size() != rows)
    throw ShapeError("caption loss: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
                     " positions");
  return smoothed_nll(log_softmax(reshape(logits, {rows, v}), 1), targets, eps);
}

Tensor total_loss(const Tensor& l_cl, const Tensor& l_ce, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("total loss: alpha must lie in [0, 1]");
  return add(scale(l_cl, alpha), scale(l_ce, 1.0 - alpha));
}

namespace {

bool is_banned(const BeamConfig& cfg, int token) {
  return std::find(cfg.banned.begin(), cfg.banned.end(), token) != cfg.banned.end();
}

// Score descending, then token sequence ascending.
bool better(const CaptionHypothesis& a, const CaptionHypothesis& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.tokens < b.tokens;
}

void check_rows(const std::vector<std::vector<double>>& rows, std::size_t expected) {
  if (rows.size() != expected) throw std::logic_error("beam search: step function returned the wrong row count");
}

}  // namespace

CaptionHypothesis beam_search(const StepFunction& step, const BeamConfig& cfg) {
  if (cfg.beam_size < 1) throw std::invalid_argument("beam search: beam_size must be at least 1");
  if (cfg.max_len < 1) throw std::invalid_argument("beam search: max_len must be at least 1");

  std::vector<CaptionHypothesis> live{{{special::start}, 0.0, false, {}}};
  std::vector<CaptionHypothesis> finished;
  while (!live.empty()) {
    std::vector<std::vector<int>> prefixes;
    for (const auto& h : live) prefixes.push_back(h.tokens);
    const auto logp = step(prefixes);
    check_rows(logp, live.size());

    std::vector<CaptionHypothesis> cand;
    for (std::size_t i = 0; i < live.size(); ++i)
      for (std::size_t v = 0; v < logp[i].size(); ++v) {
        const int tok = static_cast<int>(v);
        if (is_banned(cfg, tok)) continue;
        CaptionHypothesis c = live[i];
        c.tokens.push_back(tok);
        c.log_prob += logp[i][v];
        c.step_scores.push_back(c.log_prob);
        cand.push_back(std::move(c));
      }
    const std::size_t keep = std::min(cfg.beam_size, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end(), better);

    live.clear();
    for (std::size_t i = 0; i < keep; ++i) {
      auto& c = cand[i];
      if (c.tokens.back() == special::end || c.step_scores.size() >= cfg.max_len) {
        c.finished = true;
        finished.push_back(std::move(c));
      } else {
        live.push_back(std::move(c));
      }
    }
    if (!finished.empty() && !live.empty()) {
      const auto best = std::min_element(finished.begin(), finished.end(), better);
      if (best->log_prob >= live.front().log_prob) break;
    }
  }
  if (finished.empty()) throw std::logic_error("beam search: no hypothesis finished");
  return *std::min_element(finished.begin(), finished.end(), better);
}

CaptionHypothesis greedy_search(const StepFunction& step, const BeamConfig& cfg) {
  if (cfg.max_len < 1) throw std::invalid_argument("greedy search: max_len must be at least 1");
  CaptionHypothesis h{{special::start}, 0.0, false, {}};
  while (!h.finished) {
    const auto logp = step({h.tokens});
    check_rows(logp, 1);
    int best = -1;
    for (std::size_t v = 0; v < logp[0].size(); ++v) {
      const int tok = static_cast<int>(v);
      if (is_banned(cfg, tok)) continue;
      if (best < 0 || logp[0][v] > logp[0][static_cast<std::size_t>(best)]) best = tok;
    }
    if (best < 0) throw std::logic_error("greedy search: every token is banned");
    h.tokens.push_back(best);
    h.log_prob += logp[0][static_cast<std::size_t>(best)];
    h.step_scores.push_back(h.log_prob);
    h.finished = best == special::end || h.step_scores.size() >= cfg.max_len;
  }
  return h;
}

std::vector<int> strip_special(std::span<const int> tokens) {
  std::vector<int> out;
  for (int t : tokens)
    if (t != special::start && t != special::end && t != special::pad) out.push_back(t);
  return out;
}

StepFunction decoder_step(const Decoder& decoder, const Tensor& audio_row) {
  const std::size_t dim = decoder.config().memory_dim;
  if (audio_row.numel() != dim) throw ShapeError("decoder step: audio row length mismatch");
  std::vector<double> row(audio_row.data().begin(), audio_row.data().end());
  return [&decoder, row = std::move(row), dim](const std::vector<std::vector<int>>& prefixes) {
    NoGradGuard guard;
    const std::size_t k = prefixes.size();
    std::vector<double> mem;
    mem.reserve(k * dim);
    for (std::size_t i = 0; i < k; ++i) mem.insert(mem.end(), row.begin(), row.end());
    const TokenBatch tokens = TokenBatch::from_sequences(prefixes);
    const Tensor logits = decoder.forward(tokens, Tensor::from_data({k, dim}, std::move(mem)), nn::Context{});
    const Tensor logp = log_softmax(logits, 2);
    const std::size_t m = tokens.cols, v = logits.dim(2);
    std::vector<std::vector<double>> out(k);
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t last = prefixes[i].size() - 1;
      const auto src = logp.data().subspan((i * m + last) * v, v);
      out[i].assign(src.begin(), src.end());
    }
    return out;
  };
}

}  // namespace caac
