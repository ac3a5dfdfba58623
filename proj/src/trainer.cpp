#include "caac/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>

#include "caac/ops.hpp"

namespace caac {

Adam::Adam(std::vector<nn::NamedTensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    const auto g = p.tensor.grad();
    if (g.size() != p.tensor.numel()) throw ShapeError("adam: gradient shape mismatch for " + p.name);
    for (double x : g)
      if (!std::isfinite(x)) throw NumericError("adam: non-finite gradient in " + p.name + "; step skipped");
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].tensor;
    const bool has = p.has_grad();
    const auto g = has ? p.grad() : std::span<const double>{};
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = has ? g[j] : 0.0;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
    }
  }
}

void Adam::restore(std::size_t step, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
  if (m.size() != params_.size() || v.size() != params_.size())
    throw ShapeError("adam: state has " + std::to_string(m.size()) + " entries for " +
                     std::to_string(params_.size()) + " parameters");
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (m[i].size() != params_[i].tensor.numel() || v[i].size() != params_[i].tensor.numel())
      throw ShapeError("adam: state size mismatch for " + params_[i].name);
  step_ = step;
  m_ = std::move(m);
  v_ = std::move(v);
}

double lr_schedule(std::size_t epoch, double base_lr, std::size_t warmup_epochs) {
  if (warmup_epochs == 0 || epoch + 1 >= warmup_epochs) return base_lr;
  return base_lr * static_cast<double>(epoch + 1) / static_cast<double>(warmup_epochs);
}

double lr_schedule_steps(std::size_t global_step, double base_lr, std::size_t warmup_steps) {
  return lr_schedule(global_step, base_lr, warmup_steps);
}

double global_grad_norm(std::span<const nn::NamedTensor> params) {
  double s = 0.0;
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) s += g * g;
  return std::sqrt(s);
}

double clip_grad_norm(std::span<const nn::NamedTensor> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double c = max_norm / norm;
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      Tensor t = p.tensor;
      for (double& g : t.mutable_grad()) g *= c;
    }
  }
  return norm;
}

void RunLog::append(const StepRecord& r) {
  if (!records_.empty()) {
    const auto& b = records_.back();
    if (r.epoch < b.epoch || (r.epoch == b.epoch && r.step <= b.step))
      throw std::logic_error("run log: records must advance in (epoch, step)");
  }
  records_.push_back(r);
}

void RunLog::write_csv(std::ostream& out) const {
  out << csv_header() << '\n';
  char buf[512];
  for (const auto& r : records_) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.step, r.l_cl, r.l_ce,
                  r.l_total, r.lr_enc, r.lr_dec, r.diag_dom);
    out << buf;
  }
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train: epochs must be at least 1");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be at least 1");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("train: alpha must lie in [0, 1]");
  if (alpha > 0.0 && batch_size < 2)
    throw std::invalid_argument("train: batch_size must be at least 2 when alpha > 0");
  if (warmup_epochs > epochs) throw std::invalid_argument("train: warmup_epochs exceeds epochs");
  if (!(lr_encoder >= 0.0) || !(lr_decoder >= 0.0)) throw std::invalid_argument("train: learning rates must be >= 0");
  if (!(grad_clip > 0.0)) throw std::invalid_argument("train: grad_clip must be positive");
  contrastive.validate();
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::size_t epoch, bool drop_partial) {
  Rng rng = Rng::derive(seed, (std::uint64_t{1} << 32) + epoch);
  const auto perm = rng.permutation(n);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    const std::size_t end = std::min(n, i + batch_size);
    if (end - i < batch_size && drop_partial) break;
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(i), perm.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

Trainer::Trainer(CaptionModel& model, const TrainConfig& cfg)
    : model_(model),
      cfg_((cfg.validate(), cfg)),
      enc_opt_(encoder_group()),
      dec_opt_(model.decoder_parameters().parameters()),
      dropout_rng_(Rng::derive(cfg.seed, 0xd50)) {
  model_.encoder.set_frozen(cfg_.frozen_encoder);
}

std::vector<nn::NamedTensor> Trainer::encoder_group() const {
  auto group = model_.encoder_parameters().parameters();
  if (cfg_.learnable_temperature) group.push_back({"contrastive.log_temperature", model_.log_temperature});
  return group;
}

void Trainer::set_frozen(bool flag) {
  cfg_.frozen_encoder = flag;
  model_.encoder.set_frozen(flag);
}

StepRecord Trainer::train_step(std::span<const TrainExample* const> batch, std::span<const std::size_t> caption_index,
                               std::size_t epoch, std::size_t steps_per_epoch) {
  if (batch.empty()) throw std::invalid_argument("train step: empty batch");
  const nn::Context ctx{true, &dropout_rng_};
  const nn::Context enc_ctx = model_.encoder.head_context(ctx);

  std::vector<const signal::Spectrogram*> specs;
  std::vector<std::vector<int>> captions;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    specs.push_back(batch[i]->spec);
    captions.push_back(batch[i]->captions.at(caption_index[i]));
  }
  const TokenBatch tokens = TokenBatch::from_sequences(captions);
  const Tensor audio = model_.encoder.audio.forward(specs, enc_ctx).rows;

  const double temperature = cfg_.learnable_temperature ? std::exp(model_.log_temperature.item())
                                                        : cfg_.contrastive.temperature;
  Tensor sim, l_cl;
  if (cfg_.alpha > 0.0) {
    const Tensor text = model_.encoder.text.forward(tokens, enc_ctx).rows;
    sim = cosine_similarity_matrix(audio, text);
    const Tensor logits = cfg_.learnable_temperature ? mul(sim, exp(neg(model_.log_temperature)))
                                                     : scale(sim, 1.0 / cfg_.contrastive.temperature);
    l_cl = contrastive_loss_from_logits(logits, cfg_.contrastive.lambda);
  } else {
    NoGradGuard guard;
    const Tensor text = model_.encoder.text.forward(tokens, nn::Context{}).rows;
    sim = cosine_similarity_matrix(audio, text);
    l_cl = contrastive_loss(sim, {temperature, cfg_.contrastive.lambda});
  }

  const TeacherForcing tf = make_teacher_forcing(captions);
  const Tensor logits = model_.decoder.forward(tf.inputs, audio, ctx);
  const Tensor l_ce = caption_ce_loss(logits, tf.targets, model_.config().decoder.label_smoothing);
  const Tensor total = total_loss(l_cl, l_ce, cfg_.alpha);
  backward(total);

  StepRecord rec;
  rec.epoch = epoch;
  rec.step = global_step_;
  rec.l_cl = l_cl.item();
  rec.l_ce = l_ce.item();
  rec.l_total = total.item();
  if (cfg_.warmup_per_step) {
    rec.lr_enc = lr_schedule_steps(global_step_, cfg_.lr_encoder, cfg_.warmup_epochs * steps_per_epoch);
    rec.lr_dec = lr_schedule_steps(global_step_, cfg_.lr_decoder, cfg_.warmup_epochs * steps_per_epoch);
  } else {
    rec.lr_enc = lr_schedule(epoch, cfg_.lr_encoder, cfg_.warmup_epochs);
    rec.lr_dec = lr_schedule(epoch, cfg_.lr_decoder, cfg_.warmup_epochs);
  }
  rec.diag_dom = diagonal_dominance(sim, temperature);

  std::vector<nn::NamedTensor> trainable = dec_opt_.params();
  if (!cfg_.frozen_encoder) trainable.insert(trainable.end(), enc_opt_.params().begin(), enc_opt_.params().end());
  const double norm = clip_grad_norm(trainable, cfg_.grad_clip);
  if (norm > cfg_.grad_clip) {
    ++clip_events_;
    if (message_) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "epoch %zu step %zu: gradient norm %.4g clipped to %.4g", epoch, global_step_,
                    norm, cfg_.grad_clip);
      message_(buf);
    }
  }

  if (!cfg_.frozen_encoder) enc_opt_.step(rec.lr_enc);
  dec_opt_.step(rec.lr_dec);
  for (const auto& p : enc_opt_.params()) Tensor(p.tensor).zero_grad();
  for (const auto& p : dec_opt_.params()) Tensor(p.tensor).zero_grad();
  model_.log_temperature.zero_grad();

  log_.append(rec);
  ++global_step_;
  return rec;
}

void Trainer::run_epoch(std::span<const TrainExample> data, std::size_t epoch) {
  const auto batches = epoch_batches(data.size(), cfg_.batch_size, cfg_.seed, epoch, cfg_.alpha > 0.0);
  if (batches.empty())
    throw std::invalid_argument("train: " + std::to_string(data.size()) + " clips do not fill one batch of " +
                                std::to_string(cfg_.batch_size));
  for (const auto& idx : batches) {
    std::vector<const TrainExample*> batch;
    std::vector<std::size_t> choice;
    for (std::size_t i : idx) {
      if (data[i].captions.empty()) throw std::invalid_argument("train: clip without captions");
      batch.push_back(&data[i]);
      choice.push_back((epoch + i) % data[i].captions.size());
    }
    train_step(batch, choice, epoch, batches.size());
  }
}

void Trainer::fit(std::span<const TrainExample> data, const EpochCallback& on_epoch) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  for (std::size_t e = 0; e < cfg_.epochs; ++e) {
    run_epoch(data, e);
    if (on_epoch) on_epoch(e, *this);
  }
}

double teacher_forced_ce(const CaptionModel& model, std::span<const TrainExample> data, double eps,
                         std::size_t batch_size) {
  if (data.empty()) throw std::invalid_argument("teacher-forced CE: empty dataset");
  NoGradGuard guard;
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    std::vector<const signal::Spectrogram*> specs;
    for (std::size_t i = start; i < end; ++i) specs.push_back(data[i].spec);
    const Tensor audio = model.embed_audio(specs);
    const std::size_t dim = audio.dim(1);

    std::vector<std::vector<int>> captions;
    std::vector<double> rows;
    for (std::size_t i = start; i < end; ++i)
      for (const auto& c : data[i].captions) {
        captions.push_back(c);
        const auto src = audio.data().subspan((i - start) * dim, dim);
        rows.insert(rows.end(), src.begin(), src.end());
      }
    const TeacherForcing tf = make_teacher_forcing(captions);
    const Tensor mem = Tensor::from_data({captions.size(), dim}, std::move(rows));
    const Tensor logits = model.decoder.forward(tf.inputs, mem, nn::Context{});
    const std::size_t n = static_cast<std::size_t>(
        std::count_if(tf.targets.begin(), tf.targets.end(), [](int t) { return t >= 0; }));
    total += caption_ce_loss(logits, tf.targets, eps).item() * static_cast<double>(n);
    tokens += n;
  }
  return total / static_cast<double>(tokens);
}

Tensor eval_similarity(const CaptionModel& model, std::span<const signal::Spectrogram* const> specs,
                       std::span<const std::vector<int>> captions) {
  if (specs.size() != captions.size()) throw std::invalid_argument("similarity: clip and caption counts differ");
  NoGradGuard guard;
  const Tensor audio = model.embed_audio(specs);
  const Tensor text = model.encoder.text.forward(TokenBatch::from_sequences(captions), nn::Context{}).rows;
  return cosine_similarity_matrix(audio, text);
}

}  // namespace caac
