#pragma once

// Adam with two parameter groups, warm-up schedule, run log and the joint
// contrastive + captioning training loop.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "caac/contrastive.hpp"
#include "caac/model.hpp"

namespace caac {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed list of parameters. A parameter with
/// no accumulated gradient is treated as having a zero gradient.
class Adam {
 public:
  explicit Adam(std::vector<nn::NamedTensor> params, AdamConfig cfg = {});

  /// Throws NumericError, leaving every parameter untouched, if any
  /// gradient is non-finite.
  void step(double lr);

  std::size_t step_count() const noexcept { return step_; }
  const std::vector<nn::NamedTensor>& params() const noexcept { return params_; }
  const std::vector<std::vector<double>>& first_moments() const noexcept { return m_; }
  const std::vector<std::vector<double>>& second_moments() const noexcept { return v_; }

  /// Replaces the optimizer state; shapes must match the parameters.
  void restore(std::size_t step, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v);

 private:
  std::vector<nn::NamedTensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

/// base_lr * min(1, (epoch + 1) / warmup_epochs); base_lr when warmup is 0.
double lr_schedule(std::size_t epoch, double base_lr, std::size_t warmup_epochs);
/// Step-granularity variant over warmup_steps optimizer steps.
double lr_schedule_steps(std::size_t global_step, double base_lr, std::size_t warmup_steps);

/// Euclidean norm over every populated gradient.
double global_grad_norm(std::span<const nn::NamedTensor> params);
/// Scales gradients so their global norm is at most max_norm. Returns the
/// norm before clipping.
double clip_grad_norm(std::span<const nn::NamedTensor> params, double max_norm);

struct StepRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double l_cl = 0.0;
  double l_ce = 0.0;
  double l_total = 0.0;
  double lr_enc = 0.0;
  double lr_dec = 0.0;
  double diag_dom = 0.0;
};

class RunLog {
 public:
  static const char* csv_header() { return "epoch,step,l_cl,l_ce,l_total,lr_enc,lr_dec,diag_dom"; }

  /// Rejects records that do not advance (epoch, step).
  void append(const StepRecord& r);
  const std::vector<StepRecord>& records() const noexcept { return records_; }
  void write_csv(std::ostream& out) const;

 private:
  std::vector<StepRecord> records_;
};

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 8;
  double lr_encoder = 1e-5;
  double lr_decoder = 1e-3;
  std::size_t warmup_epochs = 5;
  bool warmup_per_step = false;
  double alpha = 0.2;
  ContrastiveConfig contrastive;
  bool learnable_temperature = false;
  bool frozen_encoder = false;
  double grad_clip = 5.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// One training clip: its spectrogram and every tokenized caption.
struct TrainExample {
  const signal::Spectrogram* spec = nullptr;
  std::vector<std::vector<int>> captions;
};

class Trainer {
 public:
  Trainer(CaptionModel& model, const TrainConfig& cfg);

  using EpochCallback = std::function<void(std::size_t epoch, const Trainer&)>;
  using MessageCallback = std::function<void(const std::string&)>;

  /// Runs cfg.epochs epochs. on_epoch fires after every epoch.
  void fit(std::span<const TrainExample> data, const EpochCallback& on_epoch = {});
  /// Runs one epoch with index `epoch`.
  void run_epoch(std::span<const TrainExample> data, std::size_t epoch);

  /// One optimizer step on a batch, with the given caption choice per clip.
  StepRecord train_step(std::span<const TrainExample* const> batch, std::span<const std::size_t> caption_index,
                        std::size_t epoch, std::size_t steps_per_epoch);

  void set_frozen(bool flag);
  void set_message_callback(MessageCallback cb) { message_ = std::move(cb); }

  const RunLog& log() const noexcept { return log_; }
  const TrainConfig& config() const noexcept { return cfg_; }
  Adam& encoder_optimizer() noexcept { return enc_opt_; }
  Adam& decoder_optimizer() noexcept { return dec_opt_; }
  const Adam& encoder_optimizer() const noexcept { return enc_opt_; }
  const Adam& decoder_optimizer() const noexcept { return dec_opt_; }
  std::size_t clip_events() const noexcept { return clip_events_; }
  std::size_t global_step() const noexcept { return global_step_; }

 private:
  std::vector<nn::NamedTensor> encoder_group() const;

  CaptionModel& model_;
  TrainConfig cfg_;
  Adam enc_opt_;
  Adam dec_opt_;
  Rng dropout_rng_;
  RunLog log_;
  MessageCallback message_;
  std::size_t clip_events_ = 0;
  std::size_t global_step_ = 0;
};

/// Batches of clip indices for one epoch: a seeded permutation cut into
/// batch_size groups. The trailing partial batch is dropped when
/// drop_partial is set.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::size_t epoch, bool drop_partial);

}  // namespace caac

namespace caac {

/// Evaluation-mode, teacher-forced per-token cross-entropy over every
/// caption of every example, averaged over all target tokens.
double teacher_forced_ce(const CaptionModel& model, std::span<const TrainExample> data, double eps = 0.0,
                         std::size_t batch_size = 8);

/// Evaluation-mode similarity matrix between clips and one caption each.
Tensor eval_similarity(const CaptionModel& model, std::span<const signal::Spectrogram* const> specs,
                       std::span<const std::vector<int>> captions);

}  // namespace caac
