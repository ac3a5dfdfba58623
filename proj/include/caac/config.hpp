#pragma once

// Run configuration: a flat key = value file (TOML subset of strings,
// numbers and booleans) in which every key must be present.

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "caac/decoder.hpp"
#include "caac/model.hpp"
#include "caac/trainer.hpp"

namespace caac {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::size_t seed = 7;
  double holdout_fraction = 0.2;

  std::size_t stft_frame_size = 256;
  std::size_t stft_hop = 128;

  std::size_t audio_stem_channels = 8;
  std::size_t audio_base_channels = 16;
  std::size_t audio_dual_path_blocks = 2;
  std::size_t audio_bottlenecks_per_path = 1;
  std::size_t audio_stem_stride = 2;
  std::size_t embed_len = 64;

  std::size_t text_model_dim = 32;
  std::size_t text_layers = 2;
  std::size_t text_heads = 4;
  std::size_t text_ffn_dim = 64;

  std::size_t decoder_model_dim = 32;
  std::size_t decoder_heads = 4;
  std::size_t decoder_blocks = 2;
  std::size_t decoder_ffn_dim = 64;
  std::size_t decoder_max_len = 24;

  double dropout = 0.2;
  double label_smoothing = 0.1;

  std::size_t epochs = 40;
  std::size_t batch_size = 8;
  double lr_encoder = 1e-5;
  double lr_decoder = 1e-3;
  std::size_t warmup_epochs = 5;
  std::string warmup_granularity = "epoch";
  double alpha = 0.2;
  double lambda = 0.5;
  double temperature = 0.07;
  bool learnable_temperature = false;
  bool frozen_encoder = false;
  double grad_clip = 5.0;

  std::size_t beam_size = 3;
  std::size_t max_caption_len = 20;

  ModelConfig model_config(std::size_t vocab_size) const;
  TrainConfig train_config() const;
  BeamConfig beam_config() const;
  void validate() const;
};

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string description;
};

/// Every key in file order with its default value.
const std::vector<ConfigKey>& config_keys();

/// Throws ConfigError naming the line for syntax errors, the key for
/// unknown, duplicate, mistyped or missing keys (with the default).
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);

/// Canonical text form; parse_config(format_config(c)) reproduces c.
std::string format_config(const RunConfig& cfg);

/// Sets one key from its textual value.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

}  // namespace caac
