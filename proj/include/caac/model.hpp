#pragma once

// Full captioning model: dual-head encoder, decoder and the (optionally
// learnable) contrastive temperature.

#include <cstdint>
#include <span>
#include <string>

#include "caac/data.hpp"
#include "caac/decoder.hpp"
#include "caac/encoder.hpp"
#include "caac/signal.hpp"

namespace caac {

struct ModelConfig {
  AudioHeadConfig audio;
  TextHeadConfig text;
  DecoderConfig decoder;
  signal::StftConfig stft;
  double temperature = 0.07;

  void validate() const;
};

class CaptionModel {
 public:
  CaptionModel(const ModelConfig& cfg, std::uint64_t seed);

  ClipEncoder encoder;
  Decoder decoder;
  Tensor log_temperature;  // scalar; only trained when learnable

  const ModelConfig& config() const noexcept { return cfg_; }

  nn::ParameterSet encoder_parameters() const { return encoder.parameters(); }
  nn::ParameterSet decoder_parameters() const;
  /// Every parameter and buffer, encoder first.
  nn::ParameterSet parameters() const;

  /// Evaluation-mode audio embeddings without graph recording.
  Tensor embed_audio(std::span<const signal::Spectrogram* const> specs) const;

  /// Decodes one clip. Uses the audio head and decoder only.
  CaptionHypothesis caption(const signal::Spectrogram& spec, const BeamConfig& beam) const;

 private:
  CaptionModel(const ModelConfig& cfg, Rng rng);
  ModelConfig cfg_;
};

/// Waveform to caption text.
std::string infer(const CaptionModel& model, const data::Vocabulary& vocab, const signal::Waveform& wave,
                  const BeamConfig& beam);

}  // namespace caac
