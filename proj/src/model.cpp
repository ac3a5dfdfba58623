#include "caac/model.hpp"

#include <cmath>
#include <stdexcept>

namespace caac {

void ModelConfig::validate() const {
  audio.validate();
  text.validate();
  decoder.validate();
  if (audio.embed_len != text.embed_len || audio.embed_len != decoder.memory_dim)
    throw std::invalid_argument("model: audio, text and decoder memory lengths must agree");
  if (text.vocab_size != decoder.vocab_size) throw std::invalid_argument("model: text and decoder vocabularies differ");
  if (!(temperature > 0.0)) throw std::invalid_argument("model: temperature must be positive");
}

namespace {
Rng init_stream(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  return Rng::derive(seed, 0x1417);
}
}  // namespace

CaptionModel::CaptionModel(const ModelConfig& cfg, std::uint64_t seed) : CaptionModel(cfg, init_stream(cfg, seed)) {}

CaptionModel::CaptionModel(const ModelConfig& cfg, Rng rng)
    : encoder(cfg.audio, cfg.text, rng),
      decoder(cfg.decoder, rng),
      log_temperature(Tensor::scalar(std::log(cfg.temperature), true)),
      cfg_(cfg) {}

nn::ParameterSet CaptionModel::decoder_parameters() const {
  nn::ParameterSet set;
  decoder.collect(set, "decoder");
  return set;
}

nn::ParameterSet CaptionModel::parameters() const {
  nn::ParameterSet set = encoder.parameters();
  set.append(decoder_parameters());
  set.add_parameter("contrastive.log_temperature", log_temperature);
  return set;
}

Tensor CaptionModel::embed_audio(std::span<const signal::Spectrogram* const> specs) const {
  NoGradGuard guard;
  return encoder.audio.forward(specs, nn::Context{}).rows;
}

CaptionHypothesis CaptionModel::caption(const signal::Spectrogram& spec, const BeamConfig& beam) const {
  const signal::Spectrogram* one[] = {&spec};
  const Tensor a = embed_audio(one);
  return beam_search(decoder_step(decoder, a), beam);
}

std::string infer(const CaptionModel& model, const data::Vocabulary& vocab, const signal::Waveform& wave,
                  const BeamConfig& beam) {
  const auto spec = signal::log_power_spectrogram(wave, model.config().stft);
  return vocab.decode(model.caption(spec, beam).tokens);
}

}  // namespace caac
