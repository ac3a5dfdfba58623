#include "caac/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <variant>

namespace caac {

namespace {

using Field = std::variant<std::size_t RunConfig::*, double RunConfig::*,
                           bool RunConfig::*, std::string RunConfig::*>;

struct Entry {
  const char* name;
  Field field;
  const char* description;
};

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table{
      {"seed", &RunConfig::seed, "single source of all randomness"},
      {"holdout_fraction", &RunConfig::holdout_fraction, "fraction of clips held out for evaluation"},
      {"stft_frame_size", &RunConfig::stft_frame_size, "STFT frame length in samples (power of two)"},
      {"stft_hop", &RunConfig::stft_hop, "STFT hop in samples"},
      {"audio_stem_channels", &RunConfig::audio_stem_channels, "channels of the 7x7 stem convolution"},
      {"audio_base_channels", &RunConfig::audio_base_channels, "channels of the first dual-path block (doubling)"},
      {"audio_dual_path_blocks", &RunConfig::audio_dual_path_blocks, "number of dual-path blocks"},
      {"audio_bottlenecks_per_path", &RunConfig::audio_bottlenecks_per_path, "bottlenecks in each block's path one"},
      {"audio_stem_stride", &RunConfig::audio_stem_stride, "stride of the stem convolution"},
      {"embed_len", &RunConfig::embed_len, "embedding length L shared by both heads"},
      {"text_model_dim", &RunConfig::text_model_dim, "text-head transformer width"},
      {"text_layers", &RunConfig::text_layers, "text-head self-attention layers"},
      {"text_heads", &RunConfig::text_heads, "text-head attention heads"},
      {"text_ffn_dim", &RunConfig::text_ffn_dim, "text-head feed-forward width"},
      {"decoder_model_dim", &RunConfig::decoder_model_dim, "decoder width"},
      {"decoder_heads", &RunConfig::decoder_heads, "decoder attention heads"},
      {"decoder_blocks", &RunConfig::decoder_blocks, "decoder blocks"},
      {"decoder_ffn_dim", &RunConfig::decoder_ffn_dim, "decoder feed-forward width"},
      {"decoder_max_len", &RunConfig::decoder_max_len, "longest decoder input, start symbol included"},
      {"dropout", &RunConfig::dropout, "dropout rate in both heads and the decoder"},
      {"label_smoothing", &RunConfig::label_smoothing, "label smoothing of the caption loss"},
      {"epochs", &RunConfig::epochs, "training epochs"},
      {"batch_size", &RunConfig::batch_size, "clips per batch"},
      {"lr_encoder", &RunConfig::lr_encoder, "Adam learning rate of the encoder"},
      {"lr_decoder", &RunConfig::lr_decoder, "Adam learning rate of the decoder"},
      {"warmup_epochs", &RunConfig::warmup_epochs, "linear warm-up length in epochs"},
      {"warmup_granularity", &RunConfig::warmup_granularity, "\"epoch\" or \"step\""},
      {"alpha", &RunConfig::alpha, "weight of the contrastive loss in the total loss"},
      {"lambda", &RunConfig::lambda, "weight of the audio-to-text half of the contrastive loss"},
      {"temperature", &RunConfig::temperature, "contrastive softmax temperature"},
      {"learnable_temperature", &RunConfig::learnable_temperature, "train log-temperature with the encoder"},
      {"frozen_encoder", &RunConfig::frozen_encoder, "exclude the encoder from updates"},
      {"grad_clip", &RunConfig::grad_clip, "global gradient-norm clipping threshold"},
      {"beam_size", &RunConfig::beam_size, "beam width at inference"},
      {"max_caption_len", &RunConfig::max_caption_len, "generated tokens per caption, end symbol included"},
  };
  return table;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, res.ptr);
  if (s.find_first_of(".en") == std::string::npos) s += ".0";
  return s;
}

std::string format_field(const RunConfig& cfg, const Field& f) {
  return std::visit(
      [&cfg](auto member) -> std::string {
        using T = std::remove_cvref_t<decltype(cfg.*member)>;
        const T& v = cfg.*member;
        if constexpr (std::is_same_v<T, bool>) return v ? "true" : "false";
        else if constexpr (std::is_same_v<T, double>) return format_double(v);
        else if constexpr (std::is_same_v<T, std::string>) return "\"" + v + "\"";
        else return std::to_string(v);
      },
      f);
}

template <typename T>
bool parse_integer(const std::string& s, T& out) {
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

void assign(RunConfig& cfg, const Entry& e, const std::string& raw) {
  const std::string key = e.name;
  auto bad = [&](const char* expected) {
    return ConfigError("config key '" + key + "': expected " + expected + ", got '" + raw + "'");
  };
  std::visit(
      [&](auto member) {
        using T = std::remove_cvref_t<decltype(cfg.*member)>;
        if constexpr (std::is_same_v<T, bool>) {
          if (raw == "true") cfg.*member = true;
          else if (raw == "false") cfg.*member = false;
          else throw bad("true or false");
        } else if constexpr (std::is_same_v<T, double>) {
          double v = 0.0;
          const auto res = std::from_chars(raw.data(), raw.data() + raw.size(), v);
          if (res.ec != std::errc() || res.ptr != raw.data() + raw.size()) throw bad("a number");
          cfg.*member = v;
        } else if constexpr (std::is_same_v<T, std::string>) {
          if (raw.size() < 2 || raw.front() != '"' || raw.back() != '"') throw bad("a quoted string");
          cfg.*member = raw.substr(1, raw.size() - 2);
        } else {
          T v{};
          if (!parse_integer(raw, v)) throw bad("a non-negative integer");
          cfg.*member = v;
        }
      },
      e.field);
}

const Entry& find_entry(const std::string& key) {
  for (const auto& e : entries())
    if (key == e.name) return e;
  throw ConfigError("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& s) {
  bool quoted = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') quoted = !quoted;
    if (s[i] == '#' && !quoted) return s.substr(0, i);
  }
  return s;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    const RunConfig defaults;
    for (const auto& e : entries()) out.push_back({e.name, format_field(defaults, e.field), e.description});
    return out;
  }();
  return keys;
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string body = trim(strip_comment(line));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    const Entry& e = find_entry(key);
    if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' given twice");
    assign(cfg, e, value);
  }
  for (const auto& k : config_keys())
    if (!seen.count(k.name))
      throw ConfigError("missing config key '" + k.name + "' (default: " + k.name + " = " + k.default_value + ")");
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& e : entries()) out += std::string(e.name) + " = " + format_field(cfg, e.field) + "\n";
  return out;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  assign(cfg, find_entry(key), trim(value));
}

void RunConfig::validate() const {
  if (warmup_granularity != "epoch" && warmup_granularity != "step")
    throw ConfigError("config key 'warmup_granularity': expected \"epoch\" or \"step\"");
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0))
    throw ConfigError("config key 'holdout_fraction': must lie in [0, 1)");
  if (beam_size < 1) throw ConfigError("config key 'beam_size': must be at least 1");
  if (max_caption_len < 1 || max_caption_len > decoder_max_len)
    throw ConfigError("config key 'max_caption_len': must lie in [1, decoder_max_len]");
  try {
    model_config(8).validate();
    train_config().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
}

ModelConfig RunConfig::model_config(std::size_t vocab_size) const {
  ModelConfig m;
  m.audio.stem_channels = audio_stem_channels;
  m.audio.base_channels = audio_base_channels;
  m.audio.dual_path_blocks = audio_dual_path_blocks;
  m.audio.bottlenecks_per_path = audio_bottlenecks_per_path;
  m.audio.stem_stride = audio_stem_stride;
  m.audio.embed_len = embed_len;
  m.audio.dropout = dropout;
  m.text.vocab_size = vocab_size;
  m.text.model_dim = text_model_dim;
  m.text.layers = text_layers;
  m.text.heads = text_heads;
  m.text.ffn_dim = text_ffn_dim;
  m.text.embed_len = embed_len;
  m.text.dropout = dropout;
  m.decoder.vocab_size = vocab_size;
  m.decoder.model_dim = decoder_model_dim;
  m.decoder.heads = decoder_heads;
  m.decoder.blocks = decoder_blocks;
  m.decoder.ffn_dim = decoder_ffn_dim;
  m.decoder.memory_dim = embed_len;
  m.decoder.max_len = decoder_max_len;
  m.decoder.dropout = dropout;
  m.decoder.label_smoothing = label_smoothing;
  m.stft.frame_size = stft_frame_size;
  m.stft.hop = stft_hop;
  m.temperature = temperature;
  return m;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.lr_encoder = lr_encoder;
  t.lr_decoder = lr_decoder;
  t.warmup_epochs = warmup_epochs;
  t.warmup_per_step = warmup_granularity == "step";
  t.alpha = alpha;
  t.contrastive.temperature = temperature;
  t.contrastive.lambda = lambda;
  t.learnable_temperature = learnable_temperature;
  t.frozen_encoder = frozen_encoder;
  t.grad_clip = grad_clip;
  t.seed = seed;
  return t;
}

BeamConfig RunConfig::beam_config() const {
  BeamConfig b;
  b.beam_size = beam_size;
  b.max_len = max_caption_len;
  return b;
}

}  // namespace caac
