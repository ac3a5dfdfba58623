#include "caac/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace caac {

namespace {

constexpr char kMagic[8] = {'C', 'L', 'A', 'A', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> bytes) : buf_(std::move(bytes)) {}
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> f64s(std::uint64_t n) {
    need(n * 8);
    std::vector<double> v(n);
    for (auto& x : v) x = f64();
    return v;
  }
  bool at_end() const { return pos_ == buf_.size(); }
  void need(std::uint64_t n) const {
    if (n > buf_.size() - pos_) throw CheckpointError("checkpoint: truncated file");
  }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

void write_optimizer(Writer& w, const Adam& opt) {
  w.u64(opt.step_count());
  w.u64(opt.params().size());
  for (std::size_t i = 0; i < opt.params().size(); ++i) {
    w.str(opt.params()[i].name);
    w.u64(opt.first_moments()[i].size());
    for (double x : opt.first_moments()[i]) w.f64(x);
    for (double x : opt.second_moments()[i]) w.f64(x);
  }
}

OptimizerBlob read_optimizer(Reader& r) {
  OptimizerBlob b;
  b.step = r.u64();
  const std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    b.names.push_back(r.str());
    const std::uint64_t numel = r.u64();
    b.m.push_back(r.f64s(numel));
    b.v.push_back(r.f64s(numel));
  }
  return b;
}

void restore_optimizer(const OptimizerBlob& blob, Adam& opt, const char* group) {
  if (blob.names.size() != opt.params().size())
    throw CheckpointError(std::string("checkpoint: ") + group + " optimizer has " + std::to_string(blob.names.size()) +
                          " entries, expected " + std::to_string(opt.params().size()));
  for (std::size_t i = 0; i < blob.names.size(); ++i)
    if (blob.names[i] != opt.params()[i].name)
      throw CheckpointError(std::string("checkpoint: ") + group + " optimizer entry " + blob.names[i] +
                            " does not match " + opt.params()[i].name);
  try {
    opt.restore(blob.step, blob.m, blob.v);
  } catch (const ShapeError& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, const data::Vocabulary& vocab,
                     const CaptionModel& model, const Trainer* trainer, std::size_t epochs_completed) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  w.u64(epochs_completed);
  w.str(format_config(cfg));
  const auto words = vocab.words();
  w.u64(words.size());
  for (const auto& s : words) w.str(s);

  const auto set = model.parameters();
  w.u64(set.parameters().size() + set.buffers().size());
  auto put = [&w](const nn::NamedTensor& t, bool buffer) {
    w.str(t.name);
    w.u8(buffer ? 1 : 0);
    w.u64(t.tensor.rank());
    for (std::size_t d : t.tensor.shape()) w.u64(d);
    for (double x : t.tensor.data()) w.f64(x);
  };
  for (const auto& p : set.parameters()) put(p, false);
  for (const auto& b : set.buffers()) put(b, true);

  w.u8(trainer != nullptr ? 1 : 0);
  if (trainer != nullptr) {
    write_optimizer(w, trainer->encoder_optimizer());
    write_optimizer(w, trainer->decoder_optimizer());
  }

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("checkpoint: cannot open " + tmp.string() + " for writing");
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw CheckpointError("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  Reader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}));
  char magic[8];
  for (char& c : magic) c = static_cast<char>(r.u8());
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw CheckpointError("checkpoint: " + path.string() + " is not a checkpoint (bad magic bytes)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: format version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  Checkpoint c;
  c.epochs_completed = r.u64();
  c.config_text = r.str();
  const std::uint64_t n_words = r.u64();
  for (std::uint64_t i = 0; i < n_words; ++i) c.vocab_words.push_back(r.str());
  const std::uint64_t n_tensors = r.u64();
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    TensorBlob t;
    t.name = r.str();
    t.is_buffer = r.u8() != 0;
    const std::uint64_t rank = r.u64();
    for (std::uint64_t k = 0; k < rank; ++k) t.shape.push_back(r.u64());
    t.values = r.f64s(shape_numel(t.shape));
    c.tensors.push_back(std::move(t));
  }
  c.has_optimizer = r.u8() != 0;
  if (c.has_optimizer) {
    c.encoder_opt = read_optimizer(r);
    c.decoder_opt = read_optimizer(r);
  }
  if (!r.at_end()) throw CheckpointError("checkpoint: trailing bytes after optimizer state");
  return c;
}

void restore_model(const Checkpoint& ckpt, CaptionModel& model) {
  const auto set = model.parameters();
  std::vector<nn::NamedTensor> targets = set.parameters();
  std::vector<bool> is_buffer(targets.size(), false);
  for (const auto& b : set.buffers()) {
    targets.push_back(b);
    is_buffer.push_back(true);
  }
  if (targets.size() != ckpt.tensors.size())
    throw CheckpointError("checkpoint: holds " + std::to_string(ckpt.tensors.size()) + " tensors, model has " +
                          std::to_string(targets.size()));
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& blob = ckpt.tensors[i];
    if (blob.name != targets[i].name || blob.is_buffer != is_buffer[i])
      throw CheckpointError("checkpoint: tensor " + blob.name + " does not match model tensor " + targets[i].name);
    if (blob.shape != targets[i].tensor.shape())
      throw CheckpointError("checkpoint: shape mismatch for " + blob.name + ": file " + shape_str(blob.shape) +
                            ", model " + shape_str(targets[i].tensor.shape()));
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    auto dst = targets[i].tensor.mutable_data();
    std::copy(ckpt.tensors[i].values.begin(), ckpt.tensors[i].values.end(), dst.begin());
  }
}

void restore_optimizers(const Checkpoint& ckpt, Trainer& trainer) {
  if (!ckpt.has_optimizer) throw CheckpointError("checkpoint: no optimizer state stored");
  restore_optimizer(ckpt.encoder_opt, trainer.encoder_optimizer(), "encoder");
  restore_optimizer(ckpt.decoder_opt, trainer.decoder_optimizer(), "decoder");
}

LoadedModel load_model(const std::filesystem::path& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  LoadedModel out;
  try {
    out.config = parse_config(ckpt.config_text);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: stored config is invalid: ") + e.what());
  }
  out.vocab = data::Vocabulary::from_words(ckpt.vocab_words);
  out.model = std::make_unique<CaptionModel>(out.config.model_config(out.vocab.size()), out.config.seed);
  restore_model(ckpt, *out.model);
  out.epochs_completed = ckpt.epochs_completed;
  return out;
}

}  // namespace caac
