#pragma once

// Versioned binary checkpoints: config echo, vocabulary, named parameter and
// buffer blobs (little-endian f64) and optional Adam state.
//
// Layout:
//   "CLAACKPT" u32 version u64 epochs_completed
//   str config_text
//   u64 n_words { str word }
//   u64 n_tensors { str name u8 is_buffer u64 rank { u64 dim } f64[numel] }
//   u8 has_optimizer [ 2 x { u64 step u64 n { str name u64 numel f64[numel] m f64[numel] v } } ]
// where str is a u64 byte length followed by the bytes.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "caac/config.hpp"
#include "caac/data.hpp"
#include "caac/model.hpp"
#include "caac/trainer.hpp"

namespace caac {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorBlob {
  std::string name;
  bool is_buffer = false;
  Shape shape;
  std::vector<double> values;
};

struct OptimizerBlob {
  std::size_t step = 0;
  std::vector<std::string> names;
  std::vector<std::vector<double>> m, v;
};

struct Checkpoint {
  std::size_t epochs_completed = 0;
  std::string config_text;
  std::vector<std::string> vocab_words;
  std::vector<TensorBlob> tensors;
  bool has_optimizer = false;
  OptimizerBlob encoder_opt, decoder_opt;
};

/// Writes to a temporary file and renames it over path.
void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, const data::Vocabulary& vocab,
                     const CaptionModel& model, const Trainer* trainer, std::size_t epochs_completed);

/// Throws CheckpointError for a bad magic, an unknown version or a
/// truncated file.
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies values into model. Throws CheckpointError when names or shapes
/// differ from the model's.
void restore_model(const Checkpoint& ckpt, CaptionModel& model);
void restore_optimizers(const Checkpoint& ckpt, Trainer& trainer);

struct LoadedModel {
  RunConfig config;
  data::Vocabulary vocab;
  std::unique_ptr<CaptionModel> model;
  std::size_t epochs_completed = 0;
};

/// Rebuilds the model described by a checkpoint and restores its values.
LoadedModel load_model(const std::filesystem::path& path);

}  // namespace caac
