#pragma once

// Implementations of the caac subcommands. Each returns a process exit
// code and writes diagnostics to err.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace caac::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumericAbort = 3 };

inline constexpr const char* kToolVersion = "0.1.0";

struct GenDataOptions {
  std::uint64_t seed = 0;
  std::size_t clips = 32;
  std::size_t captions_per_clip = 5;
  std::filesystem::path out;
};

struct TrainOptions {
  std::filesystem::path config;
  std::filesystem::path dataset;
  std::filesystem::path out_dir;
  bool frozen_encoder = false;
  std::vector<std::string> overrides;  // "key=value"
};

enum class SplitChoice { train, test, all };

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path dataset;
  std::filesystem::path pairs;  // candidate/reference JSONL instead of a model
  SplitChoice split = SplitChoice::test;
  std::optional<std::size_t> beam_size;
  std::filesystem::path out;  // stdout when empty
};

struct InferOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path input;
  std::optional<std::size_t> beam_size;
};

struct SimmatOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path dataset;
  std::vector<std::size_t> clips;  // dataset indices; first 8 training clips when empty
  std::filesystem::path csv;
  std::filesystem::path pgm;
  std::size_t cell = 16;
};

int gen_data(const GenDataOptions& opt, std::ostream& out, std::ostream& err);
int train(const TrainOptions& opt, std::ostream& out, std::ostream& err);
int eval(const EvalOptions& opt, std::ostream& out, std::ostream& err);
int infer(const InferOptions& opt, std::ostream& out, std::ostream& err);
int simmat(const SimmatOptions& opt, std::ostream& out, std::ostream& err);

/// Every config key with its default and description, one per line.
std::string config_reference();

}  // namespace caac::cli
