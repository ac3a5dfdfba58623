#pragma once

// Synthetic audio-caption corpus, vocabulary, tokenizer and JSONL I/O.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "caac/decoder.hpp"

namespace caac::data {

/// Malformed or missing dataset input.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class EventKind { tone, noise_burst, chirp, click_train };
enum class Pitch { low, mid, high };

struct SoundEvent {
  EventKind kind = EventKind::tone;
  Pitch pitch = Pitch::mid;
  int repetitions = 1;  // 1..4
  int duration_ms = 60;

  bool same_semantics(const SoundEvent& o) const {
    return kind == o.kind && pitch == o.pitch && repetitions == o.repetitions;
  }
};

struct DatasetRecord {
  std::string id;
  std::vector<double> samples;
  int sample_rate = 8000;
  std::vector<std::string> captions;
  std::vector<SoundEvent> events;  // empty for loaded records
};

inline constexpr std::size_t kMaxCaptionsPerClip = 5;

/// Seeded corpus of n_clips records. Clip i draws from its own stream
/// derived from (seed, i), so records do not depend on n_clips.
std::vector<DatasetRecord> generate(std::uint64_t seed, std::size_t n_clips, std::size_t n_captions_per_clip = 5);

/// Caption j (0..4) for an event list.
std::string caption_for(const std::vector<SoundEvent>& events, std::size_t template_index);

/// Inverse of the caption grammar. Returns nullopt for text outside it.
std::optional<std::vector<SoundEvent>> parse_caption_events(const std::string& caption);

/// Lowercase, punctuation to spaces, whitespace split.
std::vector<std::string> normalize(const std::string& text);
std::string join_words(const std::vector<std::string>& words);

class Vocabulary {
 public:
  /// Reserved symbols followed by words ordered by descending frequency,
  /// then lexicographically.
  static Vocabulary build(const std::vector<DatasetRecord>& records);
  /// Words in id order after the reserved symbols.
  static Vocabulary from_words(const std::vector<std::string>& words);

  std::size_t size() const noexcept { return words_.size(); }
  int id(const std::string& word) const;
  const std::string& word(int id) const;
  /// Words after the reserved symbols, in id order.
  std::vector<std::string> words() const;

  /// [start, ids..., end]; unknown words map to unk.
  std::vector<int> encode(const std::string& text) const;
  /// Joins known words, omitting reserved symbols.
  std::string decode(const std::vector<int>& ids) const;

  bool operator==(const Vocabulary& o) const { return words_ == o.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

/// Writes one JSON object per line: {"id", "samples", "captions"}.
void save_jsonl(const std::filesystem::path& path, const std::vector<DatasetRecord>& records);
/// Validates every line; errors name the offending line number.
std::vector<DatasetRecord> load_jsonl(const std::filesystem::path& path);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Seeded clip-level partition: a permutation of [0, n) whose first
/// round(n * test_fraction) entries are held out. Both halves are sorted.
Split split_clips(std::size_t n, double test_fraction, std::uint64_t seed);

/// FNV-1a over ids, sample bit patterns and captions.
std::uint64_t corpus_hash(const std::vector<DatasetRecord>& records);

}  // namespace caac::data
