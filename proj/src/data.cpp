#include "caac/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "caac/random.hpp"

namespace caac::data {

namespace {

struct KindWords {
  const char* noun1;
  const char* noun1_plural;
  const char* noun2;
  const char* noun2_plural;
};

constexpr std::array<KindWords, 4> kKindWords{{
    {"tone", "tones", "beep", "beeps"},
    {"hiss", "hisses", "burst", "bursts"},
    {"chirp", "chirps", "sweep", "sweeps"},
    {"click", "clicks", "tick", "ticks"},
}};

constexpr std::array<const char*, 3> kPitchWords{"low", "mid", "high"};
constexpr std::array<double, 3> kPitchHz{400.0, 1000.0, 2200.0};
constexpr std::array<const char*, 4> kAdverbs{"once", "twice", "three times", "four times"};
constexpr std::array<const char*, 4> kNumerals{"one", "two", "three", "four"};
constexpr std::array<const char*, 5> kConnectives{"then", "followed by", "and then", "after that", "next"};

const KindWords& words_for(EventKind k) { return kKindWords[static_cast<std::size_t>(k)]; }

std::string event_phrase(const SoundEvent& e, std::size_t j) {
  const auto& w = words_for(e.kind);
  const std::string pitch = kPitchWords[static_cast<std::size_t>(e.pitch)];
  const auto n = static_cast<std::size_t>(e.repetitions - 1);
  const bool plural = e.repetitions > 1;
  switch (j) {
    case 0: return std::string("a ") + pitch + " " + w.noun1 + " sounds " + kAdverbs[n];
    case 1: return std::string(kNumerals[n]) + " " + pitch + " " + (plural ? w.noun2_plural : w.noun2);
    case 2: return std::string("a ") + pitch + " " + w.noun2 + " repeated " + kAdverbs[n];
    case 3: return std::string(kNumerals[n]) + " " + pitch + " " + (plural ? w.noun1_plural : w.noun1) + " in a row";
    default: return std::string("the ") + pitch + " " + w.noun1 + " occurs " + kAdverbs[n];
  }
}

void render_unit(std::vector<double>& out, std::size_t at, std::size_t n, EventKind kind, double hz, int rate,
                 Rng& rng) {
  const double sr = static_cast<double>(rate);
  const double two_pi = 2.0 * std::numbers::pi;
  const std::size_t ramp = std::max<std::size_t>(1, static_cast<std::size_t>(0.005 * sr));
  double smooth = 0.0;
  for (std::size_t i = 0; i < n && at + i < out.size(); ++i) {
    const double t = static_cast<double>(i) / sr;
    double v = 0.0;
    switch (kind) {
      case EventKind::tone: v = std::sin(two_pi * hz * t); break;
      case EventKind::noise_burst:
        smooth = 0.9 * smooth + 0.1 * rng.normal();
        v = 3.0 * smooth * std::cos(two_pi * hz * t);
        break;
      case EventKind::chirp: {
        const double f0 = 0.7 * hz, f1 = 1.4 * hz, dur = static_cast<double>(n) / sr;
        v = std::sin(two_pi * (f0 * t + 0.5 * (f1 - f0) * t * t / dur));
        break;
      }
      case EventKind::click_train: v = std::exp(-t / 0.004) * std::sin(two_pi * hz * t); break;
    }
    const double env = std::min({1.0, static_cast<double>(i + 1) / static_cast<double>(ramp),
                                 static_cast<double>(n - i) / static_cast<double>(ramp)});
    out[at + i] += 0.5 * env * v;
  }
}

DatasetRecord render_clip(std::uint64_t seed, std::size_t index, std::size_t n_captions) {
  Rng rng = Rng::derive(seed, index);
  DatasetRecord rec;
  rec.sample_rate = 8000;
  const double sr = static_cast<double>(rec.sample_rate);
  const std::size_t n_events = 1 + rng.index(3);
  for (std::size_t i = 0; i < n_events; ++i) {
    SoundEvent e;
    e.kind = static_cast<EventKind>(rng.index(4));
    e.pitch = static_cast<Pitch>(rng.index(3));
    e.repetitions = 1 + static_cast<int>(rng.index(4));
    e.duration_ms = 40 + static_cast<int>(rng.index(41));
    rec.events.push_back(e);
  }

  auto ms = [sr](double v) { return static_cast<std::size_t>(v * sr / 1000.0); };
  std::size_t needed = ms(100);
  for (const auto& e : rec.events) needed += static_cast<std::size_t>(e.repetitions) * ms(e.duration_ms + 40) + ms(60);
  const std::size_t length = std::clamp(needed + ms(100) + ms(rng.uniform(0.0, 200.0)), ms(1000), ms(2000));

  rec.samples.assign(length, 0.0);
  for (auto& s : rec.samples) s = 0.005 * rng.normal();
  std::size_t t = ms(100);
  for (const auto& e : rec.events) {
    const double hz = kPitchHz[static_cast<std::size_t>(e.pitch)];
    for (int r = 0; r < e.repetitions; ++r) {
      render_unit(rec.samples, t, ms(e.duration_ms), e.kind, hz, rec.sample_rate, rng);
      t += ms(e.duration_ms + 40);
    }
    t += ms(60);
  }

  char id[32];
  std::snprintf(id, sizeof id, "clip%05zu", index);
  rec.id = id;
  for (std::size_t j = 0; j < n_captions; ++j) rec.captions.push_back(caption_for(rec.events, j));
  return rec;
}

std::optional<SoundEvent> parse_segment(const std::vector<std::string>& words) {
  static const std::map<std::string, int> counts{{"once", 1},  {"twice", 2}, {"one", 1},
                                                 {"two", 2},   {"three", 3}, {"four", 4}};
  static const std::vector<std::string> filler{"a", "the", "sounds", "repeated", "in", "row", "occurs", "times"};
  std::optional<Pitch> pitch;
  std::optional<EventKind> kind;
  std::optional<int> reps;
  for (const auto& w : words) {
    bool known = false;
    for (std::size_t p = 0; p < kPitchWords.size(); ++p)
      if (w == kPitchWords[p]) {
        if (pitch) return std::nullopt;
        pitch = static_cast<Pitch>(p);
        known = true;
      }
    for (std::size_t k = 0; k < kKindWords.size(); ++k) {
      const auto& kw = kKindWords[k];
      if (w == kw.noun1 || w == kw.noun1_plural || w == kw.noun2 || w == kw.noun2_plural) {
        if (kind) return std::nullopt;
        kind = static_cast<EventKind>(k);
        known = true;
      }
    }
    if (const auto it = counts.find(w); it != counts.end()) {
      if (reps) return std::nullopt;
      reps = it->second;
      known = true;
    }
    if (!known && std::find(filler.begin(), filler.end(), w) == filler.end()) return std::nullopt;
  }
  if (!pitch || !kind || !reps) return std::nullopt;
  SoundEvent e;
  e.kind = *kind;
  e.pitch = *pitch;
  e.repetitions = *reps;
  return e;
}

}  // namespace

std::string caption_for(const std::vector<SoundEvent>& events, std::size_t template_index) {
  const std::size_t j = template_index % kMaxCaptionsPerClip;
  std::string out;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (i > 0) out += std::string(" ") + kConnectives[j] + " ";
    out += event_phrase(events[i], j);
  }
  return out;
}

std::optional<std::vector<SoundEvent>> parse_caption_events(const std::string& caption) {
  const auto words = normalize(caption);
  std::vector<std::vector<std::string>> segments(1);
  for (std::size_t i = 0; i < words.size();) {
    std::size_t skip = 0;
    for (const char* c : kConnectives) {
      const auto parts = normalize(c);
      if (i + parts.size() <= words.size() && std::equal(parts.begin(), parts.end(), words.begin() + i))
        skip = std::max(skip, parts.size());
    }
    if (skip > 0) {
      segments.emplace_back();
      i += skip;
    } else {
      segments.back().push_back(words[i++]);
    }
  }
  std::vector<SoundEvent> events;
  for (const auto& seg : segments) {
    auto e = parse_segment(seg);
    if (!e) return std::nullopt;
    events.push_back(*e);
  }
  return events;
}

std::vector<DatasetRecord> generate(std::uint64_t seed, std::size_t n_clips, std::size_t n_captions_per_clip) {
  if (n_clips < 2) throw std::invalid_argument("generate: at least two clips are required");
  if (n_captions_per_clip < 1 || n_captions_per_clip > kMaxCaptionsPerClip)
    throw std::invalid_argument("generate: captions per clip must lie in [1, 5]");
  std::vector<DatasetRecord> out;
  out.reserve(n_clips);
  for (std::size_t i = 0; i < n_clips; ++i) out.push_back(render_clip(seed, i, n_captions_per_clip));
  return out;
}

std::vector<std::string> normalize(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isalnum(ch)) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

namespace {
const std::array<std::string, 4> kReserved{"<pad>", "<s>", "</s>", "<unk>"};
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  Vocabulary v;
  v.words_.assign(kReserved.begin(), kReserved.end());
  v.words_.insert(v.words_.end(), words.begin(), words.end());
  for (std::size_t i = 0; i < v.words_.size(); ++i) {
    if (!v.index_.emplace(v.words_[i], static_cast<int>(i)).second)
      throw DataError("vocabulary: duplicate word '" + v.words_[i] + "'");
  }
  return v;
}

Vocabulary Vocabulary::build(const std::vector<DatasetRecord>& records) {
  if (records.empty()) throw DataError("vocabulary: no records");
  std::map<std::string, std::size_t> freq;
  for (const auto& r : records)
    for (const auto& c : r.captions)
      for (auto& w : normalize(c)) ++freq[w];
  std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  for (auto& [w, n] : items) words.push_back(w);
  return from_words(words);
}

int Vocabulary::id(const std::string& word) const {
  const auto it = index_.find(word);
  return it == index_.end() ? special::unk : it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size())
    throw std::out_of_range("vocabulary: id " + std::to_string(id) + " out of range");
  return words_[static_cast<std::size_t>(id)];
}

std::vector<std::string> Vocabulary::words() const { return {words_.begin() + kReserved.size(), words_.end()}; }

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> ids{special::start};
  for (const auto& w : normalize(text)) ids.push_back(id(w));
  ids.push_back(special::end);
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> words;
  for (int t : ids)
    if (t >= static_cast<int>(kReserved.size())) words.push_back(word(t));
  return join_words(words);
}

void save_jsonl(const std::filesystem::path& path, const std::vector<DatasetRecord>& records) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  for (const auto& r : records) {
    nlohmann::json j;
    j["id"] = r.id;
    j["samples"] = r.samples;
    j["captions"] = r.captions;
    out << j.dump() << '\n';
  }
  if (!out) throw DataError("write failed for " + path.string());
}

std::vector<DatasetRecord> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path.string());
  std::vector<DatasetRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& what) {
      return DataError(path.string() + ":" + std::to_string(lineno) + ": " + what);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw fail(std::string("parse error: ") + e.what());
    }
    if (!j.is_object()) throw fail("expected a JSON object");
    for (const char* key : {"id", "samples", "captions"})
      if (!j.contains(key)) throw fail(std::string("missing field \"") + key + "\"");
    DatasetRecord r;
    try {
      r.id = j.at("id").get<std::string>();
      r.samples = j.at("samples").get<std::vector<double>>();
      r.captions = j.at("captions").get<std::vector<std::string>>();
      if (j.contains("sample_rate")) r.sample_rate = j.at("sample_rate").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("bad field type: ") + e.what());
    }
    if (r.captions.empty()) throw fail("empty captions");
    if (r.samples.empty()) throw fail("empty samples");
    if (r.sample_rate <= 0) throw fail("sample_rate must be positive");
    for (double s : r.samples)
      if (!std::isfinite(s)) throw fail("non-finite sample");
    out.push_back(std::move(r));
  }
  return out;
}

Split split_clips(std::size_t n, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw std::invalid_argument("split: fraction must lie in [0, 1)");
  Rng rng = Rng::derive(seed, 0x5911u);
  const auto perm = rng.permutation(n);
  const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
  Split s;
  s.test.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_test), perm.end());
  std::sort(s.test.begin(), s.test.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

std::uint64_t corpus_hash(const std::vector<DatasetRecord>& records) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto byte = [&h](std::uint8_t b) {
    h ^= b;
    h *= 0x100000001b3ull;
  };
  auto text = [&](const std::string& s) {
    for (char c : s) byte(static_cast<std::uint8_t>(c));
    byte(0);
  };
  for (const auto& r : records) {
    text(r.id);
    for (double s : r.samples) {
      const auto bits = std::bit_cast<std::uint64_t>(s);
      for (int i = 0; i < 8; ++i) byte(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
    for (const auto& c : r.captions) text(c);
  }
  return h;
}

}  // namespace caac::data
