#include "caac/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "caac/checkpoint.hpp"
#include "caac/config.hpp"
#include "caac/contrastive.hpp"
#include "caac/data.hpp"
#include "caac/metrics.hpp"
#include "caac/trainer.hpp"

namespace caac::cli {

namespace {

namespace fs = std::filesystem;

std::vector<signal::Spectrogram> spectrograms(const std::vector<data::DatasetRecord>& records,
                                              const signal::StftConfig& stft) {
  std::vector<signal::Spectrogram> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    try {
      out.push_back(signal::log_power_spectrogram({r.samples, r.sample_rate}, stft));
    } catch (const std::invalid_argument& e) {
      throw data::DataError("clip " + r.id + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::size_t> pick(const data::Split& split, SplitChoice choice, std::size_t n) {
  switch (choice) {
    case SplitChoice::train: return split.train;
    case SplitChoice::test: return split.test;
    case SplitChoice::all: break;
  }
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  return all;
}

metrics::EvalCorpus caption_corpus(const CaptionModel& model, const data::Vocabulary& vocab,
                                   const std::vector<data::DatasetRecord>& records,
                                   const std::vector<signal::Spectrogram>& specs, const std::vector<std::size_t>& idx,
                                   const BeamConfig& beam) {
  metrics::EvalCorpus corpus;
  for (std::size_t i : idx) {
    metrics::EvalItem item;
    item.candidate = data::normalize(vocab.decode(model.caption(specs[i], beam).tokens));
    for (const auto& c : records[i].captions) item.references.push_back(data::normalize(c));
    corpus.push_back(std::move(item));
  }
  return corpus;
}

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw data::DataError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw data::DataError("write failed for " + path.string());
}

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric abort: " << e.what() << '\n';
    return kNumericAbort;
  } catch (const data::DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
}

}  // namespace

std::string config_reference() {
  std::string out;
  for (const auto& k : config_keys()) out += "  " + k.name + " = " + k.default_value + "    # " + k.description + "\n";
  return out;
}

int gen_data(const GenDataOptions& opt, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (opt.out.empty()) throw ConfigError("gen-data: --out is required");
    const auto records = data::generate(opt.seed, opt.clips, opt.captions_per_clip);
    data::save_jsonl(opt.out, records);
    std::size_t captions = 0;
    for (const auto& r : records) captions += r.captions.size();
    out << "wrote " << records.size() << " clips, " << captions << " captions to " << opt.out.string() << '\n';
    return static_cast<int>(kOk);
  });
}

int train(const TrainOptions& opt, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = load_config(opt.config.string());
    for (const auto& o : opt.overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
      set_config_value(cfg, o.substr(0, eq), o.substr(eq + 1));
    }
    if (opt.frozen_encoder) cfg.frozen_encoder = true;
    cfg.validate();
    if (opt.out_dir.empty()) throw ConfigError("train: --out is required");
    fs::create_directories(opt.out_dir);

    const auto records = data::load_jsonl(opt.dataset);
    if (records.size() < 2) throw data::DataError("dataset needs at least two clips");
    const auto split = data::split_clips(records.size(), cfg.holdout_fraction, cfg.seed);
    std::vector<data::DatasetRecord> train_records;
    for (std::size_t i : split.train) train_records.push_back(records[i]);
    const auto vocab = data::Vocabulary::build(train_records);
    const ModelConfig mc = cfg.model_config(vocab.size());
    const auto specs = spectrograms(records, mc.stft);

    std::vector<TrainExample> examples;
    for (std::size_t i : split.train) {
      TrainExample ex{&specs[i], {}};
      for (const auto& c : records[i].captions) {
        auto ids = vocab.encode(c);
        if (ids.size() - 1 > cfg.decoder_max_len)
          throw data::DataError("clip " + records[i].id + ": caption of " + std::to_string(ids.size() - 2) +
                                " words exceeds decoder_max_len");
        ex.captions.push_back(std::move(ids));
      }
      examples.push_back(std::move(ex));
    }

    CaptionModel model(mc, cfg.seed);
    Trainer trainer(model, cfg.train_config());
    trainer.set_message_callback([&err](const std::string& m) { err << m << '\n'; });

    const fs::path last = opt.out_dir / "checkpoint_last.ckpt";
    const fs::path best = opt.out_dir / "checkpoint_best.ckpt";
    const fs::path runlog = opt.out_dir / "runlog.csv";
    double best_loss = std::numeric_limits<double>::infinity();
    std::size_t seen = 0;
    auto write_log = [&] {
      std::ostringstream csv;
      trainer.log().write_csv(csv);
      write_text(runlog, csv.str());
    };
    try {
      trainer.fit(examples, [&](std::size_t epoch, const Trainer& t) {
        const auto& recs = t.log().records();
        double sum = 0.0;
        for (std::size_t i = seen; i < recs.size(); ++i) sum += recs[i].l_total;
        const double mean = sum / static_cast<double>(recs.size() - seen);
        seen = recs.size();
        save_checkpoint(last, cfg, vocab, model, &t, epoch + 1);
        if (mean < best_loss) {
          best_loss = mean;
          save_checkpoint(best, cfg, vocab, model, &t, epoch + 1);
        }
        out << "epoch " << epoch + 1 << "/" << cfg.epochs << " mean_total " << mean << '\n';
      });
    } catch (const NumericError&) {
      write_log();
      throw;
    }
    write_log();

    const auto& eval_idx = split.test.empty() ? split.train : split.test;
    const auto corpus = caption_corpus(model, vocab, records, specs, eval_idx, cfg.beam_config());
    const fs::path metrics_csv = opt.out_dir / "metrics.csv";
    write_text(metrics_csv, metrics::MetricReport::csv_header() + "\n" + metrics::evaluate(corpus).csv_row() + "\n");

    nlohmann::json manifest;
    manifest["tool_version"] = kToolVersion;
    manifest["config"] = format_config(cfg);
    manifest["dataset"] = opt.dataset.string();
    manifest["corpus_hash"] = hex64(data::corpus_hash(records));
    manifest["train_clips"] = split.train.size();
    manifest["test_clips"] = split.test.size();
    manifest["metrics_split"] = split.test.empty() ? "train" : "test";
    manifest["checkpoints"] = {{"last", last.string()}, {"best", best.string()}};
    manifest["runlog"] = runlog.string();
    manifest["metrics_csv"] = metrics_csv.string();
    manifest["clip_events"] = trainer.clip_events();
    write_text(opt.out_dir / "manifest.json", manifest.dump(2) + "\n");
    out << "wrote " << last.string() << ", " << metrics_csv.string() << '\n';
    return static_cast<int>(kOk);
  });
}

int eval(const EvalOptions& opt, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    metrics::EvalCorpus corpus;
    if (!opt.pairs.empty()) {
      std::ifstream in(opt.pairs);
      if (!in) throw data::DataError("cannot open " + opt.pairs.string());
      std::string line;
      std::size_t lineno = 0;
      while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
          const auto j = nlohmann::json::parse(line);
          metrics::EvalItem item;
          item.candidate = data::normalize(j.at("candidate").get<std::string>());
          for (const auto& r : j.at("references")) item.references.push_back(data::normalize(r.get<std::string>()));
          if (item.references.empty()) throw data::DataError("no references");
          corpus.push_back(std::move(item));
        } catch (const std::exception& e) {
          throw data::DataError(opt.pairs.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
      }
    } else {
      if (opt.checkpoint.empty() || opt.dataset.empty())
        throw ConfigError("eval: --checkpoint and --data are required unless --pairs is given");
      const auto loaded = load_model(opt.checkpoint);
      const auto records = data::load_jsonl(opt.dataset);
      const auto split = data::split_clips(records.size(), loaded.config.holdout_fraction, loaded.config.seed);
      const auto idx = pick(split, opt.split, records.size());
      if (idx.empty()) throw data::DataError("eval: the selected split has no clips");
      const auto specs = spectrograms(records, loaded.model->config().stft);
      BeamConfig beam = loaded.config.beam_config();
      if (opt.beam_size) beam.beam_size = *opt.beam_size;
      corpus = caption_corpus(*loaded.model, loaded.vocab, records, specs, idx, beam);
    }
    if (corpus.empty()) throw data::DataError("eval: no items to score");
    const auto report = metrics::evaluate(corpus);
    const std::string csv = metrics::MetricReport::csv_header() + "\n" + report.csv_row() + "\n";
    if (opt.out.empty()) out << csv;
    else write_text(opt.out, csv);
    return static_cast<int>(kOk);
  });
}

int infer(const InferOptions& opt, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (opt.checkpoint.empty()) throw ConfigError("infer: --checkpoint is required");
    const auto loaded = load_model(opt.checkpoint);
    const auto records = data::load_jsonl(opt.input);
    BeamConfig beam = loaded.config.beam_config();
    if (opt.beam_size) beam.beam_size = *opt.beam_size;
    for (const auto& r : records) {
      const signal::Waveform w{r.samples, r.sample_rate};
      std::string caption;
      try {
        caption = caac::infer(*loaded.model, loaded.vocab, w, beam);
      } catch (const std::invalid_argument& e) {
        throw data::DataError("clip " + r.id + ": " + e.what());
      }
      out << caption << '\n';
    }
    return static_cast<int>(kOk);
  });
}

int simmat(const SimmatOptions& opt, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (opt.checkpoint.empty() || opt.dataset.empty())
      throw ConfigError("simmat: --checkpoint and --data are required");
    if (opt.cell == 0) throw ConfigError("simmat: --cell must be positive");
    const auto loaded = load_model(opt.checkpoint);
    const auto records = data::load_jsonl(opt.dataset);
    std::vector<std::size_t> idx = opt.clips;
    if (idx.empty()) {
      const auto split = data::split_clips(records.size(), loaded.config.holdout_fraction, loaded.config.seed);
      idx.assign(split.train.begin(), split.train.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(8, split.train.size())));
    }
    if (idx.size() < 2) throw data::DataError("simmat: at least two clips are required");
    for (std::size_t i : idx)
      if (i >= records.size()) throw data::DataError("simmat: clip index " + std::to_string(i) + " out of range");

    std::vector<data::DatasetRecord> chosen;
    for (std::size_t i : idx) chosen.push_back(records[i]);
    const auto specs = spectrograms(chosen, loaded.model->config().stft);
    std::vector<const signal::Spectrogram*> ptrs;
    std::vector<std::vector<int>> captions;
    for (std::size_t k = 0; k < chosen.size(); ++k) {
      ptrs.push_back(&specs[k]);
      captions.push_back(loaded.vocab.encode(chosen[k].captions.front()));
    }
    const Tensor sim = eval_similarity(*loaded.model, ptrs, captions);
    const double t = loaded.config.learnable_temperature ? std::exp(loaded.model->log_temperature.item())
                                                         : loaded.config.temperature;
    const auto p = row_softmax(sim, t);
    const std::size_t b = idx.size();

    std::ostringstream csv;
    char buf[64];
    std::snprintf(buf, sizeof buf, "# temperature=%.17g\n", t);
    csv << buf;
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t k = 0; k < b; ++k) {
        std::snprintf(buf, sizeof buf, "%s%.17g", k ? "," : "", p[i * b + k]);
        csv << buf;
      }
      csv << '\n';
    }
    if (opt.csv.empty()) out << csv.str();
    else write_text(opt.csv, csv.str());

    if (!opt.pgm.empty()) {
      const std::size_t side = b * opt.cell;
      std::ofstream pgm(opt.pgm, std::ios::binary);
      if (!pgm) throw data::DataError("cannot open " + opt.pgm.string() + " for writing");
      pgm << "P5\n" << side << ' ' << side << "\n255\n";
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
          const double v = p[(y / opt.cell) * b + x / opt.cell];
          pgm.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
        }
      if (!pgm) throw data::DataError("write failed for " + opt.pgm.string());
    }
    std::snprintf(buf, sizeof buf, "diagonal_mass %.6f\n", diagonal_dominance(sim, t));
    err << buf;
    return static_cast<int>(kOk);
  });
}

}  // namespace caac::cli
