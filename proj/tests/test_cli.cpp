#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "caac/checkpoint.hpp"
#include "caac/commands.hpp"
#include "caac/config.hpp"
#include "support.hpp"

using namespace caac;
using namespace caac::cli;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Shell {
  int code;
  std::string output;
};

// Runs the caac executable; stderr is folded into the captured output.
Shell run_binary(const std::string& args) {
  const std::string cmd = std::string(CAAC_BINARY) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  std::string out;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "caac_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ostringstream out, err;
    ASSERT_EQ(gen_data({3, 12, 2, dir_ / "corpus.jsonl"}, out, err), kOk) << err.str();
    RunConfig cfg = caac::testing::small_run_config();
    cfg.holdout_fraction = 0.25;
    cfg.max_caption_len = 10;
    std::ofstream(dir_ / "run.toml") << format_config(cfg);
    ASSERT_EQ(train({dir_ / "run.toml", dir_ / "corpus.jsonl", dir_ / "run1", false, {}}, out, err), kOk) << err.str();
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static fs::path dir_;
};

fs::path Cli::dir_;

}  // namespace

TEST_F(Cli, GenDataWritesCorpus) {
  const auto records = data::load_jsonl(dir_ / "corpus.jsonl");
  EXPECT_EQ(records.size(), 12u);
  EXPECT_EQ(records.front().captions.size(), 2u);
}

TEST_F(Cli, TrainWritesArtifacts) {
  const fs::path run = dir_ / "run1";
  for (const char* f : {"checkpoint_last.ckpt", "checkpoint_best.ckpt", "runlog.csv", "metrics.csv", "manifest.json"})
    EXPECT_TRUE(fs::exists(run / f)) << f;
  EXPECT_TRUE(slurp(run / "runlog.csv").starts_with("epoch,step,l_cl,l_ce,l_total,lr_enc,lr_dec,diag_dom"));
  EXPECT_TRUE(slurp(run / "metrics.csv").starts_with("bleu1,bleu2,bleu3,bleu4,rouge_l,meteor_lite,cider"));
  const auto manifest = nlohmann::json::parse(slurp(run / "manifest.json"));
  for (const char* key : {"tool_version", "config", "corpus_hash", "checkpoints", "metrics_csv", "runlog"})
    EXPECT_TRUE(manifest.contains(key)) << key;
  EXPECT_EQ(manifest["test_clips"], 3);
  EXPECT_EQ(read_checkpoint(run / "checkpoint_last.ckpt").epochs_completed, 2u);
}

TEST_F(Cli, TrainIsDeterministic) {
  std::ostringstream out, err;
  ASSERT_EQ(train({dir_ / "run.toml", dir_ / "corpus.jsonl", dir_ / "run2", false, {}}, out, err), kOk);
  EXPECT_EQ(slurp(dir_ / "run1" / "metrics.csv"), slurp(dir_ / "run2" / "metrics.csv"));
  EXPECT_EQ(slurp(dir_ / "run1" / "runlog.csv"), slurp(dir_ / "run2" / "runlog.csv"));
  EXPECT_EQ(slurp(dir_ / "run1" / "checkpoint_last.ckpt"), slurp(dir_ / "run2" / "checkpoint_last.ckpt"));
}

TEST_F(Cli, FrozenEncoderFlag) {
  std::ostringstream out, err;
  ASSERT_EQ(train({dir_ / "run.toml", dir_ / "corpus.jsonl", dir_ / "frozen", true, {"lr_encoder=1e-3"}}, out, err),
            kOk);
  const auto loaded = load_model(dir_ / "frozen" / "checkpoint_last.ckpt");
  EXPECT_TRUE(loaded.config.frozen_encoder);
  const CaptionModel fresh(loaded.config.model_config(loaded.vocab.size()), loaded.config.seed);
  EXPECT_EQ(loaded.model->encoder_parameters().checksum(), fresh.encoder_parameters().checksum());
  EXPECT_NE(loaded.model->decoder_parameters().checksum(), fresh.decoder_parameters().checksum());
}

TEST_F(Cli, MissingConfigKey) {
  std::string text = slurp(dir_ / "run.toml");
  const auto pos = text.find("alpha = ");
  text.erase(pos, text.find('\n', pos) - pos + 1);
  std::ofstream(dir_ / "missing.toml") << text;
  std::ostringstream out, err;
  EXPECT_EQ(train({dir_ / "missing.toml", dir_ / "corpus.jsonl", dir_ / "bad", false, {}}, out, err), kUsage);
  EXPECT_NE(err.str().find("missing config key 'alpha' (default: alpha = 0.2)"), std::string::npos) << err.str();
}

TEST_F(Cli, DataErrors) {
  std::ostringstream out, err;
  EXPECT_EQ(train({dir_ / "run.toml", dir_ / "nope.jsonl", dir_ / "bad", false, {}}, out, err), kDataError);
  std::ofstream(dir_ / "broken.jsonl") << "{\"id\":\"x\"}\n";
  EXPECT_EQ(train({dir_ / "run.toml", dir_ / "broken.jsonl", dir_ / "bad", false, {}}, out, err), kDataError);
  EXPECT_NE(err.str().find(":1:"), std::string::npos);
  EvalOptions ev;
  ev.checkpoint = dir_ / "corpus.jsonl";
  ev.dataset = dir_ / "corpus.jsonl";
  EXPECT_EQ(eval(ev, out, err), kDataError);
}

TEST_F(Cli, EvalScoresTheHeldOutSplit) {
  std::ostringstream out, err;
  EvalOptions ev;
  ev.checkpoint = dir_ / "run1" / "checkpoint_last.ckpt";
  ev.dataset = dir_ / "corpus.jsonl";
  ASSERT_EQ(eval(ev, out, err), kOk) << err.str();
  EXPECT_EQ(out.str(), slurp(dir_ / "run1" / "metrics.csv"));
}

TEST_F(Cli, EvalRejectsEmptySplit) {
  std::ostringstream out, err;
  ASSERT_EQ(train({dir_ / "run.toml", dir_ / "corpus.jsonl", dir_ / "all", false, {"holdout_fraction=0", "epochs=1",
                                                                                      "warmup_epochs=1"}},
                  out, err),
            kOk)
      << err.str();
  EvalOptions ev;
  ev.checkpoint = dir_ / "all" / "checkpoint_last.ckpt";
  ev.dataset = dir_ / "corpus.jsonl";
  std::ostringstream eout, eerr;
  EXPECT_EQ(eval(ev, eout, eerr), kDataError);
  EXPECT_TRUE(eout.str().empty());
  ev.split = SplitChoice::train;
  EXPECT_EQ(eval(ev, eout, eerr), kOk);
}

TEST_F(Cli, EvalPairs) {
  std::ofstream(dir_ / "pairs.jsonl") << "{\"candidate\":\"A dog barks.\",\"references\":[\"a dog barks\"]}\n"
                                         "{\"candidate\":\"a cat\",\"references\":[\"a cat\",\"the cat\"]}\n";
  std::ostringstream out, err;
  EvalOptions ev;
  ev.pairs = dir_ / "pairs.jsonl";
  ASSERT_EQ(eval(ev, out, err), kOk) << err.str();
  EXPECT_NE(out.str().find("\n1,1,"), std::string::npos) << out.str();
}

TEST_F(Cli, InferOneLinePerClip) {
  std::ostringstream out, err, out2;
  InferOptions inf{dir_ / "run1" / "checkpoint_last.ckpt", dir_ / "corpus.jsonl", std::nullopt};
  ASSERT_EQ(infer(inf, out, err), kOk) << err.str();
  ASSERT_EQ(infer(inf, out2, err), kOk);
  const std::string text = out.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 12);
  EXPECT_EQ(out.str(), out2.str());
  InferOptions missing{dir_ / "none.ckpt", dir_ / "corpus.jsonl", std::nullopt};
  EXPECT_EQ(infer(missing, out, err), kDataError);
}

TEST_F(Cli, SimmatCsvAndPgm) {
  std::ostringstream out, err;
  SimmatOptions sm;
  sm.checkpoint = dir_ / "run1" / "checkpoint_last.ckpt";
  sm.dataset = dir_ / "corpus.jsonl";
  sm.clips = {0, 1, 2, 3};
  sm.csv = dir_ / "sim.csv";
  sm.pgm = dir_ / "sim.pgm";
  sm.cell = 2;
  ASSERT_EQ(simmat(sm, out, err), kOk) << err.str();
  std::istringstream csv(slurp(sm.csv));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line.rfind("# temperature=0.07", 0), 0u) << line;
  int rows = 0;
  while (std::getline(csv, line)) {
    std::istringstream cells(line);
    std::string cell;
    double s = 0.0;
    while (std::getline(cells, cell, ',')) s += std::stod(cell);
    EXPECT_NEAR(s, 1.0, 1e-9);
    ++rows;
  }
  EXPECT_EQ(rows, 4);
  const std::string pgm = slurp(sm.pgm);
  EXPECT_EQ(pgm.substr(0, 11), "P5\n8 8\n255\n");
  EXPECT_EQ(pgm.size(), 11u + 64u);
  EXPECT_NE(err.str().find("diagonal_mass"), std::string::npos);
  sm.clips = {0};
  EXPECT_EQ(simmat(sm, out, err), kDataError);
}

TEST(Binary, HelpListsEveryConfigKey) {
  const auto r = run_binary("train --help");
  EXPECT_EQ(r.code, 0);
  for (const auto& k : config_keys()) EXPECT_NE(r.output.find(k.name + " = " + k.default_value), std::string::npos) << k.name;
}

TEST(Binary, UsageErrorsExitOne) {
  EXPECT_EQ(run_binary("").code, kUsage);
  EXPECT_EQ(run_binary("frobnicate").code, kUsage);
  EXPECT_EQ(run_binary("gen-data --seed 1").code, kUsage);
  EXPECT_EQ(run_binary("train --config /nonexistent.toml --data x --out y").code, kUsage);
}

TEST(Binary, DataErrorExitsTwo) {
  EXPECT_EQ(run_binary("infer --checkpoint /nonexistent.ckpt --input /nonexistent.jsonl").code, kDataError);
}

TEST(Binary, DefaultConfigParses) {
  const auto r = run_binary("config --defaults");
  EXPECT_EQ(r.code, 0);
  EXPECT_NO_THROW(parse_config(r.output));
}
