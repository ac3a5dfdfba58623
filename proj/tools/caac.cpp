#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "caac/commands.hpp"
#include "caac/config.hpp"

int main(int argc, char** argv) {
  using namespace caac::cli;
  CLI::App app{"Contrastive audio captioning: data generation, training, evaluation and inference"};
  app.require_subcommand(1);
  app.footer("Config keys (all required in a config file):\n" + config_reference());
  app.set_version_flag("--version", kToolVersion);

  GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic audio/caption corpus as JSONL");
  gen_cmd->add_option("--seed", gen.seed, "Corpus seed")->required();
  gen_cmd->add_option("--clips", gen.clips, "Number of clips")->required()->check(CLI::Range(2, 1000000));
  gen_cmd->add_option("--captions", gen.captions_per_clip, "Captions per clip")->check(CLI::Range(1, 5));
  gen_cmd->add_option("--out", gen.out, "Output JSONL path")->required();

  TrainOptions tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file and a JSONL corpus");
  train_cmd->add_option("--config", tr.config, "Config file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--data", tr.dataset, "Dataset JSONL")->required();
  train_cmd->add_option("--out", tr.out_dir, "Output directory")->required();
  train_cmd->add_flag("--frozen-encoder", tr.frozen_encoder, "Exclude the encoder from optimizer updates");
  train_cmd->add_option("--set", tr.overrides, "Override a config key (key=value), repeatable");
  train_cmd->footer("Config keys and defaults:\n" + config_reference());

  bool dump_defaults = false;
  auto* config_cmd = app.add_subcommand("config", "Print the default config file");
  config_cmd->add_flag("--defaults", dump_defaults, "Print every key with its default");

  EvalOptions ev;
  std::string split = "test";
  std::size_t eval_beam = 0;
  auto* eval_cmd = app.add_subcommand("eval", "Score beam-search captions against reference captions");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file");
  eval_cmd->add_option("--data", ev.dataset, "Dataset JSONL");
  eval_cmd->add_option("--split", split, "Clips to caption")->check(CLI::IsMember({"train", "test", "all"}));
  eval_cmd->add_option("--pairs", ev.pairs, "JSONL of {\"candidate\", \"references\"} to score directly");
  eval_cmd->add_option("--beam-size", eval_beam, "Beam width (default from config)");
  eval_cmd->add_option("--out", ev.out, "Metric CSV path (stdout when omitted)");

  InferOptions inf;
  std::size_t infer_beam = 0;
  auto* infer_cmd = app.add_subcommand("infer", "Caption every clip of a JSONL file, one caption per line");
  infer_cmd->add_option("--checkpoint", inf.checkpoint, "Checkpoint file")->required();
  infer_cmd->add_option("--input", inf.input, "JSONL with \"id\", \"samples\" and \"captions\" fields")->required();
  infer_cmd->add_option("--beam-size", infer_beam, "Beam width (default 3 from config)");

  SimmatOptions sm;
  auto* simmat_cmd = app.add_subcommand("simmat", "Emit the row-softmaxed similarity matrix as CSV and PGM");
  simmat_cmd->add_option("--checkpoint", sm.checkpoint, "Checkpoint file")->required();
  simmat_cmd->add_option("--data", sm.dataset, "Dataset JSONL")->required();
  simmat_cmd->add_option("--clips", sm.clips, "Dataset indices (default: first 8 training clips)")->delimiter(',');
  simmat_cmd->add_option("--csv", sm.csv, "CSV path (stdout when omitted)");
  simmat_cmd->add_option("--pgm", sm.pgm, "PGM image path");
  simmat_cmd->add_option("--cell", sm.cell, "Pixels per matrix cell");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  if (*gen_cmd) return gen_data(gen, std::cout, std::cerr);
  if (*train_cmd) return train(tr, std::cout, std::cerr);
  if (*config_cmd) {
    std::cout << caac::format_config(caac::RunConfig{});
    return kOk;
  }
  if (*eval_cmd) {
    ev.split = split == "train" ? SplitChoice::train : split == "all" ? SplitChoice::all : SplitChoice::test;
    if (eval_beam > 0) ev.beam_size = eval_beam;
    return eval(ev, std::cout, std::cerr);
  }
  if (*infer_cmd) {
    if (infer_beam > 0) inf.beam_size = infer_beam;
    return infer(inf, std::cout, std::cerr);
  }
  if (*simmat_cmd) return simmat(sm, std::cout, std::cerr);
  return kUsage;
}
