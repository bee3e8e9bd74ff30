// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "nic/analysis.hpp"
#include "nic/checkpoint.hpp"
#include "nic/data.hpp"
#include "nic/decode.hpp"
#include "nic/error.hpp"
#include "nic/io.hpp"
#include "nic/metrics.hpp"
#include "nic/train.hpp"

namespace nic::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 2,
  kFormat = 3,
  kConfigMismatch = 4,
  kRuntime = 5,
};

namespace detail {

struct BuildVocabArgs {
  std::string captions, out;
  int min_count = 1;
};

struct SynthArgs {
  std::size_t n = 32;
  std::uint64_t seed = 0;
  std::string out_dir;
  double noise = 0.05;
  std::size_t scenes = 8;
};

struct TrainArgs {
  std::string arch = "specimen";
  std::size_t lstm_layers = 1;
  std::string features, captions, vocab, out, resume, loss_log;
  std::optional<std::size_t> epochs;
  std::size_t batch = 32;
  double lr = 0.1, momentum = 0.9, weight_decay = 1e-4;
  std::uint64_t seed = 0;
  std::size_t embed_size = 256, hidden_size = 256, attention_size = 256;
  std::size_t checkpoint_every = 1;
};

struct CaptionArgs {
  std::string ckpt, features;
  std::size_t beam = 3, max_len = 30;
  std::optional<std::uint64_t> image_id;
};

struct EvalArgs {
  std::string ckpt, features, captions, report;
  std::size_t beam = 3;
};

struct NnArgs {
  std::string ckpt, features, report;
  std::size_t samples = 1000, k = 3, beam = 3;
  std::uint64_t seed = 0;
};

inline void run_build_vocab(const BuildVocabArgs& a, std::ostream& err) {
  const auto records = read_captions(a.captions);
  std::vector<std::string> corpus;
  for (const auto& r : records) corpus.insert(corpus.end(), r.captions.begin(), r.captions.end());
  const Vocabulary v = build_vocab(corpus, a.min_count);
  write_vocab(a.out, v);
  err << "vocabulary of " << v.size() << " tokens written to " << a.out << "\n";
}

inline void run_synth(const SynthArgs& a, std::ostream& err) {
  SynthSpec spec;
  spec.noise = a.noise;
  spec.scenes = a.scenes;
  const SynthData d = synth_dataset(a.n, spec, a.seed);
  const std::filesystem::path dir(a.out_dir);
  std::filesystem::create_directories(dir);
  write_features(dir / "features.nicf", d.features);
  write_captions(dir / "captions.jsonl", d.captions);
  write_vocab(dir / "vocab.json", d.vocab);
  err << "wrote " << a.n << " images to " << dir.string() << "\n";
}

inline void run_train(const TrainArgs& a, std::ostream& err) {
  const Arch arch = parse_arch(a.arch);
  Dataset data = make_dataset(read_features(a.features), read_captions(a.captions), read_vocab(a.vocab));
  const std::filesystem::path out(a.out);
  TrainOptions options;
  options.checkpoint_path = out;
  options.loss_log = a.loss_log.empty() ? std::filesystem::path(a.out + ".loss.csv") : std::filesystem::path(a.loss_log);
  options.checkpoint_every = a.checkpoint_every;
  options.log = &err;

  ModelCheckpoint start;
  if (!a.resume.empty()) {
    start = load_checkpoint(a.resume);
    if (a.epochs) start.optimizer.epochs = *a.epochs;
  } else {
    ModelConfig base;
    base.arch = arch;
    base.lstm_layers = a.lstm_layers;
    base.embed_size = a.embed_size;
    base.hidden_size = a.hidden_size;
    base.attention_size = a.attention_size;
    OptimizerConfig opt;
    opt.lr = a.lr;
    opt.momentum = a.momentum;
    opt.weight_decay = a.weight_decay;
    opt.batch_size = a.batch;
    opt.epochs = a.epochs.value_or(arch == Arch::kSpecimen ? 10 : 25);
    opt.seed = a.seed;
    start = initial_checkpoint(data, config_for(data, base), opt);
  }
  const TrainResult r = train(data, std::move(start), options);
  err << "trained " << r.checkpoint.epoch << " epochs; checkpoint " << out.string() << "\n";
}

inline void run_caption(const CaptionArgs& a, std::ostream& out) {
  const ModelCheckpoint ck = load_checkpoint(a.ckpt);
  const FeatureSet fs = read_features(a.features);
  const CaptionModel<float> model = model_from_checkpoint(ck);
  bool found = false;
  for (const auto& rec : fs.records) {
    if (a.image_id && rec.image_id != *a.image_id) continue;
    found = true;
    const auto best = beam_decode(model, rec, a.beam, a.max_len).front();
    out << nlohmann::json{{"image_id", rec.image_id},
                          {"caption", ck.vocab.decode(best.tokens)},
                          {"logprob", best.logprob_sum}}
                .dump()
        << "\n";
  }
  if (a.image_id && !found) throw UsageError("image " + std::to_string(*a.image_id) + " not in feature file");
}

inline void run_eval(const EvalArgs& a, std::ostream& out) {
  const ModelCheckpoint ck = load_checkpoint(a.ckpt);
  const EvalReport rep = evaluate_run(ck, read_features(a.features), read_captions(a.captions), a.beam, a.features);
  const std::string text = rep.to_json().dump() + "\n";
  if (a.report.empty()) {
    out << text;
  } else {
    io::write_text(a.report, text);
  }
}

inline void run_nn(const NnArgs& a, std::ostream& out, std::ostream& err) {
  const ModelCheckpoint ck = load_checkpoint(a.ckpt);
  NeighborStudyOptions opt;
  opt.sample_size = a.samples;
  opt.k = a.k;
  opt.seed = a.seed;
  opt.beam_size = a.beam;
  opt.log = &err;
  const NeighborStudy study = nn_study(ck, read_features(a.features), opt);
  std::string lines;
  for (const auto& r : study.anchors) lines += r.to_json().dump() + "\n";
  const std::string summary = study.summary_json().dump() + "\n";
  if (a.report.empty()) {
    out << lines;
  } else {
    io::write_text(a.report, lines);
    io::write_text(a.report + ".summary.json", summary);
  }
  out << summary;
}

}  // namespace detail

/// Entry point of the `nic` tool. Human-readable output goes to `err`,
/// machine-readable results to `out` or to files.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace detail;
  CLI::App app{"Neural image captioning toolkit", "nic"};
  app.require_subcommand(1);

  BuildVocabArgs bv;
  auto* c_bv = app.add_subcommand("build-vocab", "Build a vocabulary from a caption file");
  c_bv->add_option("--captions", bv.captions, "Caption file (JSON lines)")->required()->check(CLI::ExistingFile);
  c_bv->add_option("--min-count", bv.min_count, "Minimum token frequency")->capture_default_str()->check(CLI::PositiveNumber);
  c_bv->add_option("--out", bv.out, "Output vocabulary file")->required();

  SynthArgs sy;
  auto* c_sy = app.add_subcommand("synth", "Generate a synthetic feature/caption set");
  c_sy->add_option("--n", sy.n, "Number of images")->capture_default_str()->check(CLI::PositiveNumber);
  c_sy->add_option("--seed", sy.seed, "Random seed")->capture_default_str();
  c_sy->add_option("--out-dir", sy.out_dir, "Output directory")->required();
  c_sy->add_option("--noise", sy.noise, "Feature noise standard deviation")->capture_default_str()->check(CLI::NonNegativeNumber);
  c_sy->add_option("--scenes", sy.scenes, "Number of distinct scenes")->capture_default_str()->check(CLI::PositiveNumber);

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "Train a captioning model");
  c_tr->add_option("--arch", tr.arch, "Architecture")->capture_default_str()->check(CLI::IsMember({"specimen", "topdown-lstmgru"}));
  c_tr->add_option("--lstm-layers", tr.lstm_layers, "LSTM layers (specimen)")->capture_default_str()->check(CLI::IsMember({1, 2}));
  c_tr->add_option("--features", tr.features, "Feature file")->required()->check(CLI::ExistingFile);
  c_tr->add_option("--captions", tr.captions, "Caption file")->required()->check(CLI::ExistingFile);
  c_tr->add_option("--vocab", tr.vocab, "Vocabulary file")->required()->check(CLI::ExistingFile);
  c_tr->add_option("--epochs", tr.epochs, "Epochs (default 10 specimen, 25 topdown-lstmgru)")->check(CLI::PositiveNumber);
  c_tr->add_option("--batch", tr.batch, "Batch size")->capture_default_str()->check(CLI::PositiveNumber);
  c_tr->add_option("--lr", tr.lr, "Learning rate")->capture_default_str()->check(CLI::NonNegativeNumber);
  c_tr->add_option("--momentum", tr.momentum, "Momentum")->capture_default_str()->check(CLI::Range(0.0, 0.999999));
  c_tr->add_option("--weight-decay", tr.weight_decay, "Weight decay")->capture_default_str()->check(CLI::NonNegativeNumber);
  c_tr->add_option("--seed", tr.seed, "Random seed")->capture_default_str();
  c_tr->add_option("--out", tr.out, "Checkpoint path")->required();
  c_tr->add_option("--embed-size", tr.embed_size, "Word embedding size")->capture_default_str()->check(CLI::PositiveNumber);
  c_tr->add_option("--hidden-size", tr.hidden_size, "Recurrent hidden size")->capture_default_str()->check(CLI::PositiveNumber);
  c_tr->add_option("--attention-size", tr.attention_size, "Attention hidden size")->capture_default_str()->check(CLI::PositiveNumber);
  c_tr->add_option("--checkpoint-every", tr.checkpoint_every, "Epochs between checkpoint writes")->capture_default_str()->check(CLI::PositiveNumber);
  c_tr->add_option("--loss-log", tr.loss_log, "Loss CSV path (default <out>.loss.csv)");
  c_tr->add_option("--resume", tr.resume, "Resume from checkpoint")->check(CLI::ExistingFile);

  CaptionArgs ca;
  auto* c_ca = app.add_subcommand("caption", "Caption images with a trained model");
  c_ca->add_option("--ckpt", ca.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_ca->add_option("--features", ca.features, "Feature file")->required()->check(CLI::ExistingFile);
  c_ca->add_option("--beam", ca.beam, "Beam size")->capture_default_str()->check(CLI::PositiveNumber);
  c_ca->add_option("--max-len", ca.max_len, "Maximum caption length")->capture_default_str()->check(CLI::PositiveNumber);
  c_ca->add_option("--image-id", ca.image_id, "Only this image");

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Score a model with BLEU-1..4 and CIDEr");
  c_ev->add_option("--ckpt", ev.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_ev->add_option("--features", ev.features, "Feature file")->required()->check(CLI::ExistingFile);
  c_ev->add_option("--captions", ev.captions, "Reference caption file")->required()->check(CLI::ExistingFile);
  c_ev->add_option("--beam", ev.beam, "Beam size")->capture_default_str()->check(CLI::PositiveNumber);
  c_ev->add_option("--report", ev.report, "Report path (default: standard output)");

  NnArgs nn;
  auto* c_nn = app.add_subcommand("nn", "Nearest-neighbor study of image vs caption embeddings");
  c_nn->add_option("--ckpt", nn.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_nn->add_option("--features", nn.features, "Feature file")->required()->check(CLI::ExistingFile);
  c_nn->add_option("--samples", nn.samples, "Images to sample")->capture_default_str()->check(CLI::PositiveNumber);
  c_nn->add_option("--k", nn.k, "Neighbors per anchor")->capture_default_str()->check(CLI::PositiveNumber);
  c_nn->add_option("--seed", nn.seed, "Sampling seed")->capture_default_str();
  c_nn->add_option("--beam", nn.beam, "Beam size for caption generation")->capture_default_str()->check(CLI::PositiveNumber);
  c_nn->add_option("--report", nn.report, "Per-anchor JSON lines path; summary goes to <report>.summary.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << app.help();
    return kUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  err << "# resolved config: " << sub->get_name() << "\n" << sub->config_to_str(true, false);

  try {
    if (sub == c_bv) run_build_vocab(bv, err);
    else if (sub == c_sy) run_synth(sy, err);
    else if (sub == c_tr) run_train(tr, err);
    else if (sub == c_ca) run_caption(ca, out);
    else if (sub == c_ev) run_eval(ev, out);
    else if (sub == c_nn) run_nn(nn, out, err);
    return kOk;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kFormat;
  } catch (const ConfigError& e) {
    err << "config mismatch: " << e.what() << "\n";
    return kConfigMismatch;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

}  // namespace nic::cli
