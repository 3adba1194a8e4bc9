#include "im2tex/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "im2tex/dataio.hpp"
#include "im2tex/errors.hpp"
#include "im2tex/metrics.hpp"
#include "im2tex/models.hpp"
#include "im2tex/textproc.hpp"
#include "im2tex/train.hpp"
#include "im2tex/verify.hpp"
#include "json.hpp"

namespace im2tex::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string> kArchs{"cnn_lstm", "cnn_gru", "bigimage_lstm", "vit_transformer"};
const std::vector<std::string> kPresets{"paper", "desk"};
const std::vector<std::string> kOptimizers{"adam", "adamw"};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write " + path.string());
  f << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Values from --config fill in every option that was not given as a flag.
void apply_config(CLI::App& sub, const std::string& config_path) {
  if (config_path.empty()) return;
  json cfg;
  try {
    cfg = json::parse(read_text(config_path));
  } catch (const json::exception& e) {
    throw FormatError("config", e.what());
  }
  if (!cfg.is_object()) throw FormatError("config", "top level must be an object");
  for (const auto& [key, value] : cfg.items()) {
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    CLI::Option* opt = nullptr;
    try {
      opt = sub.get_option("--" + flag);
    } catch (const CLI::OptionNotFound&) {
      throw UsageError("config key '" + key + "' is not an option of " + sub.get_name());
    }
    if (flag == "config" || opt->count() > 0) continue;
    opt->add_result(value.is_string() ? value.get<std::string>() : value.dump());
    opt->run_callback();
  }
}

void require(CLI::App& sub, std::initializer_list<const char*> names) {
  for (const char* name : names) {
    if (sub.get_option(name)->count() == 0) throw UsageError(std::string(name) + " is required");
  }
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(precision) << v;
  return ss.str();
}

std::size_t default_batch(models::Arch arch) {
  return arch == models::Arch::vit_transformer ? 64 : 128;
}

// Targets re-encoded with the checkpoint vocabulary, so eval works on data
// whose own vocab.tsv differs.
std::vector<data::ImageSample> reencode(const data::Dataset& ds, const text::Vocab& vocab, std::size_t max_len) {
  std::vector<data::ImageSample> out = ds.samples;
  for (auto& s : out) s.target = text::encode(text::tokenize(ds.formulas.at(s.source_id)), vocab, max_len);
  return out;
}

struct Loaded {
  models::Model model;
  text::Vocab vocab;
};

Loaded load_model(const fs::path& dir) {
  models::Checkpoint ckpt = models::load_checkpoint(dir);
  Loaded l{models::Model{ckpt.config, std::move(ckpt.params)}, text::Vocab::load(dir / "vocab.tsv")};
  if (l.vocab.size() != l.model.config.vocab_size) {
    throw FormatError("vocab", "vocab.tsv has " + std::to_string(l.vocab.size()) + " entries, model expects " +
                                   std::to_string(l.model.config.vocab_size));
  }
  return l;
}

// ---------------------------------------------------------------- commands

struct GenData {
  std::size_t count = 0;
  std::uint64_t seed = 1;
  std::string vocab;
  std::size_t max_tokens = 8;
  std::string out;
  std::string config;
};

int gen_data(const GenData& o, std::ostream& out) {
  data::SyntheticSpec spec{o.count, o.seed, o.max_tokens, {}};
  if (!o.vocab.empty()) {
    for (const auto& e : text::Vocab::load(o.vocab).entries()) {
      if (!e.symbol.empty() && e.symbol.front() != '<') spec.symbols.push_back(e.symbol);
    }
  }
  data::write_synthetic_dataset(o.out, spec);
  const json cfg{{"command", "gen-data"}, {"count", o.count}, {"seed", o.seed}, {"vocab", o.vocab},
                 {"max_tokens", o.max_tokens}};
  write_text(fs::path(o.out) / "run_config.json", cfg.dump(2) + "\n");
  out << "wrote " << o.count << " samples to " << o.out << "\n";
  return kOk;
}

struct BuildVocab {
  std::string formulas;
  std::size_t max_size = text::kDefaultVocabSize;
  std::size_t report_top = 20;
  std::string out;
  std::string config;
};

int build_vocab(const BuildVocab& o, std::ostream& out) {
  const auto formulas = text::read_formula_file(o.formulas);
  const text::Vocab vocab = text::Vocab::build(formulas, o.max_size);
  const fs::path dir(o.out);
  fs::create_directories(dir);
  vocab.save(dir / "vocab.tsv");
  const std::string report = text::frequency_report(vocab, o.report_top);
  write_text(dir / "vocab_report.txt", report);
  const json cfg{{"command", "build-vocab"}, {"formulas", o.formulas}, {"max_size", o.max_size},
                 {"report_top", o.report_top}};
  write_text(dir / "run_config.json", cfg.dump(2) + "\n");
  out << "vocab: " << vocab.size() << " ids (" << vocab.size() - text::kNumSpecials << " symbols + "
      << text::kNumSpecials << " specials)\n"
      << report;
  return kOk;
}

struct TrainArgs {
  std::string arch;
  std::string preset = "desk";
  std::optional<std::size_t> batch_size;
  std::size_t epochs = 100;
  std::string optimizer = "adamw";
  std::uint64_t seed = 1;
  std::string data;
  std::string out;
  double val_fraction = 0.1;
  double lr_start = 1e-4;
  double lr_end = 1e-6;
  double adam_lr = 1e-3;
  double weight_decay = 0.004;
  std::size_t patience = 10;
  std::optional<double> clip_norm;
  std::optional<double> target_accuracy;
  bool skip_unmasked = false;
  bool quiet = false;
  std::string config;
};

train::FitOptions fit_options(const TrainArgs& o, models::Arch arch) {
  train::FitOptions f;
  f.batch_size = o.batch_size.value_or(default_batch(arch));
  f.epochs = o.epochs;
  f.seed = o.seed;
  f.optimizer = train::parse_optimizer(o.optimizer);
  f.lr_start = o.lr_start;
  f.lr_end = o.lr_end;
  f.adam_lr = o.adam_lr;
  f.weight_decay = o.weight_decay;
  f.patience = o.patience;
  f.clip_norm = o.clip_norm;
  f.target_accuracy = o.target_accuracy;
  f.unmasked_val_loss = !o.skip_unmasked;
  return f;
}

int train_cmd(const TrainArgs& o, std::ostream& out) {
  const models::Arch arch = models::parse_arch(o.arch);
  const models::Preset preset = models::parse_preset(o.preset);
  const data::Dataset ds = data::load_dataset(o.data);
  const train::Split split = train::split_dataset(ds.samples, o.val_fraction, o.seed);
  const models::ModelConfig cfg = models::make_config(arch, preset, ds.vocab.size());
  train::FitOptions f = fit_options(o, arch);
  if (!o.quiet) {
    f.on_epoch = [&out](const train::EpochRecord& r) {
      out << "epoch " << r.epoch << " train_loss " << fmt(r.train_loss) << " val_masked_loss "
          << fmt(r.val_masked_loss) << " val_masked_acc " << fmt(r.val_masked_acc) << " lr " << r.lr << "\n";
    };
  }
  out << "training " << o.arch << " (" << o.preset << ", " << models::parameter_count(cfg) << " parameters) on "
      << split.train.size() << " samples, validating on " << split.val.size() << "\n";
  const train::FitResult r = train::fit(cfg, split.train, split.val, f);

  const fs::path dir(o.out);
  models::save_checkpoint(dir, models::Checkpoint{cfg, r.model.params, r.optim.m, r.optim.v, r.optim.step});
  write_text(dir / "history.json", train::history_to_json(r.history));
  ds.vocab.save(dir / "vocab.tsv");
  json cfg_json{{"command", "train"},
                {"arch", o.arch},
                {"preset", o.preset},
                {"batch_size", f.batch_size},
                {"epochs", o.epochs},
                {"optimizer", o.optimizer},
                {"seed", o.seed},
                {"data", o.data},
                {"val_fraction", o.val_fraction},
                {"lr_start", o.lr_start},
                {"lr_end", o.lr_end},
                {"adam_lr", o.adam_lr},
                {"weight_decay", o.weight_decay},
                {"patience", o.patience},
                {"clip_norm", o.clip_norm.value_or(arch == models::Arch::vit_transformer ? 1.0 : 0.0)},
                {"target_accuracy", o.target_accuracy ? json(*o.target_accuracy) : json(nullptr)},
                {"unmasked_val_loss", !o.skip_unmasked},
                {"model", json::parse(models::config_to_json(cfg))}};
  write_text(dir / "run_config.json", cfg_json.dump(2) + "\n");
  const auto& best = r.history.at(r.best_epoch);
  out << "best epoch " << r.best_epoch << " val_masked_loss " << fmt(best.val_masked_loss) << " val_masked_acc "
      << fmt(best.val_masked_acc) << (r.early_stopped ? " (early stop)" : "") << "\n";
  return kOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string config;
};

int eval_cmd(const EvalArgs& o, std::ostream& out) {
  const Loaded l = load_model(o.checkpoint);
  const data::Dataset ds = data::load_dataset(o.data, l.model.config.max_len);
  const auto samples = reencode(ds, l.vocab, l.model.config.max_len);
  const metrics::Evaluation ev = metrics::evaluate(l.model, samples, l.vocab);
  const fs::path dir(o.out);
  write_text(dir / "report.json", metrics::report_to_json(ev.report));
  write_text(dir / "predictions.jsonl", metrics::predictions_to_jsonl(ev.samples));
  const json cfg{{"command", "eval"}, {"checkpoint", o.checkpoint}, {"data", o.data}};
  write_text(dir / "run_config.json", cfg.dump(2) + "\n");
  out << metrics::report_to_json(ev.report);
  return kOk;
}

struct PredictArgs {
  std::string checkpoint;
  std::string image;
  std::string config;
};

int predict_cmd(const PredictArgs& o, std::ostream& out) {
  const Loaded l = load_model(o.checkpoint);
  const data::Image img = data::load_image(o.image);
  const text::TokenSequence seq = models::greedy_decode(l.model, img);
  out << text::decode(seq, l.vocab) << "\n";
  return kOk;
}

struct GradcheckArgs {
  std::string preset = "desk";
  std::uint64_t seed = 1;
  std::size_t coords = 4;
  std::string config;
};

int gradcheck_cmd(const GradcheckArgs& o, std::ostream& out) {
  const models::Preset preset = models::parse_preset(o.preset);
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  char line[160];
  for (const auto& r : verify::op_gradchecks(o.seed)) {
    std::snprintf(line, sizeof line, "op    %-18s max_rel_err %.3e  tol %.0e  %s\n", r.name.c_str(),
                  r.max_rel_error, r.tolerance, r.passed() ? "ok" : "FAIL");
    out << line;
    ok = ok && r.passed();
  }
  for (const auto& r : verify::arch_gradchecks(preset, o.seed, o.coords)) {
    std::snprintf(line, sizeof line, "arch  %-18s max_rel_err %.3e  tol %.0e  %s  (worst %s, %zu coords)\n",
                  r.name.c_str(), r.max_rel_error, r.tolerance, r.passed() ? "ok" : "FAIL", r.worst.c_str(),
                  r.coordinates);
    out << line;
    ok = ok && r.passed();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << (ok ? "all checks passed" : "gradient check FAILED") << " in " << fmt(secs, 1) << " s\n";
  return ok ? kOk : kVerifyFailed;
}

struct BenchArgs {
  std::string data;
  std::size_t count = 64;
  std::uint64_t seed = 1;
  std::size_t max_tokens = 8;
  std::string preset = "desk";
  std::size_t epochs = 20;
  std::optional<std::size_t> batch_size;
  double val_fraction = 0.25;
  std::vector<std::string> archs = kArchs;
  std::string out;
  std::string config;
};

int bench_cmd(const BenchArgs& o, std::ostream& out) {
  const models::Preset preset = models::parse_preset(o.preset);
  const data::Dataset ds = o.data.empty()
                               ? data::make_synthetic_dataset({o.count, o.seed, o.max_tokens, {}})
                               : data::load_dataset(o.data);
  const train::Split split = train::split_dataset(ds.samples, o.val_fraction, o.seed);
  json rows = json::array();
  out << "| Model | Loss | Accuracy | BLEU-4 | Levenshtein | Exact | Epochs | Seconds |\n"
      << "|---|---|---|---|---|---|---|---|\n";
  for (const std::string& name : o.archs) {
    const models::Arch arch = models::parse_arch(name);
    const models::ModelConfig cfg = models::make_config(arch, preset, ds.vocab.size());
    TrainArgs ta;
    ta.batch_size = o.batch_size;
    ta.epochs = o.epochs;
    ta.seed = o.seed;
    ta.skip_unmasked = true;
    const auto t0 = std::chrono::steady_clock::now();
    const train::FitResult r = train::fit(cfg, split.train, split.val, fit_options(ta, arch));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto& val = split.val.empty() ? split.train : split.val;
    const metrics::Evaluation ev = metrics::evaluate(r.model, val, ds.vocab);
    const double loss = r.history.at(r.best_epoch).val_masked_loss;
    out << "| " << name << " | " << fmt(loss, 3) << " | " << fmt(ev.report.masked_token_accuracy, 3) << " | "
        << fmt(ev.report.mean_bleu4, 3) << " | " << fmt(ev.report.mean_levenshtein_norm, 3) << " | "
        << fmt(ev.report.exact_match_rate, 3) << " | " << r.history.size() << " | " << fmt(secs, 1) << " |\n";
    rows.push_back({{"model", name},
                    {"masked_loss", loss},
                    {"masked_accuracy", ev.report.masked_token_accuracy},
                    {"mean_bleu4_sentence_averaged", ev.report.mean_bleu4},
                    {"mean_levenshtein_norm", ev.report.mean_levenshtein_norm},
                    {"exact_match_rate", ev.report.exact_match_rate},
                    {"epochs_run", r.history.size()}});
  }
  if (!o.out.empty()) {
    const fs::path dir(o.out);
    write_text(dir / "bench.json", rows.dump(2) + "\n");
    const json cfg{{"command", "bench"}, {"data", o.data},     {"count", o.count},   {"seed", o.seed},
                   {"max_tokens", o.max_tokens}, {"preset", o.preset}, {"epochs", o.epochs},
                   {"val_fraction", o.val_fraction}, {"archs", o.archs}};
    write_text(dir / "run_config.json", cfg.dump(2) + "\n");
  }
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Image-to-LaTeX models: data generation, training, evaluation and verification", "im2tex"};
  app.require_subcommand(1);

  GenData gd;
  CLI::App* gen = app.add_subcommand("gen-data", "Write a synthetic dataset (index, formulas, PGM images)");
  gen->add_option("--count", gd.count, "Number of samples");
  gen->add_option("--seed", gd.seed, "Random seed")->capture_default_str();
  gen->add_option("--vocab", gd.vocab, "Vocabulary file whose symbols the generator draws from");
  gen->add_option("--max-tokens", gd.max_tokens, "Longest formula in symbols")->capture_default_str();
  gen->add_option("--out", gd.out, "Output directory");
  gen->add_option("--config", gd.config, "JSON file with option values");

  BuildVocab bv;
  CLI::App* voc = app.add_subcommand("build-vocab", "Build a vocabulary and frequency report from a formula file");
  voc->add_option("--formulas", bv.formulas, "Formula file, one per line");
  voc->add_option("--max-size", bv.max_size, "Symbols kept, excluding specials")->capture_default_str();
  voc->add_option("--report-top", bv.report_top, "Most/least frequent symbols listed")->capture_default_str();
  voc->add_option("--out", bv.out, "Output directory");
  voc->add_option("--config", bv.config, "JSON file with option values");

  TrainArgs ta;
  CLI::App* tr = app.add_subcommand("train", "Train a model and write a checkpoint");
  tr->add_option("--arch", ta.arch, "Architecture")->check(CLI::IsMember(kArchs));
  tr->add_option("--preset", ta.preset, "Hyperparameter preset")->check(CLI::IsMember(kPresets))->capture_default_str();
  tr->add_option("--batch-size", ta.batch_size, "Batch size (default 128, or 64 for vit_transformer)");
  tr->add_option("--epochs", ta.epochs, "Maximum epochs")->capture_default_str();
  tr->add_option("--optimizer", ta.optimizer, "Optimizer")->check(CLI::IsMember(kOptimizers))->capture_default_str();
  tr->add_option("--seed", ta.seed, "Random seed")->capture_default_str();
  tr->add_option("--data", ta.data, "Dataset directory");
  tr->add_option("--out", ta.out, "Checkpoint directory");
  tr->add_option("--val-fraction", ta.val_fraction, "Held-out fraction (0 validates on the training set)")
      ->check(CLI::Range(0.0, 0.9))
      ->capture_default_str();
  tr->add_option("--lr-start", ta.lr_start, "AdamW schedule start")->capture_default_str();
  tr->add_option("--lr-end", ta.lr_end, "AdamW schedule end")->capture_default_str();
  tr->add_option("--adam-lr", ta.adam_lr, "Adam learning rate")->capture_default_str();
  tr->add_option("--weight-decay", ta.weight_decay, "AdamW decoupled weight decay")->capture_default_str();
  tr->add_option("--patience", ta.patience, "Early-stopping patience (0 disables)")->capture_default_str();
  tr->add_option("--clip-norm", ta.clip_norm, "Global gradient-norm clip (0 disables)");
  tr->add_option("--target-accuracy", ta.target_accuracy, "Stop once validation masked accuracy reaches this");
  tr->add_flag("--skip-unmasked-val-loss", ta.skip_unmasked, "Skip the full-length validation loss");
  tr->add_flag("--quiet", ta.quiet, "No per-epoch lines");
  tr->add_option("--config", ta.config, "JSON file with option values");

  EvalArgs ea;
  CLI::App* ev = app.add_subcommand("eval", "Greedy-decode a dataset and score it");
  ev->add_option("--checkpoint", ea.checkpoint, "Checkpoint directory");
  ev->add_option("--data", ea.data, "Dataset directory");
  ev->add_option("--out", ea.out, "Output directory for report.json and predictions.jsonl");
  ev->add_option("--config", ea.config, "JSON file with option values");

  PredictArgs pa;
  CLI::App* pr = app.add_subcommand("predict", "Decode one PGM image to LaTeX");
  pr->add_option("--checkpoint", pa.checkpoint, "Checkpoint directory");
  pr->add_option("--image", pa.image, "PGM image");
  pr->add_option("--config", pa.config, "JSON file with option values");

  GradcheckArgs ga;
  CLI::App* gc = app.add_subcommand("gradcheck", "Finite-difference verification of every op and architecture");
  gc->add_option("--preset", ga.preset, "Preset")->check(CLI::IsMember(kPresets))->capture_default_str();
  gc->add_option("--seed", ga.seed, "Random seed")->capture_default_str();
  gc->add_option("--coords", ga.coords, "Coordinates probed per parameter tensor (0 = all)")->capture_default_str();
  gc->add_option("--config", ga.config, "JSON file with option values");

  BenchArgs ba;
  CLI::App* be = app.add_subcommand("bench", "Train every architecture on one split and print a comparison table");
  be->add_option("--data", ba.data, "Dataset directory (default: synthetic)");
  be->add_option("--count", ba.count, "Synthetic samples")->capture_default_str();
  be->add_option("--seed", ba.seed, "Random seed")->capture_default_str();
  be->add_option("--max-tokens", ba.max_tokens, "Longest synthetic formula")->capture_default_str();
  be->add_option("--preset", ba.preset, "Preset")->check(CLI::IsMember(kPresets))->capture_default_str();
  be->add_option("--epochs", ba.epochs, "Epochs per model")->capture_default_str();
  be->add_option("--batch-size", ba.batch_size, "Batch size (default per architecture)");
  be->add_option("--val-fraction", ba.val_fraction, "Held-out fraction")->check(CLI::Range(0.0, 0.9));
  be->add_option("--archs", ba.archs, "Architectures to compare")->check(CLI::IsMember(kArchs));
  be->add_option("--out", ba.out, "Directory for bench.json");
  be->add_option("--config", ba.config, "JSON file with option values");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
    if (gen->parsed()) {
      apply_config(*gen, gd.config);
      require(*gen, {"--count", "--out"});
      return gen_data(gd, out);
    }
    if (voc->parsed()) {
      apply_config(*voc, bv.config);
      require(*voc, {"--formulas", "--out"});
      return build_vocab(bv, out);
    }
    if (tr->parsed()) {
      apply_config(*tr, ta.config);
      require(*tr, {"--arch", "--data", "--out"});
      return train_cmd(ta, out);
    }
    if (ev->parsed()) {
      apply_config(*ev, ea.config);
      require(*ev, {"--checkpoint", "--data", "--out"});
      return eval_cmd(ea, out);
    }
    if (pr->parsed()) {
      apply_config(*pr, pa.config);
      require(*pr, {"--checkpoint", "--image"});
      return predict_cmd(pa, out);
    }
    if (gc->parsed()) {
      apply_config(*gc, ga.config);
      return gradcheck_cmd(ga, out);
    }
    apply_config(*be, ba.config);
    return bench_cmd(ba, out);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << "\n";
    return kDiverged;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  }
}

}  // namespace im2tex::cli
