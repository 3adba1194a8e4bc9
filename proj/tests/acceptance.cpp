// Acceptance suite: one PASS/FAIL line per criterion.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>

#include "im2tex/cli.hpp"
#include "im2tex/metrics.hpp"
#include "im2tex/models.hpp"
#include "im2tex/ops.hpp"
#include "im2tex/rng.hpp"
#include "im2tex/train.hpp"
#include "im2tex/verify.hpp"

using namespace im2tex;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int n, bool ok, const std::string& detail) {
  std::printf("criterion %d: %s  %s\n", n, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return files;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("im2tex_accept_" + name);
  fs::remove_all(p);
  return p;
}

// ------------------------------------------------------------------ 1

void gradients() {
  const auto t0 = Clock::now();
  double op_worst = 0.0, arch_worst = 0.0;
  std::string op_name, arch_name;
  bool ok = true;
  for (const auto& r : verify::op_gradchecks(1)) {
    ok = ok && r.max_rel_error <= 1e-4 && r.coordinates > 0;
    if (r.max_rel_error >= op_worst) op_worst = r.max_rel_error, op_name = r.name;
  }
  for (const auto& r : verify::arch_gradchecks(models::Preset::desk, 1)) {
    ok = ok && r.max_rel_error <= 1e-3 && r.coordinates > 0;
    if (r.max_rel_error >= arch_worst) arch_worst = r.max_rel_error, arch_name = r.name;
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 300.0;
  report(1, ok, "ops max " + num(op_worst) + " (" + op_name + ") <= 1e-4; archs max " + num(arch_worst) + " (" +
                    arch_name + ") <= 1e-3; " + num(secs) + " s");
}

// ------------------------------------------------------------------ 2

// Closed-form parameter arithmetic, written independently of the model code.
std::size_t closed_form(const models::ModelConfig& c) {
  const std::size_t v = c.vocab_size;
  if (c.arch == models::Arch::vit_transformer) {
    const std::size_t d = c.d_model, h = c.mlp_hidden, o = c.mlp_out;
    const std::size_t attn = 4 * (d * d + d), mlp = d * h + h + h * o + o, ln = 2 * d;
    const std::size_t patches = (50 / c.patch_h) * (200 / c.patch_w);
    return c.patch_h * c.patch_w * d + d + patches * d + c.enc_layers * (2 * ln + attn + mlp) + ln +
           v * d + c.max_len * d + c.dec_layers * (3 * ln + 2 * attn + mlp) + ln + d * v + v;
  }
  const bool big = c.arch == models::Arch::bigimage_lstm;
  std::size_t n = 0, cin = big ? 3 : 1;
  for (std::size_t cout : c.conv_channels) {
    n += 9 * cin * cout + cout;
    cin = cout;
  }
  n += (big ? cin : 6 * 25 * cin) * c.cnn_dense + c.cnn_dense;
  const std::size_t gates = c.arch == models::Arch::cnn_gru ? 3 : 4;
  const std::size_t in = c.token_embed_dim + c.cnn_dense + c.rnn_hidden;
  return n + v * c.token_embed_dim + in * gates * c.rnn_hidden + gates * c.rnn_hidden + c.rnn_hidden * v + v;
}

void architecture() {
  const auto vit = models::make_config(models::Arch::vit_transformer, models::Preset::paper, 544);
  const auto cnn = models::make_config(models::Arch::cnn_lstm, models::Preset::paper, 544);
  const Tensor grid = models::patchify(Tensor({50, 200}), vit.patch_h, vit.patch_w);
  bool ok = vit.patch_rows() == 5 && vit.patch_cols() == 20 && grid.dim(0) == 100 && grid.dim(1) == 100;
  ok = ok && vit.enc_layers == 8 && vit.enc_heads == 4 && vit.mlp_hidden == 2048 && vit.mlp_out == 1024;
  ok = ok && vit.dec_layers == 4 && vit.dec_heads == 8;
  ok = ok && models::parameter_shapes(cnn).at("enc.dense.w").back() == 256 && cnn.cnn_dense == 256;
  std::string counts;
  for (auto arch : {models::Arch::cnn_lstm, models::Arch::cnn_gru, models::Arch::bigimage_lstm,
                    models::Arch::vit_transformer}) {
    for (auto preset : {models::Preset::paper, models::Preset::desk}) {
      const auto c = models::make_config(arch, preset, 544);
      ok = ok && models::parameter_count(c) == closed_form(c);
    }
  }
  counts = std::to_string(models::parameter_count(vit));
  report(2, ok, "5x20 grid of 100-pixel patches, enc 8x4 MLP 2048/1024, dec 4x8, CNN dense 256; paper ViT " + counts +
                    " params = closed form; all 8 arch/preset counts match");
}

// ------------------------------------------------------------------ 3

void causality() {
  auto cfg = models::make_config(models::Arch::vit_transformer, models::Preset::desk, 40);
  Rng rng(3);
  std::size_t trials = 0, violations = 0;
  for (int t = 0; t < 100; ++t) {
    const auto params = models::init_params(cfg, 100 + static_cast<std::uint64_t>(t));
    std::vector<double> mem(100 * cfg.d_model);
    for (double& x : mem) x = rng.uniform(-1.0, 1.0);
    const Tensor memory({100, cfg.d_model}, mem);
    const std::size_t len = 2 + rng.below(20);
    std::vector<int> ids(len);
    for (int& id : ids) id = static_cast<int>(rng.below(40));
    const std::size_t cut = rng.below(len - 1);
    std::vector<int> altered = ids;
    for (std::size_t i = cut + 1; i < len; ++i) altered[i] = static_cast<int>(rng.below(40));
    const TapeScope no_grad(nullptr);
    const Tensor a = models::transformer_decode(ids, memory, cfg, params);
    const Tensor b = models::transformer_decode(altered, memory, cfg, params);
    for (std::size_t i = 0; i < (cut + 1) * 40; ++i) {
      if (a[i] != b[i]) {
        ++violations;
        break;
      }
    }
    ++trials;
  }
  report(3, trials == 100 && violations == 0,
         std::to_string(trials) + " trials, " + std::to_string(violations) + " with any past-logit change");
}

// ------------------------------------------------------------------ 4

void metric_oracles() {
  std::vector<metrics::TokenList> lists{{}}, frontier{{}};
  for (int len = 1; len <= 6; ++len) {
    std::vector<metrics::TokenList> next;
    for (const auto& l : frontier) {
      for (const char* s : {"a", "b", "c"}) {
        auto x = l;
        x.push_back(s);
        next.push_back(x);
      }
    }
    lists.insert(lists.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  std::size_t pairs = 0, mismatches = 0;
  for (const auto& a : lists) {
    for (const auto& b : lists) {
      std::array<std::array<int, 7>, 7> memo;
      for (auto& row : memo) row.fill(-1);
      std::function<int(std::size_t, std::size_t)> rec = [&](std::size_t i, std::size_t j) -> int {
        if (i == a.size()) return static_cast<int>(b.size() - j);
        if (j == b.size()) return static_cast<int>(a.size() - i);
        if (memo[i][j] >= 0) return memo[i][j];
        return memo[i][j] = std::min({rec(i + 1, j + 1) + (a[i] == b[j] ? 0 : 1), rec(i + 1, j) + 1, rec(i, j + 1) + 1});
      };
      if (static_cast<int>(metrics::levenshtein(a, b).distance) != rec(0, 0)) ++mismatches;
      ++pairs;
    }
  }
  const metrics::TokenList cand{"a", "b", "c", "d", "e"}, ref{"a", "b", "c", "d", "f"};
  const double bleu_err = std::abs(metrics::bleu4(cand, ref) - std::pow(0.2, 0.25));
  Rng rng(4);
  double worst_self = 0.0;
  for (int t = 0; t < 50; ++t) {
    metrics::TokenList x;
    const std::size_t len = 4 + rng.below(40);
    for (std::size_t i = 0; i < len; ++i) x.push_back("t" + std::to_string(rng.below(12)));
    worst_self = std::max(worst_self, std::abs(metrics::bleu4(x, x) - 1.0));
  }
  const bool ok = mismatches == 0 && pairs == 1093 * 1093 && bleu_err <= 1e-9 && worst_self <= 1e-12;
  report(4, ok, "levenshtein = recursion on " + std::to_string(pairs) + " pairs (" + std::to_string(mismatches) +
                    " mismatches); bleu 0.2^0.25 err " + num(bleu_err) + "; bleu(x,x) max |1-s| " + num(worst_self) +
                    " over 50");
}

// ------------------------------------------------------------------ 5

void loss_closed_form() {
  const std::vector<int> targets{0, 5, 539, 100, 7};
  const double uniform = train::cross_entropy(Tensor({5, 540}, 0.0), targets).loss.item();
  Rng rng(5);
  std::vector<double> v(5 * 540);
  for (double& x : v) x = rng.uniform(-4.0, 4.0);
  const Tensor logits({1, 5, 540}, v);
  const std::vector<std::uint8_t> all(5, 1);
  const double masked = train::cross_entropy(logits, targets, all).loss.item();
  const double unmasked = train::cross_entropy(logits, targets).loss.item();
  const bool ok = std::abs(uniform - std::log(540.0)) <= 1e-4 && masked == unmasked;
  report(5, ok, "uniform V=540 loss " + std::to_string(uniform) + " vs ln 540 " + std::to_string(std::log(540.0)) +
                    "; all-true mask " + (masked == unmasked ? "==" : "!=") + " unmasked");
}

// ------------------------------------------------------------------ 6

void schedule_and_stopping() {
  const double first = train::lr_schedule(0, 500), last = train::lr_schedule(499, 500);
  bool ok = std::abs(first - 1e-4) <= 1e-12 && std::abs(last - 1e-6) <= 1e-12;
  // Stop must fire exactly when the 10th non-improving epoch arrives.
  std::size_t checked = 0;
  for (std::size_t improving = 1; improving <= 5; ++improving) {
    train::TrainHistory h;
    for (std::size_t e = 0; e < improving; ++e) {
      train::EpochRecord r;
      r.epoch = e;
      r.val_masked_loss = 10.0 - static_cast<double>(e);
      h.push_back(r);
    }
    for (std::size_t k = 1; k <= 12; ++k) {
      train::EpochRecord r;
      r.epoch = h.size();
      r.val_masked_loss = 20.0;
      h.push_back(r);
      const auto d = train::early_stop(h, 10);
      ok = ok && d.stop == (k >= 10) && d.best_epoch == improving - 1;
      ++checked;
    }
  }
  report(6, ok, "lr(0) " + num(first) + ", lr(last) " + num(last) + "; early stop fires on the 10th non-improving epoch in " +
                    std::to_string(checked) + " constructed histories");
}

// ------------------------------------------------------------------ 7

struct Overfit {
  double accuracy = 0.0;
  std::size_t epochs = 0;
  double seconds = 0.0;
  std::size_t exact = 0;
  bool window_ok = true;
};

Overfit overfit(models::Arch arch, const train::FitOptions& options, const data::Dataset& ds) {
  const auto t0 = Clock::now();
  const auto cfg = models::make_config(arch, models::Preset::desk, ds.vocab.size());
  const train::FitResult r = train::fit(cfg, ds.samples, {}, options);
  Overfit o;
  o.seconds = seconds_since(t0);
  o.epochs = r.history.size();
  o.accuracy = r.history.at(r.best_epoch).val_masked_acc;
  const auto ev = metrics::evaluate(ds.samples, ds.vocab, [&](const data::ImageSample& s) {
    return models::greedy_decode(r.model, s.image);
  });
  for (const auto& s : ev.samples) o.exact += s.exact ? 1 : 0;
  // Mean training loss per 50-epoch window may rise by at most 5%.
  double prev = -1.0;
  for (std::size_t w = 0; w + 50 <= r.history.size(); w += 50) {
    double m = 0.0;
    for (std::size_t e = w; e < w + 50; ++e) m += r.history[e].train_loss / 50.0;
    if (prev >= 0.0 && m > prev * 1.05) o.window_ok = false;
    prev = m;
  }
  return o;
}

void overfit_sanity() {
  const data::Dataset ds = data::make_synthetic_dataset({32, 1, 8, {}});
  train::FitOptions vit;
  vit.epochs = 500;
  vit.batch_size = 8;
  vit.lr_start = 1e-3;
  vit.lr_end = 1e-5;
  vit.seed = 1;
  vit.patience = 0;
  vit.target_accuracy = 0.99;
  vit.unmasked_val_loss = false;
  const Overfit v = overfit(models::Arch::vit_transformer, vit, ds);

  train::FitOptions cnn = vit;
  cnn.optimizer = train::Optimizer::adam;
  cnn.adam_lr = 1e-3;
  cnn.target_accuracy = 0.95;
  const Overfit c = overfit(models::Arch::cnn_lstm, cnn, ds);

  const bool ok = v.accuracy >= 0.99 && v.epochs <= 500 && v.seconds < 600.0 && c.accuracy >= 0.95 &&
                  c.epochs <= 500 && c.seconds < 600.0 && v.exact >= 28;
  report(7, ok, "ViT+AdamW acc " + num(v.accuracy) + " after " + std::to_string(v.epochs) + " epochs (" +
                    num(v.seconds) + " s), greedy exact " + std::to_string(v.exact) + "/32; CNN-LSTM+Adam acc " +
                    num(c.accuracy) + " after " + std::to_string(c.epochs) + " epochs (" + num(c.seconds) +
                    " s); loss windows " + (v.window_ok && c.window_ok ? "monotone" : "NOT monotone"));
}

// ------------------------------------------------------------------ 8

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "im2tex");
  std::ostringstream out, err;
  return cli::run(args, out, err);
}

void determinism() {
  const fs::path d1 = scratch("gen1"), d2 = scratch("gen2");
  bool ok = cli({"gen-data", "--count", "16", "--seed", "1", "--out", d1.string()}) == 0 &&
            cli({"gen-data", "--count", "16", "--seed", "1", "--out", d2.string()}) == 0;
  const bool gen_same = ok && tree(d1) == tree(d2);
  std::string detail = std::string("gen-data trees ") + (gen_same ? "identical" : "DIFFER");
  bool ckpt_same = true;
  for (const char* arch : {"vit_transformer", "cnn_lstm"}) {
    const fs::path c1 = scratch(std::string("ck1_") + arch), c2 = scratch(std::string("ck2_") + arch);
    const std::vector<std::string> base{"train", "--arch", arch, "--data", d1.string(), "--epochs", "3",
                                        "--batch-size", "4", "--seed", "9", "--quiet", "--out"};
    auto a1 = base, a2 = base;
    a1.push_back(c1.string());
    a2.push_back(c2.string());
    const bool ran = cli(a1) == 0 && cli(a2) == 0;
    const bool same = ran && tree(c1) == tree(c2) && slurp(c1 / "params.bin").size() > 0;
    ckpt_same = ckpt_same && same;
    detail += std::string("; ") + arch + " checkpoints " + (same ? "bit-identical" : "DIFFER");
  }
  report(8, gen_same && ckpt_same, detail);
}

// ------------------------------------------------------------------ 9

void round_trips() {
  const auto symbols = data::default_synthetic_symbols();
  const auto formulas = data::generate_formulas(symbols, 1000, 40, 9);
  std::vector<std::string> lines;
  for (const auto& f : formulas) {
    std::string s;
    for (const auto& t : f) s += (s.empty() ? "" : " ") + t;
    lines.push_back(s);
  }
  const text::Vocab vocab = text::Vocab::build(lines);
  std::size_t text_ok = 0;
  for (const auto& line : lines) {
    const auto seq = text::encode(text::tokenize(line), vocab);
    if (text::decode(seq, vocab) == line && text::tokenize(text::decode(seq, vocab)) == text::tokenize(line)) ++text_ok;
  }

  const fs::path dir = scratch("ckpt");
  models::Checkpoint ck;
  ck.config = models::make_config(models::Arch::vit_transformer, models::Preset::desk, vocab.size());
  ck.params = models::init_params(ck.config, 5);
  ck.adam_m = models::init_params(ck.config, 6);
  ck.adam_v = models::init_params(ck.config, 7);
  ck.adam_step = 42;
  models::save_checkpoint(dir, ck);
  const auto back = models::load_checkpoint(dir);
  bool ckpt_ok = back.config == ck.config && back.adam_step == 42;
  for (const auto* set : {&ck.params, &ck.adam_m, &ck.adam_v}) {
    const auto& other = set == &ck.params ? back.params : set == &ck.adam_m ? back.adam_m : back.adam_v;
    ckpt_ok = ckpt_ok && other.size() == set->size();
    for (const auto& [name, t] : *set) {
      const auto a = t.values(), b = other.at(name).values();
      ckpt_ok = ckpt_ok && std::equal(a.begin(), a.end(), b.begin(), b.end());
    }
  }

  Rng rng(10);
  std::vector<double> px(50 * 200);
  for (double& x : px) x = rng.uniform();
  const Tensor img({50, 200}, px);
  const Tensor again = models::unpatchify(models::patchify(img, 10, 10), 50, 200, 10, 10);
  const bool patch_ok = std::equal(px.begin(), px.end(), again.values().begin(), again.values().end());

  report(9, text_ok == 1000 && ckpt_ok && patch_ok,
         "tokenize/encode/decode identity " + std::to_string(text_ok) + "/1000; checkpoint " +
             (ckpt_ok ? "bit-identical" : "DIFFERS") + "; patchify round trip " + (patch_ok ? "bit-identical" : "DIFFERS"));
}

}  // namespace

int main() {
  const std::array<std::function<void()>, 9> criteria{gradients, architecture, causality,
                                                      metric_oracles, loss_closed_form, schedule_and_stopping,
                                                      overfit_sanity, determinism, round_trips};
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    try {
      criteria[i]();
    } catch (const std::exception& e) {
      report(static_cast<int>(i + 1), false, std::string("threw: ") + e.what());
    }
  }
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
