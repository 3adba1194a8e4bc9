#include "im2tex/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "im2tex/errors.hpp"
#include "im2tex/ops.hpp"
#include "im2tex/rng.hpp"
#include "im2tex/simd/kernels.hpp"
#include "json.hpp"

namespace im2tex::train {
namespace {

using models::Model;
using models::ParamSet;

std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  std::uint64_t x = seed * 0x9e3779b97f4a7c15ULL + epoch + 1;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void check_finite_grads(const ParamSet& params) {
  for (const auto& [name, p] : params) {
    for (double g : p.grad()) {
      if (!std::isfinite(g)) throw DivergenceError("non-finite gradient in " + name);
    }
  }
}

void step(ParamSet& params, OptimState& state, double weight_decay) {
  check_finite_grads(params);
  ++state.step;
  const AdamHyper& h = state.hyper;
  const double t = static_cast<double>(state.step);
  const simd::AdamParams hp{h.lr,
                            h.beta1,
                            h.beta2,
                            h.eps,
                            weight_decay,
                            1.0 - std::pow(h.beta1, t),
                            1.0 - std::pow(h.beta2, t)};
  for (auto& [name, p] : params) {
    auto& m = state.m.at(name);
    auto& v = state.v.at(name);
    const auto g = p.grad();
    simd::kernels().adamw_update(p.mutable_values().data(), g.data(), m.mutable_values().data(),
                                 v.mutable_values().data(), p.size(), hp);
    round_to_precision(p.mutable_values());
    round_to_precision(m.mutable_values());
    round_to_precision(v.mutable_values());
  }
}

ParamSet copy_params(const ParamSet& params) {
  ParamSet out;
  for (const auto& [name, p] : params) out.emplace(name, p.detach());
  return out;
}

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

LossResult cross_entropy(const Tensor& logits, std::span<const int> targets,
                         std::span<const std::uint8_t> mask) {
  if (logits.rank() == 0) throw DimensionError("cross_entropy: scalar logits");
  const std::size_t vocab = logits.shape().back();
  const std::size_t n = logits.size() / vocab;
  if (targets.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " positions");
  }
  if (!mask.empty() && mask.size() != n) {
    throw DimensionError("cross_entropy: mask holds " + std::to_string(mask.size()) + " entries for " +
                         std::to_string(n) + " positions");
  }
  std::vector<double> weights(n, 1.0);
  std::size_t count = n;
  if (!mask.empty()) {
    count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      weights[i] = mask[i] ? 1.0 : 0.0;
      count += mask[i] ? 1 : 0;
    }
    if (count == 0) throw ContractError("cross_entropy: mask has no true entry");
  }
  const Tensor flat = logits.rank() == 2 ? logits : reshape(logits, {n, vocab});
  LossResult r;
  r.loss = scale(nll_loss(flat, targets, weights), 1.0 / static_cast<double>(count));
  r.count = count;
  const auto values = logits.values();
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == 0.0) continue;
    if (argmax_row(values.subspan(i * vocab, vocab)) == static_cast<std::size_t>(targets[i])) ++r.correct;
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(count);
  return r;
}

TeacherForcing teacher_forcing(const text::TokenSequence& target, bool truncate) {
  const std::size_t n = truncate ? target.true_len : target.ids.size();
  if (n < 2 || n > target.ids.size()) {
    throw ContractError("teacher_forcing: sequence of length " + std::to_string(n));
  }
  TeacherForcing tf;
  tf.inputs.assign(target.ids.begin(), target.ids.begin() + static_cast<std::ptrdiff_t>(n - 1));
  tf.labels.assign(target.ids.begin() + 1, target.ids.begin() + static_cast<std::ptrdiff_t>(n));
  for (int id : tf.labels) tf.mask.push_back(id != text::kPad ? 1 : 0);
  return tf;
}

Tensor sample_logits(const Model& model, const data::ImageSample& sample, std::span<const int> inputs) {
  const Tensor encoded =
      models::encode(models::image_tensor(sample.image, model.config), model.config, model.params);
  return models::decoder_logits(inputs, encoded, model.config, model.params);
}

OptimState make_optim_state(const ParamSet& params, const AdamHyper& hyper) {
  OptimState s;
  s.hyper = hyper;
  for (const auto& [name, p] : params) {
    s.m.emplace(name, Tensor(p.shape()));
    s.v.emplace(name, Tensor(p.shape()));
  }
  return s;
}

void adamw_step(ParamSet& params, OptimState& state) { step(params, state, state.hyper.weight_decay); }

void adam_step(ParamSet& params, OptimState& state) { step(params, state, 0.0); }

double clip_grad_norm(ParamSet& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, p] : params) {
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& [name, p] : params) {
      auto g = p.mutable_grad();
      simd::kernels().scale(g.data(), factor, g.data(), g.size());
      round_to_precision(g);
    }
  }
  return norm;
}

double lr_schedule(std::size_t epoch, std::size_t total_epochs, double lr_start, double lr_end) {
  if (total_epochs < 2 || epoch == 0) return lr_start;
  const double frac = static_cast<double>(std::min(epoch, total_epochs - 1)) /
                      static_cast<double>(total_epochs - 1);
  return lr_start * std::pow(lr_end / lr_start, frac);
}

StopDecision early_stop(const TrainHistory& history, std::size_t patience) {
  StopDecision d;
  if (history.empty()) return d;
  double best = history.front().val_masked_loss;
  std::size_t since = 0;
  for (std::size_t e = 1; e < history.size(); ++e) {
    if (history[e].val_masked_loss < best) {
      best = history[e].val_masked_loss;
      d.best_epoch = e;
      since = 0;
    } else {
      ++since;
    }
  }
  d.stop = patience > 0 && since >= patience;
  return d;
}

std::string history_to_json(const TrainHistory& history) {
  nlohmann::json arr = nlohmann::json::array();
  for (const EpochRecord& r : history) {
    arr.push_back({{"epoch", r.epoch},
                   {"train_loss", r.train_loss},
                   {"val_loss", r.val_loss ? nlohmann::json(*r.val_loss) : nlohmann::json(nullptr)},
                   {"val_masked_loss", r.val_masked_loss},
                   {"val_masked_acc", r.val_masked_acc},
                   {"lr", r.lr}});
  }
  return arr.dump(2) + "\n";
}

Optimizer parse_optimizer(std::string_view name) {
  if (name == "adam") return Optimizer::adam;
  if (name == "adamw") return Optimizer::adamw;
  throw ConfigError("unknown optimizer '" + std::string(name) + "' (valid: adam, adamw)");
}

TeacherForcedMetrics teacher_forced_metrics(const Model& model,
                                            std::span<const data::ImageSample> samples,
                                            bool unmasked) {
  if (samples.empty()) throw InputError("teacher_forced_metrics: no samples");
  const TapeScope no_grad(nullptr);
  double masked_sum = 0.0, full_sum = 0.0;
  std::size_t masked_count = 0, full_count = 0, correct = 0;
  for (const auto& s : samples) {
    const Tensor encoded =
        models::encode(models::image_tensor(s.image, model.config), model.config, model.params);
    const TeacherForcing tf = teacher_forcing(s.target, true);
    const LossResult r =
        cross_entropy(models::decoder_logits(tf.inputs, encoded, model.config, model.params),
                      tf.labels, tf.mask);
    masked_sum += r.loss.item() * static_cast<double>(r.count);
    masked_count += r.count;
    correct += r.correct;
    if (unmasked) {
      const TeacherForcing full = teacher_forcing(s.target, false);
      const LossResult u = cross_entropy(
          models::decoder_logits(full.inputs, encoded, model.config, model.params), full.labels);
      full_sum += u.loss.item() * static_cast<double>(u.count);
      full_count += u.count;
    }
  }
  TeacherForcedMetrics m;
  m.masked_loss = masked_sum / static_cast<double>(masked_count);
  m.masked_accuracy = static_cast<double>(correct) / static_cast<double>(masked_count);
  if (unmasked) m.unmasked_loss = full_sum / static_cast<double>(full_count);
  return m;
}

Split split_dataset(std::span<const data::ImageSample> samples, double val_fraction,
                    std::uint64_t seed) {
  if (samples.empty()) throw InputError("split_dataset: no samples");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
    throw ConfigError("val fraction must lie in [0, 1)");
  }
  Split split;
  if (val_fraction == 0.0) {
    split.train.assign(samples.begin(), samples.end());
    split.val = split.train;
    return split;
  }
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  // At least one validation sample for any positive fraction.
  const auto n_val = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(samples.size()))));
  if (n_val >= samples.size()) {
    throw ConfigError("val fraction leaves an empty split for " + std::to_string(samples.size()) +
                      " samples");
  }
  const std::size_t n_train = samples.size() - n_val;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    (i < n_train ? split.train : split.val).push_back(samples[order[i]]);
  }
  return split;
}

FitResult fit(const models::ModelConfig& cfg, std::span<const data::ImageSample> train_set,
              std::span<const data::ImageSample> val_set, const FitOptions& options) {
  cfg.validate();
  if (train_set.empty()) throw InputError("fit: empty training set");
  if (options.batch_size == 0) throw ConfigError("batch size must be positive");
  if (options.epochs == 0) throw ConfigError("epochs must be positive");
  const auto val = val_set.empty() ? train_set : val_set;
  const bool adamw = options.optimizer == Optimizer::adamw;

  Model model = models::make_model(cfg, options.seed);
  for (auto& [name, p] : model.params) p.set_requires_grad(true);
  AdamHyper hyper;
  hyper.weight_decay = adamw ? options.weight_decay : 0.0;
  OptimState state = make_optim_state(model.params, hyper);
  const double clip = options.clip_norm.value_or(
      cfg.arch == models::Arch::vit_transformer ? 1.0 : 0.0);

  std::vector<TeacherForcing> forcing;
  forcing.reserve(train_set.size());
  for (const auto& s : train_set) forcing.push_back(teacher_forcing(s.target, true));

  FitResult result;
  double best = std::numeric_limits<double>::infinity();
  ParamSet best_params = copy_params(model.params);
  OptimState best_state = state;

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    const double lr = adamw ? lr_schedule(epoch, options.epochs, options.lr_start, options.lr_end)
                            : options.adam_lr;
    state.hyper.lr = lr;
    const auto batches = data::make_batches(train_set, options.batch_size,
                                            epoch_seed(options.seed, epoch), false);
    double loss_sum = 0.0;
    std::size_t position_count = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      std::size_t count = 0;
      for (std::size_t i : batches[b].sample_indices) count += forcing[i].labels.size();
      double batch_loss = 0.0;
      for (std::size_t i : batches[b].sample_indices) {
        Tape tape;
        const TapeScope scope(&tape);
        const TeacherForcing& tf = forcing[i];
        const std::vector<double> ones(tf.labels.size(), 1.0);
        const Tensor loss = scale(nll_loss(sample_logits(model, train_set[i], tf.inputs), tf.labels, ones),
                                  1.0 / static_cast<double>(count));
        if (!std::isfinite(loss.item())) {
          throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(b));
        }
        tape.backward(loss);
        batch_loss += loss.item();
      }
      if (clip > 0.0) clip_grad_norm(model.params, clip);
      try {
        adamw ? adamw_step(model.params, state) : adam_step(model.params, state);
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(b));
      }
      for (auto& [name, p] : model.params) p.zero_grad();
      loss_sum += batch_loss * static_cast<double>(count);
      position_count += count;
    }

    const TeacherForcedMetrics m = teacher_forced_metrics(model, val, options.unmasked_val_loss);
    EpochRecord rec{epoch, loss_sum / static_cast<double>(position_count), m.unmasked_loss,
                    m.masked_loss, m.masked_accuracy, lr};
    if (!std::isfinite(rec.val_masked_loss)) {
      throw DivergenceError("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    result.history.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
    if (rec.val_masked_loss < best) {
      best = rec.val_masked_loss;
      result.best_epoch = epoch;
      best_params = copy_params(model.params);
      best_state = state;
      for (auto& [name, t] : best_state.m) t = t.detach();
      for (auto& [name, t] : best_state.v) t = t.detach();
    }
    if (early_stop(result.history, options.patience).stop) {
      result.early_stopped = true;
      break;
    }
    if (options.target_accuracy && rec.val_masked_acc >= *options.target_accuracy) break;
  }

  result.model = Model{cfg, std::move(best_params)};
  result.optim = std::move(best_state);
  return result;
}

}  // namespace im2tex::train
