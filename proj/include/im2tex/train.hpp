#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "im2tex/dataio.hpp"
#include "im2tex/models.hpp"

namespace im2tex::train {

struct LossResult {
  Tensor loss;  // scalar, differentiable
  double accuracy = 0.0;
  std::size_t count = 0;
  std::size_t correct = 0;
};

// Mean negative log-likelihood over positions of logits [..., V] (leading axes
// are flattened). With a non-empty mask only mask-true positions count.
// Accuracy compares the argmax (lowest id on ties) with the target.
LossResult cross_entropy(const Tensor& logits, std::span<const int> targets,
                         std::span<const std::uint8_t> mask = {});

// Decoder inputs/labels for one target sequence: inputs[t] = ids[t],
// labels[t] = ids[t+1]. With `truncate` the pair stops at the end token;
// causality makes the kept positions' logits identical to the full-length
// ones.
struct TeacherForcing {
  std::vector<int> inputs;
  std::vector<int> labels;
  std::vector<std::uint8_t> mask;  // labels != pad
};
TeacherForcing teacher_forcing(const text::TokenSequence& target, bool truncate);

// Teacher-forced logits [L,V] for one sample.
Tensor sample_logits(const models::Model& model, const data::ImageSample& sample,
                     std::span<const int> inputs);

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct OptimState {
  models::ParamSet m;
  models::ParamSet v;
  std::uint64_t step = 0;
  AdamHyper hyper;
};
OptimState make_optim_state(const models::ParamSet& params, const AdamHyper& hyper);

// Decoupled decay p -= lr*wd*p, then the bias-corrected Adam delta, using the
// gradients held by the parameters. Throws DivergenceError naming the first
// parameter with a non-finite gradient (nothing is updated in that case).
void adamw_step(models::ParamSet& params, OptimState& state);
// Plain Adam: the same update without the decay term.
void adam_step(models::ParamSet& params, OptimState& state);

// Scales all gradients so their global L2 norm is at most max_norm; returns
// the norm before clipping.
double clip_grad_norm(models::ParamSet& params, double max_norm);

// Geometric interpolation from lr_start (epoch 0) to lr_end (last epoch).
double lr_schedule(std::size_t epoch, std::size_t total_epochs, double lr_start = 1e-4,
                   double lr_end = 1e-6);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;  // unmasked; skipped when disabled
  double val_masked_loss = 0.0;
  double val_masked_acc = 0.0;
  double lr = 0.0;
};
using TrainHistory = std::vector<EpochRecord>;

struct StopDecision {
  bool stop = false;
  std::size_t best_epoch = 0;
};
// Monitors val_masked_loss; stops once `patience` consecutive epochs fail to
// beat (strictly) the best value so far.
StopDecision early_stop(const TrainHistory& history, std::size_t patience = 10);

std::string history_to_json(const TrainHistory& history);

enum class Optimizer { adam, adamw };
Optimizer parse_optimizer(std::string_view name);

struct FitOptions {
  std::size_t batch_size = 64;
  std::size_t epochs = 100;
  std::uint64_t seed = 1;
  Optimizer optimizer = Optimizer::adamw;
  double lr_start = 1e-4;  // adamw schedule
  double lr_end = 1e-6;
  double adam_lr = 1e-3;   // constant rate for plain Adam
  double weight_decay = 0.004;
  std::size_t patience = 10;
  // Global-norm clip (0 = off); defaults to 1.0 for the transformer and off
  // otherwise.
  std::optional<double> clip_norm;
  // Ends training once validation masked accuracy reaches this value.
  std::optional<double> target_accuracy;
  bool unmasked_val_loss = true;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct FitResult {
  models::Model model;  // best-epoch weights
  OptimState optim;     // state at the best epoch
  TrainHistory history;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
};

FitResult fit(const models::ModelConfig& cfg, std::span<const data::ImageSample> train_set,
              std::span<const data::ImageSample> val_set, const FitOptions& options);

struct TeacherForcedMetrics {
  double masked_loss = 0.0;
  double masked_accuracy = 0.0;
  std::optional<double> unmasked_loss;
};
TeacherForcedMetrics teacher_forced_metrics(const models::Model& model,
                                            std::span<const data::ImageSample> samples,
                                            bool unmasked);

// Splits off the last max(1, round(fraction * n)) samples as validation after a
// seeded shuffle. fraction 0 validates on the training samples themselves.
struct Split {
  std::vector<data::ImageSample> train;
  std::vector<data::ImageSample> val;
};
Split split_dataset(std::span<const data::ImageSample> samples, double val_fraction,
                    std::uint64_t seed);

}  // namespace im2tex::train
