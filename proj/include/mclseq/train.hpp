#pragma once

// Adapter training loop: fresh mixture batches every step, grouped forward,
// WTA loss, AdamW on the hypothesis bank, cosine learning-rate schedule and
// periodic validation on a fixed held-out batch.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "mclseq/markov.hpp"
#include "mclseq/model.hpp"

namespace mclseq::train {

struct TrainConfig {
  double lr_max = 1e-4;
  double lr_min = 0.0;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  std::size_t batch_size = 128;
  std::size_t total_steps = 500;
  std::size_t val_every = 10;
  std::size_t val_size = 4096;
  std::size_t seq_len = 32;
  /// Relaxation: the winner gets 1 - epsilon, the others epsilon / (K - 1).
  double epsilon = 0.0;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip_norm = 0.0;
  /// Fraction of steps spent in linear warmup before the cosine decay.
  double warmup_fraction = 0.0;
  std::uint64_t seed = 0;
  /// Abort when validation loss exceeds this multiple of its initial value.
  double divergence_factor = 10.0;

  void validate() const;
};

/// lr_min + (lr_max - lr_min) (1 + cos(pi step / total)) / 2.
double cosine_lr(std::size_t step, std::size_t total, double lr_max, double lr_min);
/// Warmup (if any) followed by the cosine decay over the remaining steps.
double scheduled_lr(std::size_t step, const TrainConfig& config);

struct AdamState {
  std::vector<ad::Tensor> first_moment;
  std::vector<ad::Tensor> second_moment;
  std::size_t steps = 0;
};

/// Decoupled-weight-decay Adam: p <- p (1 - lr wd), then
/// p <- p - lr m_hat / (sqrt(v_hat) + eps). Throws DivergenceError (naming
/// the step) if a gradient is non-finite.
void adamw_step(std::span<ad::Tensor* const> params, std::span<const ad::Tensor> grads, AdamState& state,
                double lr, const TrainConfig& config);

/// One validation point.
struct RunRow {
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;  ///< per token, mean of the steps since the previous row
  double val_loss = 0.0;    ///< per token, epsilon = 0 (oracle)
  double val_loss_train_eps = 0.0;
  std::vector<double> winner_fractions;  ///< on the validation batch
};

/// Per-training-step log entry.
struct StepLog {
  std::size_t step = 0;
  double loss = 0.0;  ///< per token
  std::vector<std::size_t> winner_counts;
  std::size_t ties = 0;
};

struct RunRecord {
  std::size_t hypotheses = 0;
  std::vector<RunRow> rows;
  std::vector<StepLog> steps;
};

struct RunResult {
  RunRecord record;
  model::Model model;
};

/// Validation WTA loss per token and winner assignment for a fixed batch.
struct Evaluation {
  double loss_per_token = 0.0;
  double loss_per_token_train_eps = 0.0;
  std::vector<double> winner_fractions;
};
Evaluation evaluate(const model::Model& model, const markov::SequenceBatch& batch, double epsilon,
                    std::uint64_t tie_seed);

using ProgressFn = std::function<void(const RunRow&)>;

/// Trains the hypothesis bank of `model` (base stays frozen). Deterministic
/// given `config.seed`. Throws DivergenceError on blow-up.
RunResult run(model::Model model, const markov::MixtureSpec& mix, const TrainConfig& config,
              const ProgressFn& progress = {});

/// step,lr,train_loss,val_loss,val_loss_train_eps,win_0..win_{K-1}
void write_run_csv(std::ostream& os, const RunRecord& record);
/// step,split,loss,count_0..count_{K-1},ties
void write_step_log_csv(std::ostream& os, const RunRecord& record);

}  // namespace mclseq::train
