#include "mclseq/train.hpp"

#include <cmath>
#include <numbers>
#include <ostream>
#include <sstream>

#include "mclseq/errors.hpp"
#include "mclseq/format.hpp"
#include "mclseq/mcl.hpp"
#include "mclseq/rng.hpp"

namespace mclseq::train {
namespace {

// Sub-stream tags of the run seed.
constexpr std::uint64_t kTrainDataStream = 1;
constexpr std::uint64_t kValDataStream = 2;
constexpr std::uint64_t kTieStream = 3;
constexpr std::uint64_t kDropoutStream = 4;
constexpr std::uint64_t kValTieStream = 5;

std::vector<int> tile(std::span<const int> tokens, std::size_t times) {
  std::vector<int> out;
  out.reserve(tokens.size() * times);
  for (std::size_t k = 0; k < times; ++k) out.insert(out.end(), tokens.begin(), tokens.end());
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr_max > 0.0) || lr_min < 0.0 || lr_min > lr_max) throw DomainError("train: need lr_max > 0 and 0 <= lr_min <= lr_max");
  if (total_steps < 1) throw DomainError("train: total_steps must be at least 1");
  if (batch_size < 1 || val_size < 1) throw DomainError("train: batch sizes must be positive");
  if (val_every < 1) throw DomainError("train: val_every must be at least 1");
  if (seq_len < 2) throw DomainError("train: seq_len must be at least 2");
  if (weight_decay < 0.0) throw DomainError("train: weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw DomainError("train: betas must lie in [0,1)");
  if (!(adam_eps > 0.0)) throw DomainError("train: adam_eps must be positive");
  if (grad_clip_norm < 0.0) throw DomainError("train: grad_clip_norm must be non-negative");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw DomainError("train: warmup_fraction must lie in [0,1)");
  if (epsilon < 0.0 || epsilon >= 1.0) throw DomainError("train: epsilon must lie in [0,1)");
}

double cosine_lr(std::size_t step, std::size_t total, double lr_max, double lr_min) {
  if (total == 0 || step > total) throw DomainError("cosine_lr: need 0 <= step <= total, total > 0");
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

double scheduled_lr(std::size_t step, const TrainConfig& config) {
  const auto warmup = static_cast<std::size_t>(std::floor(config.warmup_fraction * static_cast<double>(config.total_steps)));
  if (step < warmup) {
    return config.lr_max * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  return cosine_lr(step - warmup, config.total_steps - warmup, config.lr_max, config.lr_min);
}

void adamw_step(std::span<ad::Tensor* const> params, std::span<const ad::Tensor> grads, AdamState& state,
                double lr, const TrainConfig& config) {
  if (params.size() != grads.size()) throw ShapeError("adamw_step: parameter and gradient counts differ");
  if (state.first_moment.empty()) {
    for (const ad::Tensor* p : params) {
      state.first_moment.emplace_back(p->shape(), 0.0);
      state.second_moment.emplace_back(p->shape(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) throw ShapeError("adamw_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape()) throw ShapeError("adamw_step: gradient shape mismatch");
    if (!grads[i].all_finite()) {
      throw DivergenceError("adamw_step: non-finite gradient at optimizer step " + std::to_string(state.steps + 1));
    }
  }
  ++state.steps;
  const double t = static_cast<double>(state.steps);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  const double decay = 1.0 - lr * config.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Tensor& p = *params[i];
    ad::Tensor& m = state.first_moment[i];
    ad::Tensor& v = state.second_moment[i];
    const ad::Tensor& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] = p[j] * decay - lr * mhat / (std::sqrt(vhat) + config.adam_eps);
    }
  }
}

Evaluation evaluate(const model::Model& model, const markov::SequenceBatch& batch, double epsilon,
                    std::uint64_t tie_seed) {
  const ad::Tensor logits = model::eval_logits(model, batch.tokens, batch.batch, batch.length);
  const std::size_t K = model.bank.hypotheses;
  const auto flat = logits.reshaped({K * batch.batch, batch.length, model.config.vocab_size});
  const auto ll = mcl::sequence_loglik(flat, batch.tokens, batch.batch, batch.length);
  const auto winners = mcl::assign_winners(ll, tie_seed);
  const double per_token = 1.0 / static_cast<double>(batch.length - 1);
  Evaluation e;
  e.loss_per_token = mcl::wta_loss(ll, winners, 0.0) * per_token;
  e.loss_per_token_train_eps = K > 1 ? mcl::wta_loss(ll, winners, epsilon) * per_token : e.loss_per_token;
  for (std::size_t c : winners.counts(K)) {
    e.winner_fractions.push_back(static_cast<double>(c) / static_cast<double>(batch.batch));
  }
  return e;
}

RunResult run(model::Model model, const markov::MixtureSpec& mix, const TrainConfig& config,
              const ProgressFn& progress) {
  config.validate();
  mix.validate();
  const model::ModelConfig& mc = model.config;
  if (mix.vocab_size() != mc.vocab_size) throw DomainError("train: mixture and model vocabularies differ");
  if (config.seq_len > mc.max_len) throw DomainError("train: seq_len exceeds model max_len");
  const std::size_t K = model.bank.hypotheses;
  if (K == 1 && config.epsilon != 0.0) throw DomainError("train: epsilon must be 0 with a single hypothesis");
  mcl::wta_weights(mcl::WinnerAssignment{}, K, config.epsilon);  // range check

  const std::size_t T = config.seq_len;
  const std::size_t b = config.batch_size;
  const double per_token = 1.0 / static_cast<double>(T - 1);
  const std::uint64_t data_seed = derive_seed(config.seed, kTrainDataStream);
  const auto val_batch = markov::sample_batch(mix, config.val_size, T, derive_seed(config.seed, kValDataStream));
  const std::uint64_t val_tie_seed = derive_seed(config.seed, kValTieStream);
  Rng tie_rng(derive_seed(config.seed, kTieStream));

  std::vector<ad::Tensor*> params;
  model.bank.for_each([&](const std::string&, ad::Tensor& t) { params.push_back(&t); });
  AdamState adam;

  RunRecord record;
  record.hypotheses = K;
  double initial_val = 0.0;
  double train_acc = 0.0;
  std::size_t train_count = 0;

  auto validate_at = [&](std::size_t step, double lr) {
    const Evaluation e = evaluate(model, val_batch, config.epsilon, val_tie_seed);
    RunRow row;
    row.step = step;
    row.lr = lr;
    row.train_loss = train_count ? train_acc / static_cast<double>(train_count) : e.loss_per_token;
    row.val_loss = e.loss_per_token;
    row.val_loss_train_eps = e.loss_per_token_train_eps;
    row.winner_fractions = e.winner_fractions;
    train_acc = 0.0;
    train_count = 0;
    if (!std::isfinite(row.val_loss)) {
      throw DivergenceError("train: non-finite validation loss at step " + std::to_string(step));
    }
    if (step == 0) initial_val = row.val_loss;
    if (row.val_loss > config.divergence_factor * initial_val) {
      std::ostringstream os;
      os << "train: diverged at step " << step << ": validation loss " << row.val_loss << " exceeds "
         << config.divergence_factor << "x initial " << initial_val << " (lr " << lr << ")";
      throw DivergenceError(os.str());
    }
    record.rows.push_back(row);
    if (progress) progress(row);
  };

  validate_at(0, scheduled_lr(0, config));
  for (std::size_t step = 0; step < config.total_steps; ++step) {
    const double lr = scheduled_lr(step, config);
    const auto batch = markov::sample_batch(mix, b, T, derive_seed(data_seed, step));
    const std::vector<int> tiled = tile(batch.tokens, K);

    ad::Tape tape;
    const auto bound_base = model::bind(tape, model.base, false);
    const auto bound_bank = model::bind(tape, model.bank, true);
    model::ForwardOptions opts;
    opts.training = true;
    opts.dropout_seed = derive_seed(derive_seed(config.seed, kDropoutStream), step);
    ad::Var logits = model::grouped_forward(mc, bound_base, bound_bank, batch.tokens, b, T, opts);
    ad::Var ll = ad::sequence_log_likelihood(logits, tiled);

    mcl::SequenceLogLik llv;
    llv.hypotheses = K;
    llv.batch = b;
    llv.values = ll.value().buffer();
    const auto winners = mcl::assign_winners(llv, tie_rng);
    ad::Var loss = mcl::wta_loss(ll, winners, K, config.epsilon);
    tape.backward(loss);

    std::vector<ad::Tensor> grads;
    grads.reserve(params.size());
    for (const auto& blk : bound_bank.blocks) {
      for (const auto& [A, B] : blk) {
        grads.push_back(tape.grad(A));
        grads.push_back(tape.grad(B));
      }
    }
    if (config.grad_clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& g : grads) for (double v : g.values()) sq += v * v;
      const double norm = std::sqrt(sq);
      if (norm > config.grad_clip_norm) {
        const double f = config.grad_clip_norm / norm;
        for (auto& g : grads) for (double& v : g.values()) v *= f;
      }
    }
    adamw_step(params, grads, adam, lr, config);

    const double step_loss = loss.value()[0] * per_token;
    record.steps.push_back({step + 1, step_loss, winners.counts(K), winners.tie_count()});
    train_acc += step_loss;
    ++train_count;
    if ((step + 1) % config.val_every == 0 || step + 1 == config.total_steps) {
      validate_at(step + 1, lr);
    }
  }
  return {std::move(record), std::move(model)};
}

void write_run_csv(std::ostream& os, const RunRecord& record) {
  os << "step,lr,train_loss,val_loss,val_loss_train_eps";
  for (std::size_t k = 0; k < record.hypotheses; ++k) os << ",win_" << k;
  os << '\n';
  for (const auto& r : record.rows) {
    os << r.step << ',' << format_double(r.lr) << ',' << format_double(r.train_loss) << ','
       << format_double(r.val_loss) << ',' << format_double(r.val_loss_train_eps);
    for (double f : r.winner_fractions) os << ',' << format_double(f);
    os << '\n';
  }
}

void write_step_log_csv(std::ostream& os, const RunRecord& record) {
  os << "step,split,loss";
  for (std::size_t k = 0; k < record.hypotheses; ++k) os << ",count_" << k;
  os << ",ties\n";
  for (const auto& s : record.steps) {
    os << s.step << ",train," << format_double(s.loss);
    for (std::size_t c : s.winner_counts) os << ',' << c;
    os << ',' << s.ties << '\n';
  }
  for (const auto& r : record.rows) {
    os << r.step << ",val," << format_double(r.val_loss);
    for (double f : r.winner_fractions) os << ',' << format_double(f);
    os << ",\n";
  }
}

}  // namespace mclseq::train
