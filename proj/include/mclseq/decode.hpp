#pragma once

// Decoding strategies over a next-token model with K hypotheses.

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mclseq/markov.hpp"
#include "mclseq/model.hpp"

namespace mclseq::decode {

enum class Strategy { Greedy, Beam, DiverseBeam, TopK, TopP, Typical };

const char* strategy_name(Strategy s);
/// Accepts greedy, beam, dbs, top_k, top_p, typical. Throws InputError otherwise.
Strategy parse_strategy(const std::string& name);
bool is_sampling(Strategy s);

struct DecodeConfig {
  Strategy strategy = Strategy::Greedy;
  std::size_t beam_size = 1;
  std::size_t dbs_groups = 1;
  double dbs_lambda = 0.0;
  std::size_t top_k = 50;
  double top_p = 0.95;
  double typical_tau = 0.95;
  double repetition_penalty = 1.1;
  double temperature = 1.0;
  /// Total sequence length, prompt included.
  std::size_t max_len = 32;
  /// Tokens every candidate starts with.
  std::vector<int> prompt{0};
  /// Generation stops early for a sequence that emits this token.
  std::optional<int> eos;
  std::uint64_t seed = 0;

  /// Throws DomainError on invalid settings.
  void validate() const;
};

/// Next-token model. Counts one forward per prefix evaluated.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::size_t hypotheses() const = 0;
  virtual std::size_t max_len() const = 0;

  /// Next-token logits after each prefix; all prefixes share one length.
  std::vector<std::vector<double>> next_logits(std::size_t k, const std::vector<std::vector<int>>& prefixes) const;

  std::size_t forward_count() const { return forwards_; }
  void reset_forward_count() { forwards_ = 0; }

 protected:
  virtual std::vector<std::vector<double>> compute_logits(
      std::size_t k, const std::vector<std::vector<int>>& prefixes) const = 0;

 private:
  mutable std::size_t forwards_ = 0;
};

/// A trained transformer; adapters are merged once per hypothesis.
class TransformerLM final : public LanguageModel {
 public:
  explicit TransformerLM(const model::Model& model);
  std::size_t vocab_size() const override { return config_.vocab_size; }
  std::size_t hypotheses() const override { return merged_.size(); }
  std::size_t max_len() const override { return config_.max_len; }

 protected:
  std::vector<std::vector<double>> compute_logits(std::size_t k,
                                                  const std::vector<std::vector<int>>& prefixes) const override;

 private:
  model::ModelConfig config_;
  std::vector<model::BaseParameters> merged_;
};

/// Hypothesis k is a first-order chain with logits log P_k[last token].
class MarkovChainLM final : public LanguageModel {
 public:
  explicit MarkovChainLM(std::vector<markov::TransitionMatrix> chains, std::size_t max_len = 1024);
  std::size_t vocab_size() const override { return chains_.front().size(); }
  std::size_t hypotheses() const override { return chains_.size(); }
  std::size_t max_len() const override { return max_len_; }

 protected:
  std::vector<std::vector<double>> compute_logits(std::size_t k,
                                                  const std::vector<std::vector<int>>& prefixes) const override;

 private:
  std::vector<markov::TransitionMatrix> chains_;
  std::size_t max_len_;
};

struct Candidate {
  std::vector<int> tokens;
  /// Sum of log step-distribution probabilities (penalty and temperature applied).
  double score = 0.0;
  /// Sum of raw model log-probabilities of the generated tokens.
  double model_logprob = 0.0;
  std::size_t hypothesis = 0;
  Strategy strategy = Strategy::Greedy;
};

struct CandidateSet {
  std::vector<Candidate> candidates;
  /// Prefix evaluations spent and the budget they were checked against.
  std::size_t forwards = 0;
  std::size_t forward_budget = 0;
};

/// Repetition penalty on seen tokens (positive logits divided, negative
/// multiplied), then softmax(logits / temperature).
std::vector<double> apply_step_rules(std::span<const double> logits, std::span<const int> prefix,
                                     const DecodeConfig& config);
std::vector<double> step_distribution(const LanguageModel& model, std::size_t k, std::span<const int> prefix,
                                      const DecodeConfig& config);

/// Renormalized truncation of `probs` for a sampling strategy. Order of
/// preference is by probability (top_k, top_p) or by distance to the
/// entropy (typical); ties go to the lower token index.
std::vector<double> truncate(std::span<const double> probs, Strategy strategy, const DecodeConfig& config);

Candidate greedy(const LanguageModel& model, std::size_t k, const DecodeConfig& config);
/// Up to B sequences, best first. No length normalization; equal scores are
/// ordered lexicographically by token sequence.
std::vector<Candidate> beam(const LanguageModel& model, std::size_t k, std::size_t B, const DecodeConfig& config);
/// G groups of B / G beams with the Hamming diversity penalty, returned
/// group by group.
std::vector<Candidate> diverse_beam(const LanguageModel& model, std::size_t k, std::size_t groups,
                                    std::size_t B, double lambda, const DecodeConfig& config);
/// One sequence drawn with `config.strategy` (top_k, top_p or typical) and `seed`.
Candidate sample(const LanguageModel& model, std::size_t k, const DecodeConfig& config, std::uint64_t seed);

/// n candidates split evenly over the model's hypotheses. Beam searches run
/// with beam_size / K beams per hypothesis and keep their best n / K.
CandidateSet decode_all(const LanguageModel& model, std::size_t n_candidates, const DecodeConfig& config);

/// One record per line: tokens (space separated), score, hypothesis, strategy; tab separated.
void write_candidates(std::ostream& os, const CandidateSet& set);

}  // namespace mclseq::decode
