#pragma once

// Likelihood, diversity and mode-recovery measurements.

#include <optional>
#include <span>
#include <vector>

#include "mclseq/markov.hpp"
#include "mclseq/mcl.hpp"
#include "mclseq/model.hpp"

namespace mclseq::metrics {

using Sequence = std::vector<int>;

/// Mean over sequences of -max_k log p(x | theta_k) / (T - 1).
double oracle_nll(const mcl::SequenceLogLik& ll, std::size_t length);
double oracle_nll(const model::Model& model, const markov::SequenceBatch& data);

/// Distinct n-grams across the set divided by the total number of n-grams.
/// Throws InputError when the set holds no n-gram.
double div_n(std::span<const Sequence> candidates, std::size_t n);

/// Clipped n-gram precision as (numerator, denominator).
struct Precision {
  std::size_t matched = 0;
  std::size_t total = 0;
};
Precision modified_precision(const Sequence& candidate, std::span<const Sequence> references, std::size_t n);

struct BleuOptions {
  std::size_t max_n = 4;
  /// Replace zero precisions by 1e-9 instead of returning 0.
  bool smoothing = false;
};
/// Geometric mean of the modified precisions for n = 1..max_n times the
/// brevity penalty against the reference closest in length (shorter wins ties).
double bleu(const Sequence& candidate, std::span<const Sequence> references, const BleuOptions& options = {});

/// Mean BLEU of each candidate against all the others; empty for fewer than two.
std::optional<double> self_bleu(std::span<const Sequence> candidates, const BleuOptions& options = {});

struct DiversityReport {
  double div1 = 0.0;
  double div2 = 0.0;
  std::optional<double> mbleu4;
  std::size_t count = 0;
};
DiversityReport diversity(std::span<const Sequence> candidates);

struct RecoveryReport {
  /// assignment[k] is the reference matched to recovered matrix k.
  std::vector<std::size_t> assignment;
  std::vector<double> errors;
  double max_error = 0.0;
};
/// Matches recovered matrices to distinct references (all injective
/// assignments, at most 8 references) minimizing the largest max-abs-entry error.
RecoveryReport recovery_error(std::span<const markov::TransitionMatrix> recovered,
                              std::span<const markov::TransitionMatrix> references);

}  // namespace mclseq::metrics
