#pragma once

// Winner-takes-all objectives over K hypotheses: per-sequence
// log-likelihoods, winner assignment, hard and relaxed WTA losses.

#include <cstdint>
#include <span>
#include <vector>

#include "mclseq/autodiff.hpp"
#include "mclseq/rng.hpp"

namespace mclseq::mcl {

/// K x b grid of per-sequence log-likelihoods (nats, positions 2..T).
struct SequenceLogLik {
  std::size_t hypotheses = 0;
  std::size_t batch = 0;
  std::vector<double> values;

  double at(std::size_t k, std::size_t i) const { return values[k * batch + i]; }
  double& at(std::size_t k, std::size_t i) { return values[k * batch + i]; }
  static SequenceLogLik from_rows(const std::vector<std::vector<double>>& rows);
};

struct WinnerAssignment {
  std::vector<std::size_t> winners;
  /// 1 where the maximum was shared and the winner was drawn at random.
  std::vector<std::uint8_t> tie_broken;

  std::size_t tie_count() const;
  /// Number of samples won by each of K hypotheses.
  std::vector<std::size_t> counts(std::size_t hypotheses) const;
};

/// Entries closer than this to the column maximum count as tied.
inline constexpr double kTieTolerance = 1e-12;

/// logits [K*b, T, V] (hypothesis-major), tokens [b, T].
SequenceLogLik sequence_loglik(const ad::Tensor& logits, std::span<const int> tokens, std::size_t batch,
                               std::size_t length);

/// Column-wise argmax; ties broken uniformly at random with `rng`.
WinnerAssignment assign_winners(const SequenceLogLik& ll, Rng& rng);
WinnerAssignment assign_winners(const SequenceLogLik& ll, std::uint64_t seed);

/// K x b weights: 1 - eps for the winner, eps / (K - 1) elsewhere.
/// Throws DomainError unless eps lies in [0, (K-1)/K] (eps = 0 when K = 1).
std::vector<double> wta_weights(const WinnerAssignment& w, std::size_t hypotheses, double epsilon);

/// -(1/b) sum_i sum_k q_k ll[k, i]. Divide by (T - 1) for a per-token value.
double wta_loss(const SequenceLogLik& ll, const WinnerAssignment& winners, double epsilon);

/// -(1/b) sum_i ll[0, i]. Throws ContractError unless K == 1.
double mle_loss(const SequenceLogLik& ll);

/// Differentiable WTA loss over a [K*b] or [K, b] log-likelihood Var.
ad::Var wta_loss(ad::Var ll, const WinnerAssignment& winners, std::size_t hypotheses, double epsilon);

}  // namespace mclseq::mcl
