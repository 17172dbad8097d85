#pragma once

// Mixtures of first-order homogeneous Markov chains: sampling and the
// analytical quantities used as reference values for training (stationary
// laws, entropy rates, entropy bands, the maximum-likelihood limit matrix).

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace mclseq::markov {

/// Row-stochastic square matrix over a finite vocabulary.
class TransitionMatrix {
 public:
  TransitionMatrix() = default;

  /// Validates shape and stochasticity (rows sum to 1 within 1e-12).
  static TransitionMatrix from_rows(const std::vector<std::vector<double>>& rows);
  /// Row-major flat buffer of size n*n.
  static TransitionMatrix from_flat(std::size_t n, std::vector<double> entries);
  static TransitionMatrix identity(std::size_t n);

  std::size_t size() const { return n_; }
  double operator()(std::size_t from, std::size_t to) const { return p_[from * n_ + to]; }
  std::span<const double> row(std::size_t i) const { return {p_.data() + i * n_, n_}; }
  const std::vector<double>& entries() const { return p_; }

  double max_abs_diff(const TransitionMatrix& other) const;

 private:
  TransitionMatrix(std::size_t n, std::vector<double> p) : n_(n), p_(std::move(p)) {}
  std::size_t n_ = 0;
  std::vector<double> p_;
};

struct StationaryDistribution {
  std::vector<double> probs;
};

struct MixtureSpec {
  std::vector<TransitionMatrix> components;
  std::vector<double> weights;

  /// Uniform weights 1/K.
  static MixtureSpec uniform(std::vector<TransitionMatrix> components);
  /// Throws DomainError if K == 0, weights are not a distribution, or sizes differ.
  void validate() const;

  std::size_t num_components() const { return components.size(); }
  std::size_t vocab_size() const { return components.empty() ? 0 : components.front().size(); }
};

/// b x T token grid. `mode_labels` is ground truth for diagnostics only.
struct SequenceBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> tokens;
  std::vector<int> mode_labels;

  int at(std::size_t i, std::size_t t) const { return tokens[i * length + t]; }
  std::span<const int> row(std::size_t i) const { return {tokens.data() + i * length, length}; }
};

/// [[1-p, p], [q, 1-q]].
TransitionMatrix two_state_matrix(double p, double q);

/// Power iteration from the uniform vector; at most 10,000 iterations,
/// stops when ||pi P - pi||_1 < 1e-13. Throws ConvergenceError otherwise
/// (e.g. periodic chains whose stationary law is not uniform).
StationaryDistribution stationary(const TransitionMatrix& P);

/// Closed form (q, p) / (p + q) for the two-state chain.
StationaryDistribution two_state_stationary(double p, double q);

/// Row i: z ~ weights, x_1 ~ stationary(P_z), x_{t+1} ~ P_z[x_t, .].
/// Row i uses the sub-stream derive_seed(seed, i).
SequenceBatch sample_batch(const MixtureSpec& mix, std::size_t batch, std::size_t length,
                           std::uint64_t seed);

/// -sum_i pi_i sum_j P_ij log P_ij in nats (0 log 0 = 0).
double entropy_rate(const TransitionMatrix& P);

/// H(x | z) over positions 2..T: (T - 1) * sum_k w_k entropy_rate(P_k).
double conditional_entropy(const MixtureSpec& mix, std::size_t length);

enum class EntropyEstimator {
  /// -log of the mixture predictive p(x_t | x_<t), posterior over components
  /// updated by Bayes from the weighted stationary prior. Estimates H(x_2..T | x_1).
  MixtureMarginal,
  /// Each sample scored against its own component matrix. Estimates H(x | z).
  PerComponent,
};

struct MonteCarloEstimate {
  double estimate = 0.0;
  double std_error = 0.0;
};

/// Monte-Carlo sequence entropy (nats per sequence, first token excluded).
MonteCarloEstimate marginal_entropy_mc(const MixtureSpec& mix, std::size_t length,
                                       std::size_t samples, std::uint64_t seed,
                                       EntropyEstimator estimator = EntropyEstimator::MixtureMarginal);

/// Stationary-weighted average transition matrix reached by a single
/// maximum-likelihood model trained on a uniform mixture.
TransitionMatrix mle_limit_matrix(const MixtureSpec& mix);

struct EntropyBounds {
  double lower = 0.0;      ///< mle_floor - log K
  double upper = 0.0;      ///< H(x | z)
  double mle_floor = 0.0;  ///< Monte-Carlo H(x)
  double std_error = 0.0;     ///< standard error of mle_floor
};

/// Throws ConsistencyError if lower <= upper <= mle_floor fails by more
/// than three standard errors.
EntropyBounds mcl_bounds(const MixtureSpec& mix, std::size_t length, std::size_t samples,
                         std::uint64_t seed);

}  // namespace mclseq::markov
