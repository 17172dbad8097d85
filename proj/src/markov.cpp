#include "mclseq/markov.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mclseq/errors.hpp"
#include "mclseq/rng.hpp"

namespace mclseq::markov {
namespace {

constexpr double kRowTolerance = 1e-12;
constexpr double kZeroThreshold = 1e-300;
constexpr int kMaxPowerIterations = 10000;
constexpr double kResidualStop = 1e-13;

double xlogx(double p) { return p < kZeroThreshold ? 0.0 : p * std::log(p); }

std::string describe(const TransitionMatrix& P) {
  std::ostringstream os;
  os.precision(6);
  os << "[";
  for (std::size_t i = 0; i < P.size(); ++i) {
    os << (i ? "; " : "");
    for (std::size_t j = 0; j < P.size(); ++j) os << (j ? " " : "") << P(i, j);
  }
  os << "]";
  return os.str();
}

}  // namespace

TransitionMatrix TransitionMatrix::from_flat(std::size_t n, std::vector<double> entries) {
  if (n == 0 || entries.size() != n * n) {
    throw DomainError("transition matrix must be square and non-empty");
  }
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = entries[i * n + j];
      if (!(v >= 0.0 && v <= 1.0)) {
        throw DomainError("transition matrix entry outside [0,1] at row " + std::to_string(i));
      }
      sum += v;
    }
    if (std::abs(sum - 1.0) > kRowTolerance) {
      throw DomainError("transition matrix row " + std::to_string(i) + " does not sum to 1");
    }
  }
  return TransitionMatrix(n, std::move(entries));
}

TransitionMatrix TransitionMatrix::from_rows(const std::vector<std::vector<double>>& rows) {
  const std::size_t n = rows.size();
  std::vector<double> flat;
  flat.reserve(n * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw DomainError("transition matrix must be square");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return from_flat(n, std::move(flat));
}

TransitionMatrix TransitionMatrix::identity(std::size_t n) {
  std::vector<double> flat(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) flat[i * n + i] = 1.0;
  return from_flat(n, std::move(flat));
}

double TransitionMatrix::max_abs_diff(const TransitionMatrix& other) const {
  if (other.n_ != n_) throw ShapeError("max_abs_diff: matrix sizes differ");
  double m = 0.0;
  for (std::size_t i = 0; i < p_.size(); ++i) m = std::max(m, std::abs(p_[i] - other.p_[i]));
  return m;
}

MixtureSpec MixtureSpec::uniform(std::vector<TransitionMatrix> components) {
  MixtureSpec mix;
  const std::size_t k = components.size();
  mix.components = std::move(components);
  mix.weights.assign(k, k ? 1.0 / static_cast<double>(k) : 0.0);
  mix.validate();
  return mix;
}

void MixtureSpec::validate() const {
  if (components.empty()) throw DomainError("mixture needs at least one component");
  if (weights.size() != components.size()) {
    throw DomainError("mixture weights length differs from component count");
  }
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0 && w <= 1.0)) throw DomainError("mixture weight outside [0,1]");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw DomainError("mixture weights do not sum to 1");
  for (const auto& c : components) {
    if (c.size() != components.front().size() || c.size() == 0) {
      throw DomainError("mixture components must share one vocabulary size");
    }
  }
}

TransitionMatrix two_state_matrix(double p, double q) {
  if (!(p >= 0.0 && p <= 1.0) || !(q >= 0.0 && q <= 1.0)) {
    throw DomainError("two_state_matrix: p and q must lie in [0,1]");
  }
  return TransitionMatrix::from_rows({{1.0 - p, p}, {q, 1.0 - q}});
}

StationaryDistribution two_state_stationary(double p, double q) {
  if (!(p + q > 0.0)) throw DomainError("two_state_stationary: p + q must be positive");
  return {{q / (p + q), p / (p + q)}};
}

StationaryDistribution stationary(const TransitionMatrix& P) {
  const std::size_t n = P.size();
  std::vector<double> pi(n, 1.0 / static_cast<double>(n));
  std::vector<double> next(n);
  for (int it = 0; it < kMaxPowerIterations; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) next[j] += pi[i] * P(i, j);
    }
    double residual = 0.0;
    for (std::size_t j = 0; j < n; ++j) residual += std::abs(next[j] - pi[j]);
    pi.swap(next);
    if (residual < kResidualStop) {
      const double total = std::accumulate(pi.begin(), pi.end(), 0.0);
      for (double& v : pi) v /= total;
      return {std::move(pi)};
    }
  }
  throw ConvergenceError("stationary: power iteration did not converge for " + describe(P) +
                         " (reducible or periodic chain)");
}

SequenceBatch sample_batch(const MixtureSpec& mix, std::size_t batch, std::size_t length,
                           std::uint64_t seed) {
  mix.validate();
  if (length < 2) throw DomainError("sample_batch: sequence length must be at least 2");
  std::vector<StationaryDistribution> stat;
  stat.reserve(mix.num_components());
  for (const auto& c : mix.components) stat.push_back(stationary(c));

  SequenceBatch out;
  out.batch = batch;
  out.length = length;
  out.tokens.resize(batch * length);
  out.mode_labels.resize(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    Rng rng(derive_seed(seed, i));
    const std::size_t z = rng.categorical(mix.weights);
    const auto& P = mix.components[z];
    out.mode_labels[i] = static_cast<int>(z);
    int x = static_cast<int>(rng.categorical(stat[z].probs));
    out.tokens[i * length] = x;
    for (std::size_t t = 1; t < length; ++t) {
      x = static_cast<int>(rng.categorical(P.row(static_cast<std::size_t>(x))));
      out.tokens[i * length + t] = x;
    }
  }
  return out;
}

double entropy_rate(const TransitionMatrix& P) {
  const auto pi = stationary(P);
  double h = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < P.size(); ++j) row -= xlogx(P(i, j));
    h += pi.probs[i] * row;
  }
  return h;
}

double conditional_entropy(const MixtureSpec& mix, std::size_t length) {
  mix.validate();
  if (length < 2) throw DomainError("conditional_entropy: sequence length must be at least 2");
  double h = 0.0;
  for (std::size_t k = 0; k < mix.num_components(); ++k) {
    h += mix.weights[k] * entropy_rate(mix.components[k]);
  }
  return static_cast<double>(length - 1) * h;
}

MonteCarloEstimate marginal_entropy_mc(const MixtureSpec& mix, std::size_t length,
                                       std::size_t samples, std::uint64_t seed,
                                       EntropyEstimator estimator) {
  mix.validate();
  if (samples == 0) throw DomainError("marginal_entropy_mc: need at least one sample");
  if (length < 2) throw DomainError("marginal_entropy_mc: sequence length must be at least 2");
  const std::size_t K = mix.num_components();
  std::vector<StationaryDistribution> stat;
  for (const auto& c : mix.components) stat.push_back(stationary(c));

  // Sequences are drawn one at a time so memory stays O(T) for large N.
  // Welford running moments.
  double mean = 0.0;
  double m2 = 0.0;
  std::vector<double> posterior(K);
  std::vector<int> seq(length);
  for (std::size_t s = 0; s < samples; ++s) {
    Rng rng(derive_seed(seed, s));
    const std::size_t z = rng.categorical(mix.weights);
    const auto& Pz = mix.components[z];
    seq[0] = static_cast<int>(rng.categorical(stat[z].probs));
    for (std::size_t t = 1; t < length; ++t) {
      seq[t] = static_cast<int>(rng.categorical(Pz.row(static_cast<std::size_t>(seq[t - 1]))));
    }

    double nll = 0.0;
    if (estimator == EntropyEstimator::PerComponent) {
      for (std::size_t t = 1; t < length; ++t) {
        nll -= std::log(Pz(static_cast<std::size_t>(seq[t - 1]), static_cast<std::size_t>(seq[t])));
      }
    } else {
      double norm = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        posterior[k] = mix.weights[k] * stat[k].probs[static_cast<std::size_t>(seq[0])];
        norm += posterior[k];
      }
      for (double& p : posterior) p /= norm;
      for (std::size_t t = 1; t < length; ++t) {
        const auto from = static_cast<std::size_t>(seq[t - 1]);
        const auto to = static_cast<std::size_t>(seq[t]);
        double predictive = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          posterior[k] *= mix.components[k](from, to);
          predictive += posterior[k];
        }
        if (predictive < kZeroThreshold) {
          throw NumericError("marginal_entropy_mc: transition " + std::to_string(from) + "->" +
                             std::to_string(to) + " at position " + std::to_string(t + 1) +
                             " has zero probability under every component");
        }
        nll -= std::log(predictive);
        for (double& p : posterior) p /= predictive;
      }
    }
    const double delta = nll - mean;
    mean += delta / static_cast<double>(s + 1);
    m2 += delta * (nll - mean);
  }
  const double n = static_cast<double>(samples);
  const double var = samples > 1 ? m2 / (n - 1.0) : 0.0;
  return {mean, std::sqrt(var / n)};
}

TransitionMatrix mle_limit_matrix(const MixtureSpec& mix) {
  mix.validate();
  const std::size_t n = mix.vocab_size();
  const double w0 = mix.weights.front();
  for (double w : mix.weights) {
    if (std::abs(w - w0) > 1e-12) throw DomainError("mle_limit_matrix: requires uniform mixture weights");
  }
  std::vector<double> numer(n * n, 0.0);
  std::vector<double> denom(n, 0.0);
  for (const auto& P : mix.components) {
    const auto pi = stationary(P);
    for (std::size_t i = 0; i < n; ++i) {
      denom[i] += pi.probs[i];
      for (std::size_t j = 0; j < n; ++j) numer[i * n + j] += pi.probs[i] * P(i, j);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (denom[i] < kZeroThreshold) {
      // State never visited by any component: keep the plain average row.
      for (std::size_t j = 0; j < n; ++j) {
        double avg = 0.0;
        for (const auto& P : mix.components) avg += P(i, j);
        numer[i * n + j] = avg / static_cast<double>(mix.num_components());
      }
      continue;
    }
    double row_sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      numer[i * n + j] /= denom[i];
      row_sum += numer[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) numer[i * n + j] /= row_sum;
  }
  return TransitionMatrix::from_flat(n, std::move(numer));
}

EntropyBounds mcl_bounds(const MixtureSpec& mix, std::size_t length, std::size_t samples,
                         std::uint64_t seed) {
  const auto mc = marginal_entropy_mc(mix, length, samples, seed);
  EntropyBounds b;
  b.mle_floor = mc.estimate;
  b.std_error = mc.std_error;
  b.lower = mc.estimate - std::log(static_cast<double>(mix.num_components()));
  b.upper = conditional_entropy(mix, length);
  const double slack = 3.0 * mc.std_error + 1e-9;
  if (b.lower > b.upper + slack || b.upper > b.mle_floor + slack) {
    std::ostringstream os;
    os << "mcl_bounds: ordering violated: lower=" << b.lower << " upper=" << b.upper
       << " mle_floor=" << b.mle_floor << " std_error=" << b.std_error;
    throw ConsistencyError(os.str());
  }
  return b;
}

}  // namespace mclseq::markov
