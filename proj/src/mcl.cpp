#include "mclseq/mcl.hpp"

#include <algorithm>
#include <cmath>

#include "mclseq/errors.hpp"

namespace mclseq::mcl {

SequenceLogLik SequenceLogLik::from_rows(const std::vector<std::vector<double>>& rows) {
  SequenceLogLik ll;
  ll.hypotheses = rows.size();
  ll.batch = rows.empty() ? 0 : rows.front().size();
  for (const auto& r : rows) {
    if (r.size() != ll.batch) throw ShapeError("SequenceLogLik: ragged rows");
    ll.values.insert(ll.values.end(), r.begin(), r.end());
  }
  return ll;
}

std::size_t WinnerAssignment::tie_count() const {
  return static_cast<std::size_t>(std::count(tie_broken.begin(), tie_broken.end(), 1));
}

std::vector<std::size_t> WinnerAssignment::counts(std::size_t hypotheses) const {
  std::vector<std::size_t> c(hypotheses, 0);
  for (std::size_t w : winners) ++c.at(w);
  return c;
}

SequenceLogLik sequence_loglik(const ad::Tensor& logits, std::span<const int> tokens, std::size_t batch,
                               std::size_t length) {
  if (logits.rank() != 3 || logits.dim(1) != length || batch == 0 || logits.dim(0) % batch != 0) {
    throw ShapeError("sequence_loglik: logits " + ad::shape_string(logits.shape()) + " do not match b=" +
                     std::to_string(batch) + ", T=" + std::to_string(length));
  }
  const std::size_t K = logits.dim(0) / batch;
  std::vector<int> tiled;
  tiled.reserve(K * tokens.size());
  for (std::size_t k = 0; k < K; ++k) tiled.insert(tiled.end(), tokens.begin(), tokens.end());
  ad::Tape tape;
  ad::Var ll = ad::sequence_log_likelihood(tape.constant(logits), tiled);
  SequenceLogLik out;
  out.hypotheses = K;
  out.batch = batch;
  out.values = ll.value().buffer();
  return out;
}

WinnerAssignment assign_winners(const SequenceLogLik& ll, Rng& rng) {
  WinnerAssignment w;
  w.winners.resize(ll.batch);
  w.tie_broken.assign(ll.batch, 0);
  std::vector<std::size_t> tied;
  for (std::size_t i = 0; i < ll.batch; ++i) {
    double best = ll.at(0, i);
    for (std::size_t k = 1; k < ll.hypotheses; ++k) best = std::max(best, ll.at(k, i));
    tied.clear();
    for (std::size_t k = 0; k < ll.hypotheses; ++k) {
      if (best - ll.at(k, i) < kTieTolerance) tied.push_back(k);
    }
    if (tied.size() == 1) {
      w.winners[i] = tied.front();
    } else {
      w.winners[i] = tied[rng.below(tied.size())];
      w.tie_broken[i] = 1;
    }
  }
  return w;
}

WinnerAssignment assign_winners(const SequenceLogLik& ll, std::uint64_t seed) {
  Rng rng(seed);
  return assign_winners(ll, rng);
}

std::vector<double> wta_weights(const WinnerAssignment& w, std::size_t hypotheses, double epsilon) {
  if (hypotheses == 0) throw DomainError("wta_weights: no hypotheses");
  const double max_eps = static_cast<double>(hypotheses - 1) / static_cast<double>(hypotheses);
  if (!(epsilon >= 0.0 && epsilon <= max_eps + 1e-15)) {
    throw DomainError("wta_loss: epsilon must lie in [0, (K-1)/K]");
  }
  const std::size_t b = w.winners.size();
  const double other = hypotheses > 1 ? epsilon / static_cast<double>(hypotheses - 1) : 0.0;
  std::vector<double> q(hypotheses * b, other);
  for (std::size_t i = 0; i < b; ++i) q[w.winners[i] * b + i] = 1.0 - epsilon;
  return q;
}

double wta_loss(const SequenceLogLik& ll, const WinnerAssignment& winners, double epsilon) {
  if (winners.winners.size() != ll.batch) throw ShapeError("wta_loss: winners do not match batch");
  const auto q = wta_weights(winners, ll.hypotheses, epsilon);
  double total = 0.0;
  for (std::size_t i = 0; i < ll.batch; ++i) {
    double col = 0.0;
    for (std::size_t k = 0; k < ll.hypotheses; ++k) col += q[k * ll.batch + i] * ll.at(k, i);
    total += col;
  }
  return -total / static_cast<double>(ll.batch);
}

double mle_loss(const SequenceLogLik& ll) {
  if (ll.hypotheses != 1) throw ContractError("mle_loss: requires exactly one hypothesis");
  double total = 0.0;
  for (std::size_t i = 0; i < ll.batch; ++i) total += 1.0 * ll.at(0, i);
  return -total / static_cast<double>(ll.batch);
}

ad::Var wta_loss(ad::Var ll, const WinnerAssignment& winners, std::size_t hypotheses, double epsilon) {
  const std::size_t b = winners.winners.size();
  if (ll.value().size() != hypotheses * b) {
    throw ShapeError("wta_loss: log-likelihood " + ad::shape_string(ll.shape()) + " does not match K x b");
  }
  const auto q = wta_weights(winners, hypotheses, epsilon);
  ad::Tensor w(ad::Shape{hypotheses * b});
  for (std::size_t i = 0; i < q.size(); ++i) w[i] = -q[i] / static_cast<double>(b);
  return ad::weighted_sum(ll, w);
}

}  // namespace mclseq::mcl
