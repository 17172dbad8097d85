#include "mclseq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "mclseq/errors.hpp"

namespace mclseq::metrics {
namespace {

constexpr double kSmoothing = 1e-9;
constexpr std::size_t kMaxReferences = 8;

std::map<Sequence, std::size_t> ngram_counts(const Sequence& s, std::size_t n) {
  std::map<Sequence, std::size_t> counts;
  if (s.size() < n) return counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[Sequence(s.begin() + i, s.begin() + i + n)];
  return counts;
}

}  // namespace

double oracle_nll(const mcl::SequenceLogLik& ll, std::size_t length) {
  if (length < 2) throw InputError("oracle_nll: sequences need at least two tokens");
  if (ll.batch == 0 || ll.hypotheses == 0) throw InputError("oracle_nll: empty log-likelihood table");
  double total = 0.0;
  for (std::size_t i = 0; i < ll.batch; ++i) {
    double best = ll.at(0, i);
    for (std::size_t k = 1; k < ll.hypotheses; ++k) best = std::max(best, ll.at(k, i));
    total -= best;
  }
  return total / static_cast<double>(ll.batch) / static_cast<double>(length - 1);
}

double oracle_nll(const model::Model& model, const markov::SequenceBatch& data) {
  const ad::Tensor logits = model::eval_logits(model, data.tokens, data.batch, data.length);
  const std::size_t K = model.bank.hypotheses;
  const auto flat = logits.reshaped({K * data.batch, data.length, model.config.vocab_size});
  return oracle_nll(mcl::sequence_loglik(flat, data.tokens, data.batch, data.length), data.length);
}

double div_n(std::span<const Sequence> candidates, std::size_t n) {
  if (n == 0) throw DomainError("div_n: n must be positive");
  std::set<Sequence> distinct;
  std::size_t total = 0;
  for (const auto& c : candidates) {
    for (const auto& [g, count] : ngram_counts(c, n)) {
      distinct.insert(g);
      total += count;
    }
  }
  if (total == 0) throw InputError("div_n: candidates contain no " + std::to_string(n) + "-gram");
  return static_cast<double>(distinct.size()) / static_cast<double>(total);
}

Precision modified_precision(const Sequence& candidate, std::span<const Sequence> references, std::size_t n) {
  std::map<Sequence, std::size_t> max_ref;
  for (const auto& r : references) {
    for (const auto& [g, count] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], count);
  }
  Precision p;
  for (const auto& [g, count] : ngram_counts(candidate, n)) {
    const auto it = max_ref.find(g);
    p.matched += std::min(count, it == max_ref.end() ? 0 : it->second);
    p.total += count;
  }
  return p;
}

double bleu(const Sequence& candidate, std::span<const Sequence> references, const BleuOptions& options) {
  if (references.empty()) throw InputError("bleu: need at least one reference");
  if (options.max_n == 0) throw DomainError("bleu: max_n must be positive");
  if (candidate.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= options.max_n; ++n) {
    const Precision p = modified_precision(candidate, references, n);
    double prec = p.total ? static_cast<double>(p.matched) / static_cast<double>(p.total) : 0.0;
    if (prec == 0.0) {
      if (!options.smoothing) return 0.0;
      prec = kSmoothing;
    }
    log_sum += std::log(prec);
  }
  const double c = static_cast<double>(candidate.size());
  std::size_t r = references.front().size();
  for (const auto& ref : references) {
    const auto d = [&](std::size_t len) { return std::abs(static_cast<double>(len) - c); };
    if (d(ref.size()) < d(r) || (d(ref.size()) == d(r) && ref.size() < r)) r = ref.size();
  }
  const double bp = c > static_cast<double>(r) ? 1.0 : std::exp(1.0 - static_cast<double>(r) / c);
  return bp * std::exp(log_sum / static_cast<double>(options.max_n));
}

std::optional<double> self_bleu(std::span<const Sequence> candidates, const BleuOptions& options) {
  if (candidates.size() < 2) return std::nullopt;
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    std::vector<Sequence> others;
    for (std::size_t j = 0; j < candidates.size(); ++j) {
      if (j != i) others.push_back(candidates[j]);
    }
    total += bleu(candidates[i], others, options);
  }
  return total / static_cast<double>(candidates.size());
}

DiversityReport diversity(std::span<const Sequence> candidates) {
  DiversityReport r;
  r.count = candidates.size();
  r.div1 = div_n(candidates, 1);
  r.div2 = div_n(candidates, 2);
  r.mbleu4 = self_bleu(candidates);
  return r;
}

RecoveryReport recovery_error(std::span<const markov::TransitionMatrix> recovered,
                              std::span<const markov::TransitionMatrix> references) {
  if (recovered.empty()) throw InputError("recovery_error: no recovered matrices");
  if (recovered.size() > references.size()) throw InputError("recovery_error: more recovered matrices than references");
  if (references.size() > kMaxReferences) throw InputError("recovery_error: too many references to enumerate");
  const std::size_t K = recovered.size(), R = references.size();
  std::vector<std::vector<double>> err(K, std::vector<double>(R));
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t j = 0; j < R; ++j) {
      if (recovered[k].size() != references[j].size()) throw InputError("recovery_error: matrix sizes differ");
      err[k][j] = recovered[k].max_abs_diff(references[j]);
    }
  }
  std::vector<std::size_t> perm(R);
  std::iota(perm.begin(), perm.end(), 0);
  RecoveryReport best;
  best.max_error = std::numeric_limits<double>::infinity();
  do {
    double worst = 0.0;
    for (std::size_t k = 0; k < K; ++k) worst = std::max(worst, err[k][perm[k]]);
    if (worst < best.max_error) {
      best.max_error = worst;
      best.assignment.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(K));
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  for (std::size_t k = 0; k < K; ++k) best.errors.push_back(err[k][best.assignment[k]]);
  return best;
}

}  // namespace mclseq::metrics
