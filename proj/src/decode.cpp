#include "mclseq/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include "mclseq/errors.hpp"
#include "mclseq/format.hpp"
#include "mclseq/rng.hpp"

namespace mclseq::decode {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<double> log_softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  if (!std::isfinite(mx)) throw NumericError("decode: no finite logit");
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
  return out;
}

void check_prompt(const LanguageModel& model, const DecodeConfig& config) {
  config.validate();
  if (config.max_len > model.max_len()) {
    throw DomainError("decode: max_len " + std::to_string(config.max_len) + " exceeds model context of " +
                      std::to_string(model.max_len()));
  }
  for (int t : config.prompt) {
    if (t < 0 || static_cast<std::size_t>(t) >= model.vocab_size()) {
      throw InputError("decode: prompt token " + std::to_string(t) + " outside vocabulary");
    }
  }
}

struct Beam {
  std::vector<int> tokens;
  double score = 0.0;
  double raw = 0.0;
  /// Selection objective; equals score unless a diversity penalty applies.
  double objective = 0.0;
  bool done = false;
};

bool better(const Beam& a, const Beam& b) {
  if (a.objective != b.objective) return a.objective > b.objective;
  return a.tokens < b.tokens;
}

bool finished(const Beam& b, const DecodeConfig& config) {
  return b.done || b.tokens.size() >= config.max_len;
}

/// Every one-token extension of the active beams (finished beams carry over).
/// `penalty[v]` is subtracted from the objective of extensions by token v.
std::vector<Beam> expand(const LanguageModel& model, std::size_t k, const std::vector<Beam>& beams,
                         std::span<const double> penalty, const DecodeConfig& config) {
  std::vector<Beam> out;
  std::vector<std::vector<int>> prefixes;
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < beams.size(); ++i) {
    if (finished(beams[i], config)) {
      out.push_back(beams[i]);
    } else {
      prefixes.push_back(beams[i].tokens);
      active.push_back(i);
    }
  }
  if (prefixes.empty()) return out;
  const auto logits = model.next_logits(k, prefixes);
  for (std::size_t a = 0; a < active.size(); ++a) {
    const Beam& parent = beams[active[a]];
    const auto probs = apply_step_rules(logits[a], parent.tokens, config);
    const auto raw = log_softmax(logits[a]);
    for (std::size_t v = 0; v < probs.size(); ++v) {
      if (probs[v] <= 0.0) continue;
      Beam c = parent;
      const double lp = std::log(probs[v]);
      c.tokens.push_back(static_cast<int>(v));
      c.score += lp;
      c.raw += raw[v];
      c.objective += lp - (penalty.empty() ? 0.0 : penalty[v]);
      c.done = config.eos && *config.eos == static_cast<int>(v);
      out.push_back(std::move(c));
    }
  }
  return out;
}

std::vector<Beam> keep_best(std::vector<Beam> pool, std::size_t n) {
  const std::size_t m = std::min(n, pool.size());
  std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(m), pool.end(), better);
  pool.resize(m);
  return pool;
}

Candidate to_candidate(const Beam& b, std::size_t k, Strategy s) {
  return Candidate{b.tokens, b.score, b.raw, k, s};
}

std::size_t steps_of(const DecodeConfig& config) { return config.max_len - config.prompt.size(); }

}  // namespace

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Greedy: return "greedy";
    case Strategy::Beam: return "beam";
    case Strategy::DiverseBeam: return "dbs";
    case Strategy::TopK: return "top_k";
    case Strategy::TopP: return "top_p";
    case Strategy::Typical: return "typical";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  for (Strategy s : {Strategy::Greedy, Strategy::Beam, Strategy::DiverseBeam, Strategy::TopK, Strategy::TopP,
                     Strategy::Typical}) {
    if (name == strategy_name(s)) return s;
  }
  throw InputError("unknown decoding strategy '" + name + "' (expected greedy, beam, dbs, top_k, top_p, typical)");
}

bool is_sampling(Strategy s) { return s == Strategy::TopK || s == Strategy::TopP || s == Strategy::Typical; }

void DecodeConfig::validate() const {
  if (beam_size < 1) throw DomainError("decode: beam size must be at least 1");
  if (dbs_groups < 1) throw DomainError("decode: need at least one group");
  if (strategy == Strategy::DiverseBeam && beam_size % dbs_groups != 0) {
    throw DomainError("decode: groups must divide the beam size");
  }
  if (!(dbs_lambda >= 0.0)) throw DomainError("decode: diversity penalty must be non-negative");
  if (top_k < 1) throw DomainError("decode: top_k must be at least 1");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw DomainError("decode: top_p must lie in (0,1]");
  if (!(typical_tau > 0.0 && typical_tau <= 1.0)) throw DomainError("decode: typical threshold must lie in (0,1]");
  if (!(repetition_penalty > 0.0)) throw DomainError("decode: repetition penalty must be positive");
  if (!(temperature > 0.0)) throw DomainError("decode: temperature must be positive");
  if (prompt.empty()) throw DomainError("decode: prompt must hold at least one token");
  if (prompt.size() >= max_len) throw DomainError("decode: prompt must be shorter than max_len");
}

// Models -----------------------------------------------------------------------

std::vector<std::vector<double>> LanguageModel::next_logits(std::size_t k,
                                                            const std::vector<std::vector<int>>& prefixes) const {
  if (k >= hypotheses()) throw InputError("decode: hypothesis index out of range");
  if (prefixes.empty()) return {};
  const std::size_t len = prefixes.front().size();
  if (len == 0) throw InputError("decode: empty prefix");
  for (const auto& p : prefixes) {
    if (p.size() != len) throw InputError("decode: prefixes of one call must share a length");
  }
  forwards_ += prefixes.size();
  return compute_logits(k, prefixes);
}

TransformerLM::TransformerLM(const model::Model& model) : config_(model.config) {
  for (std::size_t k = 0; k < model.bank.hypotheses; ++k) merged_.push_back(model::merged_parameters(model, k));
}

std::vector<std::vector<double>> TransformerLM::compute_logits(std::size_t k,
                                                               const std::vector<std::vector<int>>& prefixes) const {
  const std::size_t n = prefixes.size(), len = prefixes.front().size();
  std::vector<int> flat;
  flat.reserve(n * len);
  for (const auto& p : prefixes) flat.insert(flat.end(), p.begin(), p.end());
  ad::Tape tape;
  const auto bound = model::bind(tape, merged_[k], false);
  const ad::Tensor& logits = model::base_forward(config_, bound, flat, n, len).value();
  const std::size_t V = config_.vocab_size;
  std::vector<std::vector<double>> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data() + (i * len + len - 1) * V;
    out[i].assign(row, row + V);
  }
  return out;
}

MarkovChainLM::MarkovChainLM(std::vector<markov::TransitionMatrix> chains, std::size_t max_len)
    : chains_(std::move(chains)), max_len_(max_len) {
  if (chains_.empty()) throw InputError("MarkovChainLM: need at least one chain");
  for (const auto& c : chains_) {
    if (c.size() != chains_.front().size()) throw InputError("MarkovChainLM: chains differ in state count");
  }
}

std::vector<std::vector<double>> MarkovChainLM::compute_logits(std::size_t k,
                                                               const std::vector<std::vector<int>>& prefixes) const {
  const auto& P = chains_[k];
  std::vector<std::vector<double>> out;
  for (const auto& p : prefixes) {
    const int last = p.back();
    if (last < 0 || static_cast<std::size_t>(last) >= P.size()) throw InputError("MarkovChainLM: token outside vocabulary");
    std::vector<double> row(P.size());
    for (std::size_t j = 0; j < P.size(); ++j) {
      const double pr = P(static_cast<std::size_t>(last), j);
      row[j] = pr > 0.0 ? std::log(pr) : kNegInf;
    }
    out.push_back(std::move(row));
  }
  return out;
}

// Step distribution -------------------------------------------------------------

std::vector<double> apply_step_rules(std::span<const double> logits, std::span<const int> prefix,
                                     const DecodeConfig& config) {
  std::vector<double> l(logits.begin(), logits.end());
  if (config.repetition_penalty != 1.0) {
    std::vector<bool> seen(l.size(), false);
    for (int t : prefix) {
      if (t >= 0 && static_cast<std::size_t>(t) < l.size()) seen[static_cast<std::size_t>(t)] = true;
    }
    for (std::size_t v = 0; v < l.size(); ++v) {
      if (seen[v]) l[v] = l[v] > 0.0 ? l[v] / config.repetition_penalty : l[v] * config.repetition_penalty;
    }
  }
  for (double& x : l) x /= config.temperature;
  const double mx = *std::max_element(l.begin(), l.end());
  if (!std::isfinite(mx)) throw NumericError("decode: no finite logit");
  double z = 0.0;
  for (double& x : l) {
    x = std::exp(x - mx);
    z += x;
  }
  for (double& x : l) x /= z;
  return l;
}

std::vector<double> step_distribution(const LanguageModel& model, std::size_t k, std::span<const int> prefix,
                                      const DecodeConfig& config) {
  if (prefix.size() >= config.max_len) throw InputError("step_distribution: prefix already at max_len");
  const auto logits = model.next_logits(k, {std::vector<int>(prefix.begin(), prefix.end())});
  return apply_step_rules(logits.front(), prefix, config);
}

std::vector<double> truncate(std::span<const double> probs, Strategy strategy, const DecodeConfig& config) {
  const std::size_t V = probs.size();
  std::vector<std::size_t> order(V);
  std::iota(order.begin(), order.end(), 0);
  std::size_t keep = V;
  if (strategy == Strategy::Typical) {
    double h = 0.0;
    for (double p : probs) {
      if (p > 0.0) h -= p * std::log(p);
    }
    std::vector<double> dist(V);
    for (std::size_t v = 0; v < V; ++v) {
      dist[v] = probs[v] > 0.0 ? std::abs(-std::log(probs[v]) - h) : std::numeric_limits<double>::infinity();
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  } else {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  }
  switch (strategy) {
    case Strategy::TopK:
      keep = std::min(config.top_k, V);
      break;
    case Strategy::TopP:
    case Strategy::Typical: {
      const double target = strategy == Strategy::TopP ? config.top_p : config.typical_tau;
      double cum = 0.0;
      for (keep = 0; keep < V;) {
        cum += probs[order[keep++]];
        if (cum >= target) break;
      }
      break;
    }
    default:
      throw InputError(std::string("truncate: ") + strategy_name(strategy) + " is not a sampling strategy");
  }
  std::vector<double> out(V, 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < keep; ++i) z += probs[order[i]];
  if (!(z > 0.0)) throw NumericError("truncate: kept tokens carry no probability");
  for (std::size_t i = 0; i < keep; ++i) out[order[i]] = probs[order[i]] / z;
  return out;
}

// Strategies --------------------------------------------------------------------

Candidate greedy(const LanguageModel& model, std::size_t k, const DecodeConfig& config) {
  check_prompt(model, config);
  Candidate c{config.prompt, 0.0, 0.0, k, Strategy::Greedy};
  while (c.tokens.size() < config.max_len) {
    const auto logits = model.next_logits(k, {c.tokens});
    const auto probs = apply_step_rules(logits.front(), c.tokens, config);
    const auto best = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
    c.score += std::log(probs[best]);
    c.model_logprob += log_softmax(logits.front())[best];
    c.tokens.push_back(static_cast<int>(best));
    if (config.eos && *config.eos == static_cast<int>(best)) break;
  }
  return c;
}

std::vector<Candidate> beam(const LanguageModel& model, std::size_t k, std::size_t B, const DecodeConfig& config) {
  check_prompt(model, config);
  if (B < 1) throw DomainError("beam: beam size must be at least 1");
  std::vector<Beam> beams{Beam{config.prompt}};
  while (!std::all_of(beams.begin(), beams.end(), [&](const Beam& b) { return finished(b, config); })) {
    beams = keep_best(expand(model, k, beams, {}, config), B);
  }
  std::vector<Candidate> out;
  for (const auto& b : beams) out.push_back(to_candidate(b, k, Strategy::Beam));
  return out;
}

std::vector<Candidate> diverse_beam(const LanguageModel& model, std::size_t k, std::size_t groups,
                                    std::size_t B, double lambda, const DecodeConfig& config) {
  check_prompt(model, config);
  if (groups < 1 || B < 1 || B % groups != 0) throw DomainError("diverse_beam: groups must divide the beam size");
  if (!(lambda >= 0.0)) throw DomainError("diverse_beam: lambda must be non-negative");
  const std::size_t per = B / groups;
  std::vector<std::vector<Beam>> state(groups, std::vector<Beam>{Beam{config.prompt}});
  auto all_done = [&] {
    for (const auto& g : state) {
      for (const auto& b : g) {
        if (!finished(b, config)) return false;
      }
    }
    return true;
  };
  while (!all_done()) {
    std::vector<double> penalty(model.vocab_size(), 0.0);
    for (auto& g : state) {
      const std::size_t pos = g.front().tokens.size();
      g = keep_best(expand(model, k, g, penalty, config), per);
      for (const auto& b : g) {
        if (b.tokens.size() > pos) penalty[static_cast<std::size_t>(b.tokens[pos])] += lambda;
      }
    }
  }
  std::vector<Candidate> out;
  for (const auto& g : state) {
    for (const auto& b : g) out.push_back(to_candidate(b, k, Strategy::DiverseBeam));
  }
  return out;
}

Candidate sample(const LanguageModel& model, std::size_t k, const DecodeConfig& config, std::uint64_t seed) {
  check_prompt(model, config);
  if (!is_sampling(config.strategy)) {
    throw InputError(std::string("sample: ") + strategy_name(config.strategy) + " is not a sampling strategy");
  }
  Rng rng(seed);
  Candidate c{config.prompt, 0.0, 0.0, k, config.strategy};
  while (c.tokens.size() < config.max_len) {
    const auto logits = model.next_logits(k, {c.tokens});
    const auto probs = apply_step_rules(logits.front(), c.tokens, config);
    const auto kept = truncate(probs, config.strategy, config);
    const std::size_t v = rng.categorical(kept);
    c.score += std::log(probs[v]);
    c.model_logprob += log_softmax(logits.front())[v];
    c.tokens.push_back(static_cast<int>(v));
    if (config.eos && *config.eos == static_cast<int>(v)) break;
  }
  return c;
}

CandidateSet decode_all(const LanguageModel& model, std::size_t n_candidates, const DecodeConfig& config) {
  check_prompt(model, config);
  const std::size_t K = model.hypotheses();
  if (n_candidates == 0 || n_candidates % K != 0) {
    throw InputError("decode_all: " + std::to_string(n_candidates) + " candidates cannot be split over " +
                     std::to_string(K) + " hypotheses");
  }
  const std::size_t per = n_candidates / K;
  const std::size_t steps = steps_of(config);
  CandidateSet set;
  const std::size_t start = model.forward_count();

  switch (config.strategy) {
    case Strategy::Greedy:
      if (per != 1) throw InputError("decode_all: greedy yields one candidate per hypothesis");
      set.forward_budget = n_candidates * steps;
      for (std::size_t k = 0; k < K; ++k) set.candidates.push_back(greedy(model, k, config));
      break;
    case Strategy::Beam:
    case Strategy::DiverseBeam: {
      if (config.beam_size % K != 0) {
        throw InputError("decode_all: beam size " + std::to_string(config.beam_size) + " is not divisible by K=" +
                         std::to_string(K));
      }
      const std::size_t bk = config.beam_size / K;
      if (bk < per) throw InputError("decode_all: per-hypothesis beam is smaller than its candidate share");
      set.forward_budget = config.beam_size * steps;
      for (std::size_t k = 0; k < K; ++k) {
        std::vector<Candidate> found;
        if (config.strategy == Strategy::Beam) {
          found = beam(model, k, bk, config);
        } else {
          if (bk % config.dbs_groups != 0) throw InputError("decode_all: groups must divide the per-hypothesis beam");
          auto grouped = diverse_beam(model, k, config.dbs_groups, bk, config.dbs_lambda, config);
          // Interleave groups by rank so a short share still spans the groups.
          const std::size_t per_group = bk / config.dbs_groups;
          for (std::size_t r = 0; r < per_group; ++r) {
            for (std::size_t g = 0; g < config.dbs_groups; ++g) {
              const std::size_t idx = g * per_group + r;
              if (idx < grouped.size()) found.push_back(grouped[idx]);
            }
          }
        }
        if (found.size() < per) throw InputError("decode_all: beam produced fewer candidates than requested");
        found.resize(per);
        for (auto& c : found) set.candidates.push_back(std::move(c));
      }
      break;
    }
    case Strategy::TopK:
    case Strategy::TopP:
    case Strategy::Typical:
      set.forward_budget = n_candidates * steps;
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t j = 0; j < per; ++j) {
          set.candidates.push_back(sample(model, k, config, derive_seed(config.seed, k * per + j)));
        }
      }
      break;
  }
  set.forwards = model.forward_count() - start;
  if (set.forwards > set.forward_budget) {
    throw ConsistencyError("decode_all: spent " + std::to_string(set.forwards) + " forwards over a budget of " +
                           std::to_string(set.forward_budget));
  }
  return set;
}

void write_candidates(std::ostream& os, const CandidateSet& set) {
  for (const auto& c : set.candidates) {
    for (std::size_t i = 0; i < c.tokens.size(); ++i) os << (i ? " " : "") << c.tokens[i];
    os << '\t' << format_double(c.score) << '\t' << c.hypothesis << '\t' << strategy_name(c.strategy) << '\n';
  }
}

}  // namespace mclseq::decode
