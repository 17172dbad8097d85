#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mclseq/errors.hpp"
#include "mclseq/mcl.hpp"
#include "mclseq/model.hpp"
#include "mclseq/rng.hpp"

namespace {

using namespace mclseq;
using mcl::SequenceLogLik;

SequenceLogLik grid(std::vector<std::vector<double>> rows) { return SequenceLogLik::from_rows(rows); }

SequenceLogLik random_grid(std::size_t K, std::size_t b, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> rows(K, std::vector<double>(b));
  for (auto& r : rows) {
    for (auto& v : r) v = -30.0 * rng.uniform();
  }
  return grid(rows);
}

TEST(SequenceLogLik, UniformLogits) {
  const std::size_t K = 2, b = 3, T = 32;
  const ad::Tensor logits(ad::Shape{K * b, T, 2}, 0.0);
  std::vector<int> tokens(b * T);
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<int>(i % 3 == 0);
  const auto ll = mcl::sequence_loglik(logits, tokens, b, T);
  for (double v : ll.values) EXPECT_NEAR(v, 31 * std::log(0.5), 1e-12);
  EXPECT_NEAR(31 * std::log(0.5), -21.48756, 1e-5);
}

TEST(SequenceLogLik, PeakedLogitsApproachZero) {
  const std::size_t T = 6;
  const std::vector<int> tokens{0, 1, 1, 0, 1, 0};
  ad::Tensor logits(ad::Shape{1, T, 2}, 0.0);
  for (std::size_t t = 0; t + 1 < T; ++t) logits[t * 2 + static_cast<std::size_t>(tokens[t + 1])] = 60.0;
  const auto ll = mcl::sequence_loglik(logits, tokens, 1, T);
  EXPECT_GT(ll.at(0, 0), -1e-20);
  EXPECT_LE(ll.at(0, 0), 0.0);
}

TEST(SequenceLogLik, MatchesProbabilityProduct) {
  const std::size_t K = 2, b = 2, T = 7, V = 3;
  Rng rng(4);
  ad::Tensor logits(ad::Shape{K * b, T, V});
  for (auto& v : logits.values()) v = rng.normal() * 2.0;
  std::vector<int> tokens(b * T);
  for (auto& t : tokens) t = static_cast<int>(rng.below(V));
  const auto ll = mcl::sequence_loglik(logits, tokens, b, T);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < b; ++i) {
      double prod = 1.0;
      for (std::size_t t = 1; t < T; ++t) {
        const double* row = logits.data() + ((k * b + i) * T + t - 1) * V;
        double z = 0.0;
        for (std::size_t v = 0; v < V; ++v) z += std::exp(row[v]);
        prod *= std::exp(row[tokens[i * T + t]]) / z;
      }
      EXPECT_NEAR(ll.at(k, i), std::log(prod), 1e-10);
    }
  }
}

TEST(Winners, SingleHypothesis) {
  const auto w = mcl::assign_winners(random_grid(1, 20, 1), 3);
  for (auto k : w.winners) EXPECT_EQ(k, 0u);
  EXPECT_EQ(w.tie_count(), 0u);
}

TEST(Winners, HandCase) {
  const auto w = mcl::assign_winners(grid({{-1, -5}, {-3, -2}}), 0);
  EXPECT_EQ(w.winners, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(w.tie_count(), 0u);
  EXPECT_EQ(w.counts(2), (std::vector<std::size_t>{1, 1}));
}

TEST(Winners, TiesAreUniform) {
  const std::size_t K = 3, b = 10000;
  const auto ll = grid(std::vector<std::vector<double>>(K, std::vector<double>(b, -4.0)));
  const auto w = mcl::assign_winners(ll, 12);
  EXPECT_EQ(w.tie_count(), b);
  const double p = 1.0 / K, se = std::sqrt(p * (1 - p) / b);
  for (auto c : w.counts(K)) EXPECT_NEAR(static_cast<double>(c) / b, p, 3 * se);
}

TEST(Winners, TieToleranceAndPartialTies) {
  const std::size_t b = 4000;
  std::vector<std::vector<double>> rows(3, std::vector<double>(b, -2.0));
  for (auto& v : rows[2]) v = -2.5;
  rows[1][0] = -2.0 + 1e-9;
  const auto w = mcl::assign_winners(grid(rows), 5);
  EXPECT_EQ(w.winners[0], 1u);
  EXPECT_EQ(w.tie_broken[0], 0);
  const auto counts = w.counts(3);
  EXPECT_EQ(counts[2], 0u);
  const double se = std::sqrt(0.25 / (b - 1));
  EXPECT_NEAR(static_cast<double>(counts[0]) / (b - 1), 0.5, 3 * se);
}

TEST(Winners, InitialisedModelTiesEverywhere) {
  model::ModelConfig cfg;
  cfg.hypotheses = 4;
  const auto m = model::init(cfg, 1);
  Rng rng(2);
  std::vector<int> tokens(16 * 32);
  for (auto& t : tokens) t = static_cast<int>(rng.below(2));
  const auto logits = model::eval_logits(m, tokens, 16, 32);
  const auto ll = mcl::sequence_loglik(logits.reshaped({4 * 16, 32, 2}), tokens, 16, 32);
  EXPECT_EQ(mcl::assign_winners(ll, 1).tie_count(), 16u);
}

TEST(Winners, InvariantUnderColumnShift) {
  auto ll = random_grid(4, 50, 7);
  const auto before = mcl::assign_winners(ll, 1);
  Rng rng(3);
  for (std::size_t i = 0; i < ll.batch; ++i) {
    const double c = rng.normal() * 10;
    for (std::size_t k = 0; k < 4; ++k) ll.at(k, i) += c;
  }
  EXPECT_EQ(mcl::assign_winners(ll, 1).winners, before.winners);
}

TEST(WtaLoss, HardHandCase) {
  const auto ll = grid({{-1, -5}, {-3, -2}});
  const auto w = mcl::assign_winners(ll, 0);
  EXPECT_DOUBLE_EQ(mcl::wta_loss(ll, w, 0.0), 1.5);
}

TEST(WtaLoss, UniformWeightsAverageAllHypotheses) {
  const std::size_t K = 4, b = 9;
  const auto ll = random_grid(K, b, 2);
  const auto w = mcl::assign_winners(ll, 0);
  const double mean = -std::accumulate(ll.values.begin(), ll.values.end(), 0.0) / (K * b);
  EXPECT_NEAR(mcl::wta_loss(ll, w, 0.75), mean, 1e-12);
}

TEST(WtaLoss, ThreeHypothesesHandGrid) {
  const auto ll = grid({{-3.0, -7.5, -1.25}, {-2.0, -9.0, -4.0}, {-6.5, -8.0, -0.5}});
  const auto w = mcl::assign_winners(ll, 0);
  EXPECT_EQ(w.winners, (std::vector<std::size_t>{1, 0, 2}));
  // Columns: winner 0.95, others 0.025 each.
  const double c0 = 0.95 * -2.0 + 0.025 * (-3.0 + -6.5);
  const double c1 = 0.95 * -7.5 + 0.025 * (-9.0 + -8.0);
  const double c2 = 0.95 * -0.5 + 0.025 * (-1.25 + -4.0);
  EXPECT_NEAR(mcl::wta_loss(ll, w, 0.05), -(c0 + c1 + c2) / 3.0, 1e-12);
}

TEST(WtaLoss, EpsilonRange) {
  const auto ll = random_grid(3, 4, 1);
  const auto w = mcl::assign_winners(ll, 0);
  EXPECT_THROW(mcl::wta_loss(ll, w, -0.1), DomainError);
  EXPECT_THROW(mcl::wta_loss(ll, w, 0.7), DomainError);
  EXPECT_NO_THROW(mcl::wta_loss(ll, w, 2.0 / 3.0));
  const auto one = random_grid(1, 4, 1);
  EXPECT_THROW(mcl::wta_loss(one, mcl::assign_winners(one, 0), 0.1), DomainError);
}

TEST(WtaLoss, MonotoneInEpsilon) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const std::size_t K = 2 + s % 4;
    const auto ll = random_grid(K, 11, s);
    const auto w = mcl::assign_winners(ll, s);
    const double top = (K - 1.0) / K;
    double prev = mcl::wta_loss(ll, w, 0.0);
    for (int i = 1; i <= 10; ++i) {
      const double cur = mcl::wta_loss(ll, w, top * i / 10.0);
      EXPECT_GE(cur, prev - 1e-12);
      prev = cur;
    }
  }
}

TEST(WtaLoss, AffineShift) {
  auto ll = random_grid(3, 8, 5);
  const auto w = mcl::assign_winners(ll, 0);
  const double before = mcl::wta_loss(ll, w, 0.2);
  for (auto& v : ll.values) v += 4.25;
  EXPECT_NEAR(mcl::wta_loss(ll, w, 0.2), before - 4.25, 1e-12);
}

TEST(WtaLoss, BatchPermutation) {
  const std::size_t K = 3, b = 12;
  const auto ll = random_grid(K, b, 9);
  const auto w = mcl::assign_winners(ll, 0);
  std::vector<std::size_t> perm(b);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(1);
  for (std::size_t i = b - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  SequenceLogLik p = ll;
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < b; ++i) p.at(k, i) = ll.at(k, perm[i]);
  }
  const auto wp = mcl::assign_winners(p, 0);
  for (std::size_t i = 0; i < b; ++i) EXPECT_EQ(wp.winners[i], w.winners[perm[i]]);
  EXPECT_NEAR(mcl::wta_loss(p, wp, 0.1), mcl::wta_loss(ll, w, 0.1), 1e-12);
}

TEST(WtaLoss, GradientRouting) {
  const std::size_t K = 3, b = 5;
  const auto ll = random_grid(K, b, 3);
  const auto w = mcl::assign_winners(ll, 0);
  for (double eps : {0.0, 0.3}) {
    ad::Tape tape;
    auto v = tape.leaf(ad::Tensor(ad::Shape{K * b}, ll.values), true);
    auto loss = mcl::wta_loss(v, w, K, eps);
    EXPECT_NEAR(loss.value()[0], mcl::wta_loss(ll, w, eps), 1e-12);
    tape.backward(loss);
    const auto g = tape.grad(v);
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t i = 0; i < b; ++i) {
        const double q = k == w.winners[i] ? 1 - eps : eps / (K - 1);
        EXPECT_NEAR(g[k * b + i], -q / b, 1e-15);
      }
    }
  }
}

TEST(MleLoss, UniformToy) {
  const auto ll = grid({std::vector<double>(6, 31 * std::log(0.5))});
  EXPECT_NEAR(mcl::mle_loss(ll) / 31, std::log(2.0), 1e-12);
  EXPECT_NEAR(std::log(2.0), 0.6931, 1e-4);
}

TEST(MleLoss, EqualsWtaAtOneHypothesis) {
  const auto ll = random_grid(1, 17, 4);
  EXPECT_EQ(mcl::mle_loss(ll), mcl::wta_loss(ll, mcl::assign_winners(ll, 0), 0.0));
  EXPECT_THROW(mcl::mle_loss(random_grid(2, 3, 1)), ContractError);
}

}  // namespace
