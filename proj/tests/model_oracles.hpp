#pragma once

// Independent reference implementations for the transformer: plain loops
// over BaseParameters, and a finite-difference check of the full model.

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "mclseq/mcl.hpp"
#include "mclseq/model.hpp"
#include "mclseq/rng.hpp"

namespace testing_util {

using mclseq::ad::Tensor;
using mclseq::model::BaseParameters;
using mclseq::model::Model;
using mclseq::model::ModelConfig;

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const Tensor& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t[i * t.dim(1) + j];
  }
  return m;
}

inline std::vector<double> vecmat(const std::vector<double>& x, const Mat& W) {
  std::vector<double> y(W[0].size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = 0; j < y.size(); ++j) y[j] += x[i] * W[i][j];
  }
  return y;
}

inline std::vector<double> naive_ln(const std::vector<double>& x, const Tensor& g, const Tensor& b) {
  double m = 0.0, v = 0.0;
  for (double e : x) m += e;
  m /= static_cast<double>(x.size());
  for (double e : x) v += (e - m) * (e - m);
  v /= static_cast<double>(x.size());
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - m) / std::sqrt(v + 1e-5) * g[i] + b[i];
  return y;
}

/// W + scale * A_k B_k for one site, computed with loops.
inline Mat merge(const Tensor& W, const Tensor& A, const Tensor& B, std::size_t k, double scale) {
  Mat m = to_mat(W);
  const std::size_t din = A.dim(1), r = A.dim(2), dout = B.dim(2);
  for (std::size_t i = 0; i < din; ++i) {
    for (std::size_t j = 0; j < dout; ++j) {
      double s = 0.0;
      for (std::size_t q = 0; q < r; ++q) s += A[(k * din + i) * r + q] * B[(k * r + q) * dout + j];
      m[i][j] += scale * s;
    }
  }
  return m;
}

/// Logits [T][V] of one sequence under hypothesis k (or the base) with
/// attention restricted to the last `window` positions.
inline Mat naive_forward(const Model& model, std::optional<std::size_t> k, const std::vector<int>& tokens,
                         std::size_t window) {
  const ModelConfig& c = model.config;
  const std::size_t T = tokens.size(), d = c.hidden, H = c.heads, dh = d / H;
  Mat x(T, std::vector<double>(d));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      x[t][j] = model.base.token_embedding[static_cast<std::size_t>(tokens[t]) * d + j] +
                model.base.position_embedding[t * d + j];
    }
  }
  auto weight = [&](std::size_t l, mclseq::model::Site site, const Tensor& W) {
    if (!k) return to_mat(W);
    const auto& sites = model.bank.sites;
    const auto it = std::find(sites.begin(), sites.end(), site);
    if (it == sites.end()) return to_mat(W);
    const auto& pair = model.bank.blocks[l][static_cast<std::size_t>(it - sites.begin())];
    return merge(W, pair.A, pair.B, *k, c.lora_scale());
  };
  using mclseq::model::Site;
  for (std::size_t l = 0; l < c.layers; ++l) {
    const auto& b = model.base.blocks[l];
    const Mat wq = weight(l, Site::Query, b.wq), wk = weight(l, Site::Key, b.wk), wv = weight(l, Site::Value, b.wv);
    const Mat wo = weight(l, Site::Output, b.wo), wup = weight(l, Site::FfnUp, b.w_up), wdown = weight(l, Site::FfnDown, b.w_down);
    Mat q(T), kk(T), v(T);
    for (std::size_t t = 0; t < T; ++t) {
      const auto h = naive_ln(x[t], b.ln1_gain, b.ln1_bias);
      q[t] = vecmat(h, wq);
      kk[t] = vecmat(h, wk);
      v[t] = vecmat(h, wv);
    }
    Mat attn(T, std::vector<double>(d, 0.0));
    for (std::size_t hd = 0; hd < H; ++hd) {
      for (std::size_t t = 0; t < T; ++t) {
        std::vector<double> s;
        std::vector<std::size_t> keys;
        for (std::size_t u = 0; u <= t; ++u) {
          if (t - u >= window) continue;
          double dot = 0.0;
          for (std::size_t e = 0; e < dh; ++e) dot += q[t][hd * dh + e] * kk[u][hd * dh + e];
          s.push_back(dot / std::sqrt(static_cast<double>(dh)));
          keys.push_back(u);
        }
        const double mx = *std::max_element(s.begin(), s.end());
        double z = 0.0;
        for (double& e : s) z += (e = std::exp(e - mx));
        for (std::size_t i = 0; i < keys.size(); ++i) {
          for (std::size_t e = 0; e < dh; ++e) attn[t][hd * dh + e] += s[i] / z * v[keys[i]][hd * dh + e];
        }
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      const auto o = vecmat(attn[t], wo);
      for (std::size_t j = 0; j < d; ++j) x[t][j] += o[j] + b.bo[j];
      const auto h2 = naive_ln(x[t], b.ln2_gain, b.ln2_bias);
      auto up = vecmat(h2, wup);
      for (std::size_t j = 0; j < up.size(); ++j) {
        const double a = up[j] + b.b_up[j];
        up[j] = 0.5 * a * (1 + std::tanh(std::sqrt(2.0 / M_PI) * (a + 0.044715 * a * a * a)));
      }
      const auto down = vecmat(up, wdown);
      for (std::size_t j = 0; j < d; ++j) x[t][j] += down[j] + b.b_down[j];
    }
  }
  Mat logits(T, std::vector<double>(c.vocab_size, 0.0));
  for (std::size_t t = 0; t < T; ++t) {
    const auto hf = naive_ln(x[t], model.base.lnf_gain, model.base.lnf_bias);
    for (std::size_t vv = 0; vv < c.vocab_size; ++vv) {
      for (std::size_t j = 0; j < d; ++j) logits[t][vv] += hf[j] * model.base.token_embedding[vv * d + j];
    }
  }
  return logits;
}

/// Gives every B a random value so adapter gradients are non-trivial.
inline void randomize_adapters(Model& m, std::uint64_t seed, double sd = 0.05) {
  mclseq::Rng rng(seed);
  m.bank.for_each([&](const std::string& name, Tensor& t) {
    if (name.back() == 'B') t = Tensor::randn(t.shape(), sd, rng);
  });
}

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Relaxed WTA loss of the grouped forward with fixed winners; analytic
/// gradients for every base and adapter buffer against central differences
/// on `samples` randomly drawn scalar parameters.
inline GradcheckResult model_gradcheck(Model m, const std::vector<int>& tokens, std::size_t batch, std::size_t length,
                                       std::size_t samples, std::uint64_t seed, double h = 1e-5) {
  namespace ad = mclseq::ad;
  const std::size_t K = m.bank.hypotheses;
  std::vector<int> tiled;
  for (std::size_t k = 0; k < K; ++k) tiled.insert(tiled.end(), tokens.begin(), tokens.end());
  const double eps = K > 1 ? 0.1 : 0.0;
  mclseq::mcl::WinnerAssignment winners;
  for (std::size_t i = 0; i < batch; ++i) winners.winners.push_back(i % K);
  winners.tie_broken.assign(batch, 0);

  auto loss_of = [&](const Model& mm, bool grads, std::vector<Tensor>* out) {
    ad::Tape tape;
    const auto bb = mclseq::model::bind(tape, mm.base, grads);
    const auto bk = mclseq::model::bind(tape, mm.bank, grads);
    auto logits = mclseq::model::grouped_forward(mm.config, bb, bk, tokens, batch, length);
    auto loss = mclseq::mcl::wta_loss(ad::sequence_log_likelihood(logits, tiled), winners, K, eps);
    if (grads) {
      tape.backward(loss);
      // Same order as for_each over base then bank.
      out->push_back(tape.grad(bb.token_embedding));
      out->push_back(tape.grad(bb.position_embedding));
      for (const auto& b : bb.blocks) {
        for (const auto& v : {b.ln1_gain, b.ln1_bias, b.wq, b.wk, b.wv, b.wo, b.bo, b.ln2_gain, b.ln2_bias, b.w_up,
                              b.b_up, b.w_down, b.b_down}) {
          out->push_back(tape.grad(v));
        }
      }
      out->push_back(tape.grad(bb.lnf_gain));
      out->push_back(tape.grad(bb.lnf_bias));
      for (const auto& blk : bk.blocks) {
        for (const auto& [A, B] : blk) {
          out->push_back(tape.grad(A));
          out->push_back(tape.grad(B));
        }
      }
    }
    return loss.value()[0];
  };

  std::vector<Tensor> grads;
  loss_of(m, true, &grads);
  std::vector<Tensor*> params;
  m.base.for_each([&](const std::string&, Tensor& t) { params.push_back(&t); });
  m.bank.for_each([&](const std::string&, Tensor& t) { params.push_back(&t); });

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i]->size(); ++j) coords.emplace_back(i, j);
  }
  mclseq::Rng rng(seed);
  for (std::size_t i = 0; i < samples && i < coords.size(); ++i) {
    std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
  }
  coords.resize(std::min(samples, coords.size()));

  GradcheckResult res;
  for (auto [i, j] : coords) {
    Tensor& p = *params[i];
    const double orig = p[j];
    p[j] = orig + h;
    const double up = loss_of(m, false, nullptr);
    p[j] = orig - h;
    const double down = loss_of(m, false, nullptr);
    p[j] = orig;
    const double numeric = (up - down) / (2 * h);
    const double analytic = grads[i][j];
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    res.max_rel_error = std::max(res.max_rel_error, rel);
    ++res.checked;
  }
  return res;
}

}  // namespace testing_util
