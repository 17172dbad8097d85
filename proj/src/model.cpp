#include "mclseq/model.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "mclseq/errors.hpp"
#include "mclseq/format.hpp"
#include "mclseq/rng.hpp"

namespace mclseq::model {
namespace {

constexpr double kBaseInitStd = 0.02;
constexpr std::size_t kEvalChunk = 256;
constexpr const char* kCheckpointMagic = "mclseq-checkpoint";
constexpr int kCheckpointVersion = 1;

std::pair<std::size_t, std::size_t> site_dims(const ModelConfig& c, Site s) {
  switch (s) {
    case Site::Query:
    case Site::Key:
    case Site::Value:
    case Site::Output:
      return {c.hidden, c.hidden};
    case Site::FfnUp:
      return {c.hidden, c.ffn_width()};
    case Site::FfnDown:
      return {c.ffn_width(), c.hidden};
  }
  return {0, 0};
}

// Block forward with an optional adapter hook per (block, site).
using AdapterHook = std::function<std::optional<Var>(std::size_t block, Site site, Var input)>;

Var project(Var x, Var w, std::optional<Var> bias, std::optional<Var> adapter) {
  Var y = ad::matmul(x, w);
  if (bias) y = ad::add(y, *bias);
  if (adapter) y = ad::add(y, *adapter);
  return y;
}

Var run_stack(const ModelConfig& c, const BoundBase& base, Var x, const AdapterHook& hook) {
  for (std::size_t l = 0; l < base.blocks.size(); ++l) {
    const BoundBlock& b = base.blocks[l];
    Var h = ad::layer_norm(x, b.ln1_gain, b.ln1_bias);
    Var q = project(h, b.wq, std::nullopt, hook(l, Site::Query, h));
    Var k = project(h, b.wk, std::nullopt, hook(l, Site::Key, h));
    Var v = project(h, b.wv, std::nullopt, hook(l, Site::Value, h));
    Var probs = ad::softmax(ad::attention_scores(q, k, c.heads, c.window));
    Var attn = ad::attention_apply(probs, v, c.heads);
    x = ad::add(x, project(attn, b.wo, b.bo, hook(l, Site::Output, attn)));
    Var h2 = ad::layer_norm(x, b.ln2_gain, b.ln2_bias);
    Var up = ad::gelu(project(h2, b.w_up, b.b_up, hook(l, Site::FfnUp, h2)));
    x = ad::add(x, project(up, b.w_down, b.b_down, hook(l, Site::FfnDown, up)));
  }
  Var hf = ad::layer_norm(x, base.lnf_gain, base.lnf_bias);
  return ad::matmul(hf, ad::transpose(base.token_embedding));
}

Var embed(const ModelConfig& c, const BoundBase& base, std::span<const int> tokens, std::size_t batch,
          std::size_t length) {
  if (length == 0 || length > c.max_len) {
    throw InputError("forward: sequence length " + std::to_string(length) + " outside [1, " +
                     std::to_string(c.max_len) + "]");
  }
  if (tokens.size() != batch * length) throw InputError("forward: token buffer does not match b x T");
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) {
      throw InputError("forward: token " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(c.vocab_size));
    }
  }
  Var e = ad::embedding(base.token_embedding, tokens, Shape{batch, length});
  return ad::add(e, ad::slice(base.position_embedding, 0, 0, length));
}

std::optional<std::size_t> site_index(const std::vector<Site>& sites, Site s) {
  const auto it = std::find(sites.begin(), sites.end(), s);
  if (it == sites.end()) return std::nullopt;
  return static_cast<std::size_t>(it - sites.begin());
}

Var dropout(Var x, double rate, Rng& rng) {
  Tensor mask(x.shape());
  const double keep = 1.0 / (1.0 - rate);
  for (double& m : mask.values()) m = rng.uniform() < rate ? 0.0 : keep;
  return ad::mul(x, x.tape().constant(std::move(mask)));
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 1) throw DomainError("model: vocab_size must be positive");
  if (hidden < 1 || heads < 1 || hidden % heads != 0) {
    throw DomainError("model: hidden size must be divisible by the number of heads");
  }
  if (layers < 1) throw DomainError("model: need at least one block");
  if (window < 1) throw DomainError("model: attention window must be at least 1");
  if (max_len < 1) throw DomainError("model: max_len must be positive");
  if (ffn_mult < 1) throw DomainError("model: ffn_mult must be positive");
  if (lora_rank < 1) throw DomainError("model: lora_rank must be at least 1");
  if (!(lora_alpha > 0.0)) throw DomainError("model: lora_alpha must be positive");
  if (!(lora_dropout >= 0.0 && lora_dropout < 1.0)) throw DomainError("model: lora_dropout must lie in [0,1)");
  if (hypotheses < 1) throw DomainError("model: need at least one hypothesis");
  if (adapter_sites.empty()) throw DomainError("model: need at least one adapter site");
  auto sorted = adapted_sites(*this);
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw DomainError("model: adapter sites must be distinct");
  }
}

std::vector<Site> adapted_sites(const ModelConfig& config) {
  std::vector<Site> s = config.adapter_sites;
  std::sort(s.begin(), s.end());
  return s;
}

Site parse_site(const std::string& name) {
  for (Site s : {Site::Query, Site::Key, Site::Value, Site::Output, Site::FfnUp, Site::FfnDown}) {
    if (name == site_name(s)) return s;
  }
  throw InputError("unknown adapter site '" + name + "' (expected q, k, v, o, up or down)");
}

std::string sites_string(std::span<const Site> sites) {
  std::string out;
  for (Site s : sites) {
    if (!out.empty()) out += ',';
    out += site_name(s);
  }
  return out;
}

std::vector<Site> parse_sites(const std::string& text) {
  std::vector<Site> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = std::min(text.find(',', start), text.size());
    out.push_back(parse_site(text.substr(start, end - start)));
    start = end + 1;
  }
  return out;
}

const char* site_name(Site site) {
  switch (site) {
    case Site::Query: return "q";
    case Site::Key: return "k";
    case Site::Value: return "v";
    case Site::Output: return "o";
    case Site::FfnUp: return "up";
    case Site::FfnDown: return "down";
  }
  return "?";
}

// Parameter containers ----------------------------------------------------------

namespace {
template <typename Base, typename Fn>
void visit_base(Base& b, Fn&& fn) {
  fn("token_embedding", b.token_embedding);
  fn("position_embedding", b.position_embedding);
  for (std::size_t l = 0; l < b.blocks.size(); ++l) {
    auto& blk = b.blocks[l];
    const std::string p = "block" + std::to_string(l) + ".";
    fn(p + "ln1_gain", blk.ln1_gain);
    fn(p + "ln1_bias", blk.ln1_bias);
    fn(p + "wq", blk.wq);
    fn(p + "wk", blk.wk);
    fn(p + "wv", blk.wv);
    fn(p + "wo", blk.wo);
    fn(p + "bo", blk.bo);
    fn(p + "ln2_gain", blk.ln2_gain);
    fn(p + "ln2_bias", blk.ln2_bias);
    fn(p + "w_up", blk.w_up);
    fn(p + "b_up", blk.b_up);
    fn(p + "w_down", blk.w_down);
    fn(p + "b_down", blk.b_down);
  }
  fn("lnf_gain", b.lnf_gain);
  fn("lnf_bias", b.lnf_bias);
}

template <typename Bank, typename Fn>
void visit_bank(Bank& b, Fn&& fn) {
  for (std::size_t l = 0; l < b.blocks.size(); ++l) {
    for (std::size_t s = 0; s < b.sites.size(); ++s) {
      const std::string p = "block" + std::to_string(l) + "." + site_name(b.sites[s]) + ".";
      fn(p + "A", b.blocks[l][s].A);
      fn(p + "B", b.blocks[l][s].B);
    }
  }
}
}  // namespace

void BaseParameters::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit_base(*this, fn);
}
void BaseParameters::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_base(*this, fn);
}
std::size_t BaseParameters::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

void HypothesisBank::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit_bank(*this, fn);
}
void HypothesisBank::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_bank(*this, fn);
}
std::size_t HypothesisBank::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

LoraAdapterSet HypothesisBank::adapter(std::size_t k) const {
  if (k >= hypotheses) throw InputError("adapter: hypothesis index out of range");
  LoraAdapterSet set;
  for (const auto& blk : blocks) {
    auto& out = set.blocks.emplace_back();
    for (const auto& pair : blk) {
      const std::size_t din = pair.A.dim(1), r = pair.A.dim(2), dout = pair.B.dim(2);
      std::vector<double> a(pair.A.data() + k * din * r, pair.A.data() + (k + 1) * din * r);
      std::vector<double> b(pair.B.data() + k * r * dout, pair.B.data() + (k + 1) * r * dout);
      out.push_back({Tensor(Shape{din, r}, std::move(a)), Tensor(Shape{r, dout}, std::move(b))});
    }
  }
  return set;
}

void HypothesisBank::set_adapter(std::size_t k, const LoraAdapterSet& set) {
  if (k >= hypotheses) throw InputError("set_adapter: hypothesis index out of range");
  if (set.blocks.size() != blocks.size()) throw ShapeError("set_adapter: block count differs");
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    if (set.blocks[l].size() != blocks[l].size()) throw ShapeError("set_adapter: site count differs");
    for (std::size_t s = 0; s < blocks[l].size(); ++s) {
      auto& dst = blocks[l][s];
      const auto& src = set.blocks[l][s];
      if (src.A.size() * hypotheses != dst.A.size() || src.B.size() * hypotheses != dst.B.size()) {
        throw ShapeError("set_adapter: adapter shape differs from bank");
      }
      std::copy(src.A.values().begin(), src.A.values().end(), dst.A.data() + k * src.A.size());
      std::copy(src.B.values().begin(), src.B.values().end(), dst.B.data() + k * src.B.size());
    }
  }
}

HypothesisBank HypothesisBank::select(std::span<const std::size_t> ks) const {
  HypothesisBank out;
  out.hypotheses = ks.size();
  out.sites = sites;
  for (const auto& blk : blocks) {
    auto& ob = out.blocks.emplace_back();
    for (const auto& pair : blk) {
      const std::size_t din = pair.A.dim(1), r = pair.A.dim(2), dout = pair.B.dim(2);
      Tensor A(Shape{ks.size(), din, r}), B(Shape{ks.size(), r, dout});
      for (std::size_t i = 0; i < ks.size(); ++i) {
        if (ks[i] >= hypotheses) throw InputError("select: hypothesis index out of range");
        std::copy_n(pair.A.data() + ks[i] * din * r, din * r, A.data() + i * din * r);
        std::copy_n(pair.B.data() + ks[i] * r * dout, r * dout, B.data() + i * r * dout);
      }
      ob.push_back({std::move(A), std::move(B)});
    }
  }
  return out;
}

Model init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config = config;
  const std::size_t d = config.hidden, f = config.ffn_width();

  Rng brng(config.base_seed);
  auto gauss = [&](Shape s) { return Tensor::randn(std::move(s), kBaseInitStd, brng); };
  m.base.token_embedding = gauss({config.vocab_size, d});
  m.base.position_embedding = gauss({config.max_len, d});
  for (std::size_t l = 0; l < config.layers; ++l) {
    BlockParameters b;
    b.ln1_gain = Tensor({d}, 1.0);
    b.ln1_bias = Tensor({d}, 0.0);
    b.wq = gauss({d, d});
    b.wk = gauss({d, d});
    b.wv = gauss({d, d});
    b.wo = gauss({d, d});
    b.bo = Tensor({d}, 0.0);
    b.ln2_gain = Tensor({d}, 1.0);
    b.ln2_bias = Tensor({d}, 0.0);
    b.w_up = gauss({d, f});
    b.b_up = Tensor({f}, 0.0);
    b.w_down = gauss({f, d});
    b.b_down = Tensor({d}, 0.0);
    m.base.blocks.push_back(std::move(b));
  }
  m.base.lnf_gain = Tensor({d}, 1.0);
  m.base.lnf_bias = Tensor({d}, 0.0);

  const std::size_t K = config.hypotheses, r = config.lora_rank;
  const double a_std = 1.0 / std::sqrt(static_cast<double>(r));
  m.bank.hypotheses = K;
  m.bank.sites = adapted_sites(config);
  for (std::size_t l = 0; l < config.layers; ++l) {
    auto& blk = m.bank.blocks.emplace_back();
    for (Site s : m.bank.sites) {
      const auto [din, dout] = site_dims(config, s);
      Tensor A(Shape{K, din, r});
      for (std::size_t k = 0; k < K; ++k) {
        // Independent stream per (hypothesis, block, site).
        Rng arng(derive_seed(derive_seed(seed, k), l * 16 + static_cast<std::size_t>(s)));
        for (std::size_t i = 0; i < din * r; ++i) A[k * din * r + i] = a_std * arng.normal();
      }
      blk.push_back({std::move(A), Tensor(Shape{K, r, dout}, 0.0)});
    }
  }
  return m;
}

// Binding and forward passes -----------------------------------------------------

BoundBase bind(ad::Tape& tape, const BaseParameters& base, bool requires_grad) {
  auto leaf = [&](const Tensor& t) { return tape.leaf(t, requires_grad); };
  BoundBase b;
  b.token_embedding = leaf(base.token_embedding);
  b.position_embedding = leaf(base.position_embedding);
  for (const auto& blk : base.blocks) {
    b.blocks.push_back({leaf(blk.ln1_gain), leaf(blk.ln1_bias), leaf(blk.wq), leaf(blk.wk), leaf(blk.wv),
                        leaf(blk.wo), leaf(blk.bo), leaf(blk.ln2_gain), leaf(blk.ln2_bias), leaf(blk.w_up),
                        leaf(blk.b_up), leaf(blk.w_down), leaf(blk.b_down)});
  }
  b.lnf_gain = leaf(base.lnf_gain);
  b.lnf_bias = leaf(base.lnf_bias);
  return b;
}

BoundBank bind(ad::Tape& tape, const HypothesisBank& bank, bool requires_grad) {
  BoundBank b;
  for (const auto& blk : bank.blocks) {
    auto& out = b.blocks.emplace_back();
    for (const auto& pair : blk) out.emplace_back(tape.leaf(pair.A, requires_grad), tape.leaf(pair.B, requires_grad));
  }
  return b;
}

namespace {
std::size_t bank_hypotheses(const BoundBank& bank) {
  if (bank.blocks.empty() || bank.blocks.front().empty()) return 0;
  return bank.blocks.front().front().first.value().dim(0);
}
}  // namespace

Var forward_hypothesis(const ModelConfig& config, const BoundBase& base, const BoundBank& bank,
                       std::size_t k, std::span<const int> tokens, std::size_t batch,
                       std::size_t length, const ForwardOptions& options) {
  if (k >= bank_hypotheses(bank)) throw InputError("forward_hypothesis: hypothesis index out of range");
  const auto sites = adapted_sites(config);
  const double s = config.lora_scale();
  Rng rng(derive_seed(options.dropout_seed, k));
  const bool drop = options.training && config.lora_dropout > 0.0;
  Var x = embed(config, base, tokens, batch, length);
  AdapterHook hook = [&](std::size_t l, Site site, Var h) -> std::optional<Var> {
    const auto idx = site_index(sites, site);
    if (!idx) return std::nullopt;
    const auto& [A, B] = bank.blocks[l][*idx];
    const std::size_t din = A.value().dim(1), r = A.value().dim(2), dout = B.value().dim(2);
    Var Ak = ad::reshape(ad::slice(A, 0, k, k + 1), Shape{din, r});
    Var Bk = ad::reshape(ad::slice(B, 0, k, k + 1), Shape{r, dout});
    Var in = drop ? dropout(h, config.lora_dropout, rng) : h;
    return ad::scale(ad::matmul(ad::matmul(in, Ak), Bk), s);
  };
  return run_stack(config, base, x, hook);
}

Var grouped_forward(const ModelConfig& config, const BoundBase& base, const BoundBank& bank,
                    std::span<const int> tokens, std::size_t batch, std::size_t length,
                    const ForwardOptions& options) {
  const std::size_t K = bank_hypotheses(bank);
  if (K == 0) throw InputError("grouped_forward: empty hypothesis bank");
  const auto sites = adapted_sites(config);
  const double s = config.lora_scale();
  Rng rng(options.dropout_seed);
  const bool drop = options.training && config.lora_dropout > 0.0;
  Var x = embed(config, base, tokens, batch, length);
  if (K > 1) {
    std::vector<Var> copies(K, x);
    x = ad::concat(copies, 0);
  }
  AdapterHook hook = [&](std::size_t l, Site site, Var h) -> std::optional<Var> {
    const auto idx = site_index(sites, site);
    if (!idx) return std::nullopt;
    const auto& [A, B] = bank.blocks[l][*idx];
    Var in = drop ? dropout(h, config.lora_dropout, rng) : h;
    return ad::grouped_low_rank(in, A, B, s);
  };
  return run_stack(config, base, x, hook);
}

Var base_forward(const ModelConfig& config, const BoundBase& base, std::span<const int> tokens,
                 std::size_t batch, std::size_t length) {
  Var x = embed(config, base, tokens, batch, length);
  return run_stack(config, base, x, [](std::size_t, Site, Var) { return std::optional<Var>{}; });
}

BaseParameters merged_parameters(const Model& model, std::size_t k) {
  if (k >= model.bank.hypotheses) throw InputError("merged_parameters: hypothesis index out of range");
  BaseParameters merged = model.base;
  const double s = model.config.lora_scale();
  for (std::size_t l = 0; l < merged.blocks.size(); ++l) {
    for (std::size_t i = 0; i < model.bank.sites.size(); ++i) {
      const auto& pair = model.bank.blocks[l][i];
      const std::size_t din = pair.A.dim(1), r = pair.A.dim(2), dout = pair.B.dim(2);
      Tensor* w = nullptr;
      switch (model.bank.sites[i]) {
        case Site::Query: w = &merged.blocks[l].wq; break;
        case Site::Key: w = &merged.blocks[l].wk; break;
        case Site::Value: w = &merged.blocks[l].wv; break;
        case Site::Output: w = &merged.blocks[l].wo; break;
        case Site::FfnUp: w = &merged.blocks[l].w_up; break;
        case Site::FfnDown: w = &merged.blocks[l].w_down; break;
      }
      const double* A = pair.A.data() + k * din * r;
      const double* B = pair.B.data() + k * r * dout;
      for (std::size_t a = 0; a < din; ++a) {
        for (std::size_t j = 0; j < r; ++j) {
          const double coef = s * A[a * r + j];
          if (coef == 0.0) continue;
          double* row = w->data() + a * dout;
          const double* brow = B + j * dout;
          for (std::size_t o = 0; o < dout; ++o) row[o] += coef * brow[o];
        }
      }
    }
  }
  return merged;
}

namespace {
void eval_into(const ModelConfig& config, const BaseParameters& params, std::span<const int> tokens,
               std::size_t batch, std::size_t length, double* out) {
  const std::size_t V = config.vocab_size;
  for (std::size_t start = 0; start < batch; start += kEvalChunk) {
    const std::size_t n = std::min(kEvalChunk, batch - start);
    ad::Tape tape;
    const BoundBase bound = bind(tape, params, false);
    Var logits = base_forward(config, bound, tokens.subspan(start * length, n * length), n, length);
    std::copy_n(logits.value().data(), n * length * V, out + start * length * V);
  }
}
}  // namespace

Tensor eval_logits(const Model& model, std::optional<std::size_t> k, std::span<const int> tokens,
                   std::size_t batch, std::size_t length) {
  Tensor out(Shape{batch, length, model.config.vocab_size});
  if (k) {
    eval_into(model.config, merged_parameters(model, *k), tokens, batch, length, out.data());
  } else {
    eval_into(model.config, model.base, tokens, batch, length, out.data());
  }
  return out;
}

Tensor eval_logits(const Model& model, std::span<const int> tokens, std::size_t batch, std::size_t length) {
  const std::size_t K = model.bank.hypotheses;
  const std::size_t V = model.config.vocab_size;
  Tensor out(Shape{K, batch, length, V});
  for (std::size_t k = 0; k < K; ++k) {
    eval_into(model.config, merged_parameters(model, k), tokens, batch, length,
              out.data() + k * batch * length * V);
  }
  return out;
}

TransitionEstimate predicted_transition_matrix(const Model& model, std::optional<std::size_t> k,
                                               std::size_t samples, std::size_t length,
                                               std::uint64_t seed, std::span<const double> initial) {
  const std::size_t V = model.config.vocab_size;
  if (length < 2 || length > model.config.max_len) {
    throw InputError("predicted_transition_matrix: length must lie in [2, max_len]");
  }
  if (!initial.empty() && initial.size() != V) {
    throw InputError("predicted_transition_matrix: initial distribution has wrong size");
  }
  const std::vector<double> uniform(V, 1.0);
  const std::span<const double> init = initial.empty() ? std::span<const double>(uniform) : initial;
  const BaseParameters params = k ? merged_parameters(model, *k) : model.base;

  std::vector<Rng> rngs;
  rngs.reserve(samples);
  for (std::size_t i = 0; i < samples; ++i) rngs.emplace_back(derive_seed(seed, i));
  std::vector<int> seqs(samples * length);
  for (std::size_t i = 0; i < samples; ++i) seqs[i * length] = static_cast<int>(rngs[i].categorical(init));

  std::vector<int> prefix;
  std::vector<double> logits_buf;
  std::vector<double> probs(V);
  for (std::size_t t = 1; t < length; ++t) {
    prefix.resize(samples * t);
    for (std::size_t i = 0; i < samples; ++i) {
      std::copy_n(seqs.data() + i * length, t, prefix.data() + i * t);
    }
    logits_buf.assign(samples * t * V, 0.0);
    eval_into(model.config, params, prefix, samples, t, logits_buf.data());
    for (std::size_t i = 0; i < samples; ++i) {
      const double* row = logits_buf.data() + (i * t + t - 1) * V;
      const double mx = *std::max_element(row, row + V);
      for (std::size_t j = 0; j < V; ++j) probs[j] = std::exp(row[j] - mx);
      seqs[i * length + t] = static_cast<int>(rngs[i].categorical(probs));
    }
  }

  std::vector<double> counts(V * V, 0.0);
  TransitionEstimate est;
  est.row_visits.assign(V, 0);
  for (std::size_t i = 0; i < samples; ++i) {
    for (std::size_t t = 1; t < length; ++t) {
      const auto from = static_cast<std::size_t>(seqs[i * length + t - 1]);
      const auto to = static_cast<std::size_t>(seqs[i * length + t]);
      counts[from * V + to] += 1.0;
      ++est.row_visits[from];
    }
  }
  for (std::size_t i = 0; i < V; ++i) {
    if (est.row_visits[i] == 0) {
      est.unvisited_rows.push_back(i);
      for (std::size_t j = 0; j < V; ++j) counts[i * V + j] = 1.0 / static_cast<double>(V);
      continue;
    }
    const double n = static_cast<double>(est.row_visits[i]);
    double sum = 0.0;
    for (std::size_t j = 0; j + 1 < V; ++j) {
      counts[i * V + j] /= n;
      sum += counts[i * V + j];
    }
    counts[i * V + V - 1] = std::max(0.0, 1.0 - sum);
  }
  est.matrix = markov::TransitionMatrix::from_flat(V, std::move(counts));
  return est;
}

// Checkpoints ----------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume little-endian");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("save_checkpoint: cannot open " + path.string());
  const ModelConfig& c = model.config;
  std::ostringstream h;
  h << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  h << "config vocab_size " << c.vocab_size << '\n'
    << "config hidden " << c.hidden << '\n'
    << "config layers " << c.layers << '\n'
    << "config heads " << c.heads << '\n'
    << "config window " << c.window << '\n'
    << "config max_len " << c.max_len << '\n'
    << "config ffn_mult " << c.ffn_mult << '\n'
    << "config lora_rank " << c.lora_rank << '\n'
    << "config lora_alpha " << format_double(c.lora_alpha) << '\n'
    << "config lora_dropout " << format_double(c.lora_dropout) << '\n'
    << "config hypotheses " << c.hypotheses << '\n'
    << "config adapter_sites " << sites_string(c.adapter_sites) << '\n'
    << "config base_seed " << c.base_seed << '\n';
  std::vector<const Tensor*> payload;
  auto record = [&](const std::string& prefix) {
    return [&, prefix](const std::string& name, const Tensor& t) {
      h << "tensor " << prefix << name << ' ' << t.rank();
      for (std::size_t d : t.shape()) h << ' ' << d;
      h << '\n';
      payload.push_back(&t);
    };
  };
  model.base.for_each(record("base."));
  model.bank.for_each(record("bank."));
  h << "end\n";
  const std::string header = h.str();
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const Tensor* t : payload) {
    out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
  }
  if (!out) throw InputError("save_checkpoint: write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("load_checkpoint: cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  {
    std::istringstream ls(line);
    std::string magic;
    int version = 0;
    ls >> magic >> version;
    if (magic != kCheckpointMagic) throw InputError("load_checkpoint: not a checkpoint file: " + path.string());
    if (version != kCheckpointVersion) {
      throw InputError("load_checkpoint: unsupported format version " + std::to_string(version));
    }
  }
  ModelConfig c;
  std::vector<std::pair<std::string, Shape>> directory;
  std::unordered_map<std::string, std::string> cfg;
  while (std::getline(in, line) && line != "end") {
    std::istringstream ls(line);
    std::string kind, name;
    ls >> kind >> name;
    if (kind == "config") {
      std::string value;
      ls >> value;
      cfg[name] = value;
    } else if (kind == "tensor") {
      std::size_t rank = 0;
      ls >> rank;
      Shape s(rank);
      for (auto& d : s) ls >> d;
      if (!ls) throw InputError("load_checkpoint: malformed tensor header: " + line);
      directory.emplace_back(name, std::move(s));
    } else {
      throw InputError("load_checkpoint: unexpected header line: " + line);
    }
  }
  if (line != "end") throw InputError("load_checkpoint: truncated header");
  auto get = [&](const char* key) -> const std::string& {
    const auto it = cfg.find(key);
    if (it == cfg.end()) throw InputError(std::string("load_checkpoint: missing config key ") + key);
    return it->second;
  };
  auto to_size = [&](const char* key) { return static_cast<std::size_t>(std::stoull(get(key))); };
  auto to_double = [&](const char* key) {
    double v = 0.0;
    const std::string& s = get(key);
    std::from_chars(s.data(), s.data() + s.size(), v);
    return v;
  };
  c.vocab_size = to_size("vocab_size");
  c.hidden = to_size("hidden");
  c.layers = to_size("layers");
  c.heads = to_size("heads");
  c.window = to_size("window");
  c.max_len = to_size("max_len");
  c.ffn_mult = to_size("ffn_mult");
  c.lora_rank = to_size("lora_rank");
  c.lora_alpha = to_double("lora_alpha");
  c.lora_dropout = to_double("lora_dropout");
  c.hypotheses = to_size("hypotheses");
  c.adapter_sites = parse_sites(get("adapter_sites"));
  c.base_seed = std::stoull(get("base_seed"));
  c.validate();

  // Allocate the expected layout, then check the directory against it.
  Model m = init(c, 0);
  std::vector<std::pair<std::string, Tensor*>> slots;
  m.base.for_each([&](const std::string& n, Tensor& t) { slots.emplace_back("base." + n, &t); });
  m.bank.for_each([&](const std::string& n, Tensor& t) { slots.emplace_back("bank." + n, &t); });
  if (slots.size() != directory.size()) throw InputError("load_checkpoint: tensor count mismatch");
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].first != directory[i].first || slots[i].second->shape() != directory[i].second) {
      throw InputError("load_checkpoint: unexpected tensor " + directory[i].first);
    }
    in.read(reinterpret_cast<char*>(slots[i].second->data()),
            static_cast<std::streamsize>(slots[i].second->size() * sizeof(double)));
    if (!in) throw InputError("load_checkpoint: truncated payload for " + directory[i].first);
  }
  return m;
}

}  // namespace mclseq::model
