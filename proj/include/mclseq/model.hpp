#pragma once

// GPT-style causal transformer with windowed attention, one frozen base
// parameter set and a bank of K low-rank adapter sets (the hypotheses).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mclseq/autodiff.hpp"
#include "mclseq/markov.hpp"

namespace mclseq::model {

using ad::Shape;
using ad::Tensor;
using ad::Var;

/// Projections that carry adapters.
enum class Site { Query, Key, Value, Output, FfnUp, FfnDown };

struct ModelConfig {
  std::size_t vocab_size = 2;
  std::size_t hidden = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t window = 5;
  std::size_t max_len = 32;
  std::size_t ffn_mult = 4;
  std::size_t lora_rank = 32;
  double lora_alpha = 32.0;
  double lora_dropout = 0.0;
  std::size_t hypotheses = 2;
  /// Projections that carry adapters, in canonical order. The default
  /// (all four attention projections) gives 65,536 trainable parameters for
  /// both K=2 r=32 and K=1 r=64.
  std::vector<Site> adapter_sites{Site::Query, Site::Key, Site::Value, Site::Output};
  /// Seed of the frozen base weights. Kept apart from the adapter seed so
  /// that every run shares one base model, as a pretrained model would.
  std::uint64_t base_seed = 0;

  /// Throws DomainError on inconsistent values.
  void validate() const;
  std::size_t ffn_width() const { return ffn_mult * hidden; }
  double lora_scale() const { return lora_alpha / static_cast<double>(lora_rank); }
};

/// config.adapter_sites sorted into canonical order.
std::vector<Site> adapted_sites(const ModelConfig& config);
const char* site_name(Site site);
/// Accepts q, k, v, o, up, down. Throws InputError otherwise.
Site parse_site(const std::string& name);
/// Comma-separated site names, e.g. "q,k,v,o".
std::string sites_string(std::span<const Site> sites);
std::vector<Site> parse_sites(const std::string& text);

struct BlockParameters {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv;  ///< [d, d], no bias
  Tensor wo, bo;      ///< [d, d], [d]
  Tensor ln2_gain, ln2_bias;
  Tensor w_up, b_up;      ///< [d, 4d], [4d]
  Tensor w_down, b_down;  ///< [4d, d], [d]
};

/// Frozen parameters. The output head is tied to the token embedding.
struct BaseParameters {
  Tensor token_embedding;     ///< [V, d]
  Tensor position_embedding;  ///< [max_len, d]
  std::vector<BlockParameters> blocks;
  Tensor lnf_gain, lnf_bias;

  /// Visits every buffer with a stable name.
  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  std::size_t parameter_count() const;
};

/// A single hypothesis: for each block and adapted site, A [din, r] and B [r, dout].
struct LoraPair {
  Tensor A, B;
};
struct LoraAdapterSet {
  std::vector<std::vector<LoraPair>> blocks;  ///< [block][site index]
};

/// K adapter sets stored stacked per site: A [K, din, r], B [K, r, dout].
struct HypothesisBank {
  std::size_t hypotheses = 0;
  std::vector<Site> sites;
  std::vector<std::vector<LoraPair>> blocks;  ///< [block][site index], stacked over K

  LoraAdapterSet adapter(std::size_t k) const;
  void set_adapter(std::size_t k, const LoraAdapterSet& set);
  /// Bank containing only hypotheses `ks` (in that order).
  HypothesisBank select(std::span<const std::size_t> ks) const;

  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  std::size_t parameter_count() const;
};

struct Model {
  ModelConfig config;
  BaseParameters base;
  HypothesisBank bank;
};

/// Base ~ N(0, 0.02^2) from config.base_seed (LayerNorm gains 1, biases 0);
/// each A ~ N(0, 1/r) drawn independently per hypothesis from `seed`; B = 0.
Model init(const ModelConfig& config, std::uint64_t seed);

/// Parameter buffers bound to a tape for one forward pass.
struct BoundBlock {
  Var ln1_gain, ln1_bias, wq, wk, wv, wo, bo, ln2_gain, ln2_bias, w_up, b_up, w_down, b_down;
};
struct BoundBase {
  Var token_embedding, position_embedding, lnf_gain, lnf_bias;
  std::vector<BoundBlock> blocks;
};
struct BoundBank {
  std::vector<std::vector<std::pair<Var, Var>>> blocks;  ///< (A, B) per site
};
BoundBase bind(ad::Tape& tape, const BaseParameters& base, bool requires_grad);
BoundBank bind(ad::Tape& tape, const HypothesisBank& bank, bool requires_grad);

struct ForwardOptions {
  /// Enables adapter dropout (when config.lora_dropout > 0).
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

/// Logits [b, T, V] of hypothesis k. Adapters enter as (alpha/r) * x A_k B_k.
/// Throws InputError for out-of-range tokens or T > max_len.
Var forward_hypothesis(const ModelConfig& config, const BoundBase& base, const BoundBank& bank,
                       std::size_t k, std::span<const int> tokens, std::size_t batch,
                       std::size_t length, const ForwardOptions& options = {});

/// All hypotheses in one pass: the batch is replicated K times and every
/// adapted projection applies the block-diagonal adapter map. Returns
/// logits [K*b, T, V]; rows [k*b, (k+1)*b) belong to hypothesis k.
Var grouped_forward(const ModelConfig& config, const BoundBase& base, const BoundBank& bank,
                    std::span<const int> tokens, std::size_t batch, std::size_t length,
                    const ForwardOptions& options = {});

/// Logits of the base model alone, [b, T, V].
Var base_forward(const ModelConfig& config, const BoundBase& base, std::span<const int> tokens,
                 std::size_t batch, std::size_t length);

/// Inference-only logits [K, b, T, V]. Adapters are merged into the base
/// weights (W + s A_k B_k) and the batch is evaluated in chunks.
Tensor eval_logits(const Model& model, std::span<const int> tokens, std::size_t batch,
                   std::size_t length);
/// Same for one hypothesis, or the bare base model when `k` is empty. [b, T, V].
Tensor eval_logits(const Model& model, std::optional<std::size_t> k, std::span<const int> tokens,
                   std::size_t batch, std::size_t length);

/// Base parameters with hypothesis k folded into the projection weights.
BaseParameters merged_parameters(const Model& model, std::size_t k);

struct TransitionEstimate {
  markov::TransitionMatrix matrix;
  std::vector<std::size_t> row_visits;
  /// States never visited; their rows were set uniform.
  std::vector<std::size_t> unvisited_rows;
};

/// Samples `samples` sequences of `length` tokens at temperature 1 (first
/// token from `initial`, uniform if empty), counts bigrams from position 2
/// onward and row-normalizes.
TransitionEstimate predicted_transition_matrix(const Model& model, std::optional<std::size_t> k,
                                               std::size_t samples, std::size_t length,
                                               std::uint64_t seed,
                                               std::span<const double> initial = {});

/// Versioned checkpoint: text header (format version, config, tensor
/// directory) followed by raw little-endian float64 payloads. Round trips
/// are bit-exact.
void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace mclseq::model
