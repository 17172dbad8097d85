#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tape owns every value produced during a forward pass. Ops are free
// functions taking and returning Var handles; an op records a backward
// closure only when at least one input requires a gradient, so evaluation
// on constant inputs costs nothing beyond the forward arithmetic.
//
// Broadcasting is limited to the leading (batch) dimensions: a rank-2 right
// operand of matmul or a trailing-shape operand of add is shared across all
// leading indices.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "mclseq/tensor.hpp"

namespace mclseq::ad {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Accumulates into the gradients of the inputs. `input_grads[i]` is null
/// when input i does not require a gradient.
using BackwardFn = std::function<void(const Tensor& out_grad, std::span<Tensor* const> input_grads)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op output. `backward` is dropped if no input requires grad.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  /// Reverse sweep from a scalar (size-1) loss. Each node's closure runs at
  /// most once, in reverse recording order. Throws ContractError otherwise.
  void backward(Var loss);

  /// Gradient of the last backward() w.r.t. `v`; zeros if none reached it.
  Tensor grad(Var v) const;

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };
  Tensor& grad_buffer(std::size_t id);

  // deque: references to node values stay valid as the tape grows.
  std::deque<Node> nodes_;
};

// Arithmetic -----------------------------------------------------------------

/// a[..., n, k] x b[k, m] (b shared across leading dims) or batched
/// a[B..., n, k] x b[B..., k, m] with identical leading dims.
Var matmul(Var a, Var b);
/// Swap the last two axes.
Var transpose(Var a);
/// Elementwise sum; `b` may also match the trailing dims of `a` (bias).
Var add(Var a, Var b);
Var scale(Var a, double s);
/// Elementwise product of equal shapes.
Var mul(Var a, Var b);
Var reshape(Var a, Shape shape);
Var concat(std::span<const Var> parts, int axis);
/// Elements [begin, end) along `axis`.
Var slice(Var a, int axis, std::size_t begin, std::size_t end);
/// Rows of `table` [V, d] picked by `ids`; output shape = ids_shape + [d].
Var embedding(Var table, std::span<const int> ids, const Shape& ids_shape);

// Nonlinearities -------------------------------------------------------------

/// softmax(a / temperature) along `axis`. Throws DomainError if temperature <= 0.
Var softmax(Var a, int axis = -1, double temperature = 1.0);
Var log(Var a);
Var exp(Var a);
/// tanh approximation used by GPT-2.
Var gelu(Var a);
/// Normalizes over the last axis, then gamma * xhat + beta.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

// Attention ------------------------------------------------------------------

/// Score assigned to masked attention entries; softmax maps it to exactly 0.
inline constexpr double kMaskedScore = -1e300;

/// q, k: [N, T, H*dh] -> scores [N, H, T, T], q.k / sqrt(dh) where key
/// position s is visible from query t iff t - window < s <= t; masked
/// entries hold kMaskedScore.
Var attention_scores(Var q, Var k, std::size_t heads, std::size_t window);
/// probs [N, H, T, T], v [N, T, H*dh] -> [N, T, H*dh].
Var attention_apply(Var probs, Var v, std::size_t heads);

// Low-rank adapters ----------------------------------------------------------

/// Block-diagonal low-rank update. x [G*n, ..., din] is split into G
/// contiguous row groups; group g is mapped through scale * x_g A_g B_g with
/// A [G, din, r], B [G, r, dout]. Output shape = x leading dims + [dout].
Var grouped_low_rank(Var x, Var A, Var B, double scale);

// Losses ---------------------------------------------------------------------

/// Next-token log-likelihood: logits [M, T, V], tokens [M, T] -> [M] with
/// entry sum_{t=1}^{T-1} log softmax(logits[m, t-1])[tokens[m, t]]. The
/// first token is never scored.
Var sequence_log_likelihood(Var logits, std::span<const int> tokens);
/// Aligned targets: mean over positions of -log softmax(logits[m, t])[targets[m, t]],
/// skipping t = 0 when `ignore_first` is set. Returns a scalar.
Var cross_entropy(Var logits, std::span<const int> targets, bool ignore_first = false);
Var sum(Var a);
/// sum_i w_i a_i with constant weights of the same size.
Var weighted_sum(Var a, const Tensor& weights);

}  // namespace mclseq::ad
