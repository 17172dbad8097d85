#include "mclseq/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "mclseq/errors.hpp"

namespace mclseq::ad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap cmap(const double* p, std::size_t rows, std::size_t cols) {
  return ConstMatMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MatMap map(double* p, std::size_t rows, std::size_t cols) {
  return MatMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                   shape_string(b));
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError(std::string(op) + ": axis out of range");
  return static_cast<std::size_t>(a);
}

// (outer, extent, inner) decomposition around an axis.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};
AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw ContractError("operation on an empty Var");
  return a.tape();
}

void check_same_tape(Var a, Var b) {
  if (&tape_of(a) != &tape_of(b)) throw ContractError("operands recorded on different tapes");
}

}  // namespace

// Var / Tape ------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
#ifndef NDEBUG
  if (!value.all_finite()) throw NumericError("non-finite value produced by an op");
#endif
  Node n;
  n.value = std::move(value);
  for (const Var& v : inputs) {
    if (v.tape_ != this) throw ContractError("op input recorded on a different tape");
    n.requires_grad = n.requires_grad || nodes_[v.id_].requires_grad;
  }
  if (n.requires_grad) {
    n.inputs.reserve(inputs.size());
    for (const Var& v : inputs) n.inputs.push_back(v.id_);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw ContractError("backward: loss recorded on a different tape");
  if (nodes_[loss.id_].value.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_string(nodes_[loss.id_].value.shape()));
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  if (!nodes_[loss.id_].requires_grad) return;
  grad_buffer(loss.id_)[0] = 1.0;

  std::vector<Tensor*> input_grads;
  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.backward) continue;
    input_grads.clear();
    for (std::size_t in : n.inputs) {
      input_grads.push_back(nodes_[in].requires_grad ? &grad_buffer(in) : nullptr);
    }
    n.backward(n.grad, input_grads);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id_];
  return n.has_grad ? n.grad : Tensor(n.value.shape(), 0.0);
}

// Arithmetic -----------------------------------------------------------------

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() < 2 || B.rank() < 2) shape_fail("matmul", A.shape(), B.shape());
  const std::size_t n = A.dim(-2), k = A.dim(-1), m = B.dim(-1);
  if (B.dim(-2) != k) shape_fail("matmul", A.shape(), B.shape());

  Shape out_shape(A.shape().begin(), A.shape().end() - 1);
  out_shape.push_back(m);

  if (B.rank() == 2) {
    const std::size_t rows = A.size() / k;
    Tensor C(out_shape);
    map(C.data(), rows, m).noalias() = cmap(A.data(), rows, k) * cmap(B.data(), k, m);
    const Tensor* pa = &A;
    const Tensor* pb = &B;
    return tape_of(a).record(std::move(C), {a, b}, [pa, pb, rows, k, m](const Tensor& g, std::span<Tensor* const> gi) {
      const auto G = cmap(g.data(), rows, m);
      if (gi[0]) map(gi[0]->data(), rows, k).noalias() += G * cmap(pb->data(), k, m).transpose();
      if (gi[1]) map(gi[1]->data(), k, m).noalias() += cmap(pa->data(), rows, k).transpose() * G;
    });
  }

  if (A.rank() != B.rank() || !std::equal(A.shape().begin(), A.shape().end() - 2, B.shape().begin())) {
    shape_fail("matmul", A.shape(), B.shape());
  }
  const std::size_t batch = A.size() / (n * k);
  Tensor C(out_shape);
  for (std::size_t i = 0; i < batch; ++i) {
    map(C.data() + i * n * m, n, m).noalias() =
        cmap(A.data() + i * n * k, n, k) * cmap(B.data() + i * k * m, k, m);
  }
  const Tensor* pa = &A;
  const Tensor* pb = &B;
  return tape_of(a).record(std::move(C), {a, b}, [pa, pb, batch, n, k, m](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < batch; ++i) {
      const auto G = cmap(g.data() + i * n * m, n, m);
      if (gi[0]) {
        map(gi[0]->data() + i * n * k, n, k).noalias() +=
            G * cmap(pb->data() + i * k * m, k, m).transpose();
      }
      if (gi[1]) {
        map(gi[1]->data() + i * k * m, k, m).noalias() +=
            cmap(pa->data() + i * n * k, n, k).transpose() * G;
      }
    }
  });
}

Var transpose(Var a) {
  const Tensor& A = a.value();
  if (A.rank() < 2) throw ShapeError("transpose: need rank >= 2, got " + shape_string(A.shape()));
  const std::size_t r = A.dim(-2), c = A.dim(-1);
  const std::size_t batch = A.size() / (r * c);
  Shape s = A.shape();
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  Tensor out(s);
  for (std::size_t i = 0; i < batch; ++i) {
    map(out.data() + i * r * c, c, r) = cmap(A.data() + i * r * c, r, c).transpose();
  }
  return tape_of(a).record(std::move(out), {a}, [batch, r, c](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < batch; ++i) {
      map(gi[0]->data() + i * r * c, r, c) += cmap(g.data() + i * r * c, c, r).transpose();
    }
  });
}

Var add(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const bool same = A.shape() == B.shape();
  const bool trailing = B.rank() <= A.rank() &&
                        std::equal(B.shape().begin(), B.shape().end(), A.shape().end() - static_cast<long>(B.rank()));
  if (!same && !trailing) shape_fail("add", A.shape(), B.shape());
  const std::size_t inner = B.size();
  const std::size_t outer = A.size() / std::max<std::size_t>(inner, 1);
  Tensor out = A;
  for (std::size_t o = 0; o < outer; ++o) {
    double* dst = out.data() + o * inner;
    const double* src = B.data();
    for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
  }
  return tape_of(a).record(std::move(out), {a, b}, [outer, inner](const Tensor& g, std::span<Tensor* const> gi) {
    if (gi[0]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
    }
    if (gi[1]) {
      for (std::size_t o = 0; o < outer; ++o) {
        const double* src = g.data() + o * inner;
        double* dst = gi[1]->data();
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  return tape_of(a).record(std::move(out), {a}, [s](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += s * g[i];
  });
}

Var mul(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) shape_fail("mul", A.shape(), B.shape());
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  const Tensor* pa = &A;
  const Tensor* pb = &B;
  return tape_of(a).record(std::move(out), {a, b}, [pa, pb](const Tensor& g, std::span<Tensor* const> gi) {
    if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * (*pb)[i];
    if (gi[1]) for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * (*pa)[i];
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return tape_of(a).record(std::move(out), {a}, [](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
  });
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const Tensor& first = parts[0].value();
  const std::size_t ax = normalize_axis(axis, first.rank(), "concat");
  Shape out_shape = first.shape();
  out_shape[ax] = 0;
  std::vector<std::size_t> extents;
  for (const Var& p : parts) {
    check_same_tape(parts[0], p);
    const Shape& s = p.value().shape();
    if (s.size() != first.rank()) shape_fail("concat", first.shape(), s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != first.shape()[i]) shape_fail("concat", first.shape(), s);
    }
    extents.push_back(s[ax]);
    out_shape[ax] += s[ax];
  }
  const AxisView ov = axis_view(out_shape, ax);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& src = parts[p].value();
    const std::size_t chunk = extents[p] * ov.inner;
    for (std::size_t o = 0; o < ov.outer; ++o) {
      std::copy_n(src.data() + o * chunk, chunk, out.data() + o * ov.extent * ov.inner + offset * ov.inner);
    }
    offset += extents[p];
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape_of(parts[0]).record(std::move(out), std::move(inputs),
                                  [ov, extents](const Tensor& g, std::span<Tensor* const> gi) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < gi.size(); ++p) {
      const std::size_t chunk = extents[p] * ov.inner;
      if (gi[p]) {
        for (std::size_t o = 0; o < ov.outer; ++o) {
          const double* src = g.data() + o * ov.extent * ov.inner + off * ov.inner;
          double* dst = gi[p]->data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
      off += extents[p];
    }
  });
}

Var slice(Var a, int axis, std::size_t begin, std::size_t end) {
  const Tensor& A = a.value();
  const std::size_t ax = normalize_axis(axis, A.rank(), "slice");
  if (begin > end || end > A.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of bounds for " + shape_string(A.shape()));
  }
  const AxisView v = axis_view(A.shape(), ax);
  Shape s = A.shape();
  s[ax] = end - begin;
  Tensor out(s);
  const std::size_t chunk = (end - begin) * v.inner;
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(A.data() + o * v.extent * v.inner + begin * v.inner, chunk, out.data() + o * chunk);
  }
  return tape_of(a).record(std::move(out), {a}, [v, begin, chunk](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t o = 0; o < v.outer; ++o) {
      double* dst = gi[0]->data() + o * v.extent * v.inner + begin * v.inner;
      const double* src = g.data() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

Var embedding(Var table, std::span<const int> ids, const Shape& ids_shape) {
  const Tensor& W = table.value();
  if (W.rank() != 2) throw ShapeError("embedding: table must be rank 2, got " + shape_string(W.shape()));
  if (shape_size(ids_shape) != ids.size()) throw ShapeError("embedding: ids do not match ids_shape");
  const std::size_t vocab = W.dim(0), d = W.dim(1);
  Shape s = ids_shape;
  s.push_back(d);
  Tensor out(s);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InputError("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(W.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return tape_of(table).record(std::move(out), {table}, [idx = std::move(idx), d](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* dst = gi[0]->data() + static_cast<std::size_t>(idx[i]) * d;
      const double* src = g.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

// Nonlinearities -------------------------------------------------------------

Var softmax(Var a, int axis, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("softmax: temperature must be positive");
  const Tensor& A = a.value();
  const std::size_t ax = normalize_axis(axis, A.rank(), "softmax");
  const AxisView v = axis_view(A.shape(), ax);
  Tensor out(A.shape());
  const double inv_t = 1.0 / temperature;
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.extent * v.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v.extent; ++j) mx = std::max(mx, A[base + j * v.inner] * inv_t);
      double z = 0.0;
      for (std::size_t j = 0; j < v.extent; ++j) {
        const double e = std::exp(A[base + j * v.inner] * inv_t - mx);
        out[base + j * v.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < v.extent; ++j) out[base + j * v.inner] /= z;
    }
  }
  Tensor y_saved = a.requires_grad() ? out : Tensor();
  return tape_of(a).record(std::move(out), {a}, [y = std::move(y_saved), v, inv_t](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.extent * v.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < v.extent; ++j) dot += y[base + j * v.inner] * g[base + j * v.inner];
        for (std::size_t j = 0; j < v.extent; ++j) {
          const std::size_t i = base + j * v.inner;
          (*gi[0])[i] += inv_t * y[i] * (g[i] - dot);
        }
      }
    }
  });
}

Var log(Var a) {
  const Tensor& A = a.value();
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) {
    if (!(A[i] > 0.0)) throw DomainError("log: non-positive input");
    out[i] = std::log(A[i]);
  }
  const Tensor* pa = &A;
  return tape_of(a).record(std::move(out), {a}, [pa](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] / (*pa)[i];
  });
}

Var exp(Var a) {
  const Tensor& A = a.value();
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = std::exp(A[i]);
  Tensor copy = out;
  return tape_of(a).record(std::move(out), {a}, [y = std::move(copy)](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * y[i];
  });
}

Var gelu(Var a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  const Tensor& A = a.value();
  const auto X = Eigen::Map<const Eigen::ArrayXd>(A.data(), static_cast<Eigen::Index>(A.size()));
  // tanh(u) = 1 - 2 / (exp(2u) + 1); Eigen vectorizes exp but not tanh for doubles.
  auto th = std::make_shared<Eigen::ArrayXd>(1.0 - 2.0 / ((2.0 * c * (X + k * X.cube())).exp() + 1.0));
  Tensor out(A.shape());
  Eigen::Map<Eigen::ArrayXd>(out.data(), X.size()) = 0.5 * X * (1.0 + *th);
  const Tensor* pa = &A;
  return tape_of(a).record(std::move(out), {a}, [pa, th](const Tensor& g, std::span<Tensor* const> gi) {
    const auto X = Eigen::Map<const Eigen::ArrayXd>(pa->data(), th->size());
    const auto G = Eigen::Map<const Eigen::ArrayXd>(g.data(), th->size());
    Eigen::Map<Eigen::ArrayXd>(gi[0]->data(), th->size()) +=
        G * (0.5 * (1.0 + *th) + 0.5 * c * X * (1.0 - th->square()) * (1.0 + 3.0 * k * X.square()));
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  check_same_tape(x, gamma);
  check_same_tape(x, beta);
  const Tensor& X = x.value();
  const std::size_t d = X.dim(-1);
  if (gamma.value().shape() != Shape{d} || beta.value().shape() != Shape{d}) {
    shape_fail("layer_norm", X.shape(), gamma.value().shape());
  }
  const std::size_t rows = X.size() / d;
  Tensor out(X.shape());
  Tensor xhat(X.shape());
  std::vector<double> rstd(rows);
  const double* gm = gamma.value().data();
  const double* bt = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = X.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += src[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (src[j] - mean) * (src[j] - mean);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (src[j] - mean) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = gm[j] * h + bt[j];
    }
  }
  const Tensor* pg = &gamma.value();
  return tape_of(x).record(std::move(out), {x, gamma, beta},
                           [xhat = std::move(xhat), rstd = std::move(rstd), pg, rows, d](const Tensor& g, std::span<Tensor* const> gi) {
    const double inv_d = 1.0 / static_cast<double>(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gr = g.data() + r * d;
      const double* hr = xhat.data() + r * d;
      if (gi[1]) for (std::size_t j = 0; j < d; ++j) (*gi[1])[j] += gr[j] * hr[j];
      if (gi[2]) for (std::size_t j = 0; j < d; ++j) (*gi[2])[j] += gr[j];
      if (gi[0]) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = gr[j] * (*pg)[j];
          mean_dh += dh;
          mean_dh_h += dh * hr[j];
        }
        mean_dh *= inv_d;
        mean_dh_h *= inv_d;
        double* dx = gi[0]->data() + r * d;
        for (std::size_t j = 0; j < d; ++j) {
          dx[j] += rstd[r] * (gr[j] * (*pg)[j] - mean_dh - hr[j] * mean_dh_h);
        }
      }
    }
  });
}

// Attention ------------------------------------------------------------------

Var attention_scores(Var q, Var k, std::size_t heads, std::size_t window) {
  check_same_tape(q, k);
  const Tensor& Q = q.value();
  const Tensor& Kt = k.value();
  if (Q.rank() != 3 || Q.shape() != Kt.shape()) shape_fail("attention_scores", Q.shape(), Kt.shape());
  if (heads == 0 || Q.dim(2) % heads != 0) {
    throw ShapeError("attention_scores: width " + std::to_string(Q.dim(2)) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  if (window == 0) throw DomainError("attention_scores: window must be at least 1");
  const std::size_t N = Q.dim(0), T = Q.dim(1), D = Q.dim(2), dh = D / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor out(Shape{N, heads, T, T}, kMaskedScore);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        const double* qr = Q.data() + (n * T + t) * D + h * dh;
        double* row = out.data() + ((n * heads + h) * T + t) * T;
        const std::size_t s0 = t + 1 > window ? t + 1 - window : 0;
        for (std::size_t s = s0; s <= t; ++s) {
          const double* kr = Kt.data() + (n * T + s) * D + h * dh;
          double dot = 0.0;
          for (std::size_t j = 0; j < dh; ++j) dot += qr[j] * kr[j];
          row[s] = dot * sc;
        }
      }
    }
  }
  const Tensor* pq = &Q;
  const Tensor* pk = &Kt;
  return tape_of(q).record(std::move(out), {q, k},
                           [pq, pk, N, T, D, dh, heads, window, sc](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t qoff = (n * T + t) * D + h * dh;
          const double* grow = g.data() + ((n * heads + h) * T + t) * T;
          const std::size_t s0 = t + 1 > window ? t + 1 - window : 0;
          for (std::size_t s = s0; s <= t; ++s) {
            const double gs = grow[s] * sc;
            if (gs == 0.0) continue;
            const std::size_t koff = (n * T + s) * D + h * dh;
            if (gi[0]) for (std::size_t j = 0; j < dh; ++j) (*gi[0])[qoff + j] += gs * (*pk)[koff + j];
            if (gi[1]) for (std::size_t j = 0; j < dh; ++j) (*gi[1])[koff + j] += gs * (*pq)[qoff + j];
          }
        }
      }
    }
  });
}

Var attention_apply(Var probs, Var v, std::size_t heads) {
  check_same_tape(probs, v);
  const Tensor& P = probs.value();
  const Tensor& V = v.value();
  if (V.rank() != 3 || P.rank() != 4) shape_fail("attention_apply", P.shape(), V.shape());
  const std::size_t N = V.dim(0), T = V.dim(1), D = V.dim(2);
  if (heads == 0 || D % heads != 0 || P.shape() != Shape{N, heads, T, T}) {
    shape_fail("attention_apply", P.shape(), V.shape());
  }
  const std::size_t dh = D / heads;
  Tensor out(V.shape());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        const double* prow = P.data() + ((n * heads + h) * T + t) * T;
        double* orow = out.data() + (n * T + t) * D + h * dh;
        for (std::size_t s = 0; s < T; ++s) {
          const double p = prow[s];
          if (p == 0.0) continue;
          const double* vr = V.data() + (n * T + s) * D + h * dh;
          for (std::size_t j = 0; j < dh; ++j) orow[j] += p * vr[j];
        }
      }
    }
  }
  const Tensor* pp = &P;
  const Tensor* pv = &V;
  return tape_of(probs).record(std::move(out), {probs, v},
                               [pp, pv, N, T, D, dh, heads](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t poff = ((n * heads + h) * T + t) * T;
          const double* grow = g.data() + (n * T + t) * D + h * dh;
          for (std::size_t s = 0; s < T; ++s) {
            const double* vr = pv->data() + (n * T + s) * D + h * dh;
            if (gi[0]) {
              double dot = 0.0;
              for (std::size_t j = 0; j < dh; ++j) dot += grow[j] * vr[j];
              (*gi[0])[poff + s] += dot;
            }
            if (gi[1]) {
              const double p = (*pp)[poff + s];
              if (p == 0.0) continue;
              double* dv = gi[1]->data() + (n * T + s) * D + h * dh;
              for (std::size_t j = 0; j < dh; ++j) dv[j] += p * grow[j];
            }
          }
        }
      }
    }
  });
}

// Low-rank adapters ----------------------------------------------------------

Var grouped_low_rank(Var x, Var A, Var B, double scale_factor) {
  check_same_tape(x, A);
  check_same_tape(x, B);
  const Tensor& X = x.value();
  const Tensor& Am = A.value();
  const Tensor& Bm = B.value();
  if (Am.rank() != 3 || Bm.rank() != 3 || X.rank() < 2) shape_fail("grouped_low_rank", X.shape(), Am.shape());
  const std::size_t G = Am.dim(0), din = Am.dim(1), r = Am.dim(2), dout = Bm.dim(2);
  if (Bm.dim(0) != G || Bm.dim(1) != r || X.dim(-1) != din) shape_fail("grouped_low_rank", X.shape(), Bm.shape());
  const std::size_t rows_total = X.size() / din;
  if (X.dim(0) % G != 0) {
    throw ShapeError("grouped_low_rank: leading dim " + std::to_string(X.dim(0)) +
                     " not divisible into " + std::to_string(G) + " groups");
  }
  const std::size_t rows = rows_total / G;
  Shape out_shape(X.shape().begin(), X.shape().end() - 1);
  out_shape.push_back(dout);
  Tensor out(out_shape);
  Tensor xa(Shape{rows_total, r});
  for (std::size_t g = 0; g < G; ++g) {
    auto XA = map(xa.data() + g * rows * r, rows, r);
    XA.noalias() = cmap(X.data() + g * rows * din, rows, din) * cmap(Am.data() + g * din * r, din, r);
    map(out.data() + g * rows * dout, rows, dout).noalias() =
        scale_factor * (XA * cmap(Bm.data() + g * r * dout, r, dout));
  }
  const Tensor* px = &X;
  const Tensor* pa = &Am;
  const Tensor* pb = &Bm;
  return tape_of(x).record(std::move(out), {x, A, B},
                           [xa = std::move(xa), px, pa, pb, G, rows, din, r, dout, scale_factor](const Tensor& grad, std::span<Tensor* const> gi) {
    RowMat gb(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(r));
    for (std::size_t g = 0; g < G; ++g) {
      const auto Gm = cmap(grad.data() + g * rows * dout, rows, dout);
      const auto Bg = cmap(pb->data() + g * r * dout, r, dout);
      const auto Ag = cmap(pa->data() + g * din * r, din, r);
      if (gi[0] || gi[1]) gb.noalias() = scale_factor * (Gm * Bg.transpose());
      if (gi[0]) map(gi[0]->data() + g * rows * din, rows, din).noalias() += gb * Ag.transpose();
      if (gi[1]) {
        map(gi[1]->data() + g * din * r, din, r).noalias() +=
            cmap(px->data() + g * rows * din, rows, din).transpose() * gb;
      }
      if (gi[2]) {
        map(gi[2]->data() + g * r * dout, r, dout).noalias() +=
            scale_factor * (cmap(xa.data() + g * rows * r, rows, r).transpose() * Gm);
      }
    }
  });
}

// Losses ---------------------------------------------------------------------

namespace {

// log-softmax of one row, written into `out`.
void log_softmax_row(const double* logits, std::size_t V, double* out) {
  double mx = logits[0];
  for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, logits[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < V; ++j) z += std::exp(logits[j] - mx);
  const double lse = mx + std::log(z);
  for (std::size_t j = 0; j < V; ++j) out[j] = logits[j] - lse;
}

void check_targets(const Tensor& L, std::span<const int> targets, const char* op) {
  if (L.rank() != 3 || targets.size() != L.dim(0) * L.dim(1)) {
    throw ShapeError(std::string(op) + ": logits " + shape_string(L.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets");
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= L.dim(2)) {
      throw InputError(std::string(op) + ": target " + std::to_string(t) + " outside vocabulary");
    }
  }
}

}  // namespace

Var sequence_log_likelihood(Var logits, std::span<const int> tokens) {
  const Tensor& L = logits.value();
  check_targets(L, tokens, "sequence_log_likelihood");
  const std::size_t M = L.dim(0), T = L.dim(1), V = L.dim(2);
  Tensor out(Shape{M});
  std::vector<double> lsm(V);
  for (std::size_t m = 0; m < M; ++m) {
    double acc = 0.0;
    for (std::size_t t = 1; t < T; ++t) {
      log_softmax_row(L.data() + (m * T + t - 1) * V, V, lsm.data());
      acc += lsm[static_cast<std::size_t>(tokens[m * T + t])];
    }
    out[m] = acc;
  }
  const Tensor* pl = &L;
  std::vector<int> tok(tokens.begin(), tokens.end());
  return tape_of(logits).record(std::move(out), {logits},
                                [pl, tok = std::move(tok), M, T, V](const Tensor& g, std::span<Tensor* const> gi) {
    std::vector<double> lsm(V);
    for (std::size_t m = 0; m < M; ++m) {
      if (g[m] == 0.0) continue;
      for (std::size_t t = 1; t < T; ++t) {
        const std::size_t off = (m * T + t - 1) * V;
        log_softmax_row(pl->data() + off, V, lsm.data());
        const auto target = static_cast<std::size_t>(tok[m * T + t]);
        for (std::size_t j = 0; j < V; ++j) {
          (*gi[0])[off + j] += g[m] * ((j == target ? 1.0 : 0.0) - std::exp(lsm[j]));
        }
      }
    }
  });
}

Var cross_entropy(Var logits, std::span<const int> targets, bool ignore_first) {
  const Tensor& L = logits.value();
  check_targets(L, targets, "cross_entropy");
  const std::size_t M = L.dim(0), T = L.dim(1), V = L.dim(2);
  const std::size_t t0 = ignore_first ? 1 : 0;
  if (T <= t0) throw ShapeError("cross_entropy: no positions left to score");
  const double count = static_cast<double>(M * (T - t0));
  std::vector<double> lsm(V);
  double total = 0.0;
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t t = t0; t < T; ++t) {
      log_softmax_row(L.data() + (m * T + t) * V, V, lsm.data());
      total -= lsm[static_cast<std::size_t>(targets[m * T + t])];
    }
  }
  const Tensor* pl = &L;
  std::vector<int> tgt(targets.begin(), targets.end());
  return tape_of(logits).record(Tensor::scalar(total / count), {logits},
                                [pl, tgt = std::move(tgt), M, T, V, t0, count](const Tensor& g, std::span<Tensor* const> gi) {
    std::vector<double> lsm(V);
    const double w = g[0] / count;
    for (std::size_t m = 0; m < M; ++m) {
      for (std::size_t t = t0; t < T; ++t) {
        const std::size_t off = (m * T + t) * V;
        log_softmax_row(pl->data() + off, V, lsm.data());
        const auto target = static_cast<std::size_t>(tgt[m * T + t]);
        for (std::size_t j = 0; j < V; ++j) {
          (*gi[0])[off + j] += w * (std::exp(lsm[j]) - (j == target ? 1.0 : 0.0));
        }
      }
    }
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return tape_of(a).record(Tensor::scalar(s), {a}, [](const Tensor& g, std::span<Tensor* const> gi) {
    for (double& v : gi[0]->values()) v += g[0];
  });
}

Var weighted_sum(Var a, const Tensor& weights) {
  const Tensor& A = a.value();
  if (weights.size() != A.size()) shape_fail("weighted_sum", A.shape(), weights.shape());
  double s = 0.0;
  for (std::size_t i = 0; i < A.size(); ++i) s += weights[i] * A[i];
  return tape_of(a).record(Tensor::scalar(s), {a}, [w = weights](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < w.size(); ++i) (*gi[0])[i] += g[0] * w[i];
  });
}

}  // namespace mclseq::ad
