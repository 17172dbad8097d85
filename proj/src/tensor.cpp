#include "mclseq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "mclseq/errors.hpp"
#include "mclseq/rng.hpp"

namespace mclseq::ad {
namespace {

#if defined(__GLIBC__)
// Activations are several MB each. With glibc's default thresholds every one
// of them is a fresh mmap, and page faulting dominates a training step.
const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw ShapeError("Tensor: shape " + shape_string(shape_) + " does not match buffer of " +
                     std::to_string(data_.size()));
  }
}

Tensor Tensor::randn(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data_) v = stddev * rng.normal();
  return t;
}

std::size_t Tensor::dim(int axis) const {
  const int r = static_cast<int>(shape_.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("Tensor::dim: axis out of range for " + shape_string(shape_));
  return shape_[static_cast<std::size_t>(a)];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw ShapeError("reshape: cannot view " + shape_string(shape_) + " as " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace mclseq::ad
