#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace mclseq {

class Rng;

namespace ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major buffer of doubles with an explicit shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  /// i.i.d. N(0, stddev^2) entries.
  static Tensor randn(Shape shape, double stddev, Rng& rng);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  /// Extent of axis `axis`; negative values count from the back.
  std::size_t dim(int axis) const;
  std::size_t size() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& buffer() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Same buffer, new shape of equal size.
  Tensor reshaped(Shape shape) const;
  void fill(double v);
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace ad
}  // namespace mclseq
