#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace covflow {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor of doubles. Plain value type: copies are deep,
// moves are cheap.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, double fill);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_[axis]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  // Element access for rank <= 4; index count must match rank.
  double& at(std::size_t i0);
  double& at(std::size_t i0, std::size_t i1);
  double& at(std::size_t i0, std::size_t i1, std::size_t i2);
  double& at(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3);
  double at(std::size_t i0) const;
  double at(std::size_t i0, std::size_t i1) const;
  double at(std::size_t i0, std::size_t i1, std::size_t i2) const;
  double at(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  Tensor reshaped(Shape new_shape) const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Row-major strides for a shape.
std::vector<std::size_t> row_major_strides(const Shape& shape);

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace covflow
