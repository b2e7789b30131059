#include "covflow/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace covflow {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

double& Tensor::at(std::size_t i0) { return data_[i0]; }
double& Tensor::at(std::size_t i0, std::size_t i1) { return data_[i0 * shape_[1] + i1]; }
double& Tensor::at(std::size_t i0, std::size_t i1, std::size_t i2) {
  return data_[(i0 * shape_[1] + i1) * shape_[2] + i2];
}
double& Tensor::at(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) {
  return data_[((i0 * shape_[1] + i1) * shape_[2] + i2) * shape_[3] + i3];
}
double Tensor::at(std::size_t i0) const { return data_[i0]; }
double Tensor::at(std::size_t i0, std::size_t i1) const { return data_[i0 * shape_[1] + i1]; }
double Tensor::at(std::size_t i0, std::size_t i1, std::size_t i2) const {
  return data_[(i0 * shape_[1] + i1) * shape_[2] + i2];
}
double Tensor::at(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) const {
  return data_[((i0 * shape_[1] + i1) * shape_[2] + i2) * shape_[3] + i3];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::reshaped(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                                " changes element count");
  }
  return Tensor(std::move(new_shape), data_);
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) {
    strides[i - 1] = strides[i] * shape[i];
  }
  return strides;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::fabs(a[i] - b[i]));
  }
  return m;
}

}  // namespace covflow
