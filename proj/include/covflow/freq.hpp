#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "covflow/rng.hpp"
#include "covflow/tensor.hpp"

namespace covflow::freq {

// Normalized 1-D Gaussian taps of length 2*radius+1.
std::vector<double> gaussian_taps(double sigma, std::size_t radius);

std::size_t default_radius(double sigma);

// Separable Gaussian blur with reflect padding. Accepts [C,H,W] or [N,C,H,W].
Tensor gaussian_blur(const Tensor& image, double sigma);
Tensor gaussian_blur(const Tensor& image, double sigma, std::size_t radius);

struct Decomposition {
  Tensor low;   // blurred image
  Tensor high;  // image - low
};

Decomposition decompose(const Tensor& image, double sigma);

struct DequantConfig {
  std::uint32_t bit_depth = 16;  // 8 or 16
  double lo = -0.5;
  double hi = 0.5;

  std::uint64_t levels() const { return 1ull << bit_depth; }
  double step() const { return (hi - lo) / static_cast<double>(levels()); }
  void validate() const;
};

// Index of the quantization bin containing v; v must lie in [lo, hi].
std::uint64_t quantize_level(double v, const DequantConfig& cfg);

// Maps each element to the continuous center-free representation
// lo + (level + u) * step with u ~ U[0,1) drawn per element in row-major
// order. Values outside [lo, hi] are rejected with their flat index.
Tensor dequantize(const Tensor& values, const DequantConfig& cfg, Rng& rng);
// Same, with the uniform draws supplied explicitly (same shape as values).
Tensor dequantize(const Tensor& values, const DequantConfig& cfg, const Tensor& noise);

// Clamps into [lo, hi] then dequantizes; the encoding step for pipeline data
// whose high-frequency values can exceed the nominal range after corruption.
Tensor encode_component(const Tensor& values, const DequantConfig& cfg, Rng& rng);

// Bits-per-dimension for a log-likelihood (nats) of a D-dimensional sample
// quantized at bit_depth over a range of the given width.
double bits_per_dim(double ll_nats, std::size_t dims, std::uint32_t bit_depth, double range_width);

}  // namespace covflow::freq
