#include "covflow/freq.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace covflow::freq {

std::vector<double> gaussian_taps(double sigma, std::size_t radius) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw std::invalid_argument("gaussian sigma must be positive and finite");
  }
  if (radius == 0) throw std::invalid_argument("gaussian radius must be at least 1");
  std::vector<double> taps(2 * radius + 1);
  double sum = 0.0;
  for (std::size_t i = 0; i < taps.size(); ++i) {
    double d = static_cast<double>(i) - static_cast<double>(radius);
    taps[i] = std::exp(-0.5 * (d / sigma) * (d / sigma));
    sum += taps[i];
  }
  for (double& t : taps) t /= sum;
  return taps;
}

std::size_t default_radius(double sigma) {
  return static_cast<std::size_t>(std::max(1.0, std::ceil(3.0 * sigma)));
}

namespace {

// Mirror index into [0, n) without repeating the edge sample.
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * static_cast<std::ptrdiff_t>(n) - 2;
  i = ((i % period) + period) % period;
  if (i >= static_cast<std::ptrdiff_t>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

void blur_plane(const double* in, double* out, std::size_t h, std::size_t w,
                const std::vector<double>& taps, std::vector<double>& scratch) {
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(taps.size() / 2);
  scratch.resize(h * w);
  // Horizontal pass.
  for (std::size_t y = 0; y < h; ++y) {
    const double* row = in + y * w;
    double* orow = scratch.data() + y * w;
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t t = -r; t <= r; ++t) {
        acc += taps[static_cast<std::size_t>(t + r)] *
               row[reflect_index(static_cast<std::ptrdiff_t>(x) + t, w)];
      }
      orow[x] = acc;
    }
  }
  // Vertical pass.
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) {
      double acc = 0.0;
      for (std::ptrdiff_t t = -r; t <= r; ++t) {
        acc += taps[static_cast<std::size_t>(t + r)] *
               scratch[reflect_index(static_cast<std::ptrdiff_t>(y) + t, h) * w + x];
      }
      out[y * w + x] = acc;
    }
  }
}

}  // namespace

Tensor gaussian_blur(const Tensor& image, double sigma, std::size_t radius) {
  const Shape& s = image.shape();
  if (s.size() != 3 && s.size() != 4) {
    throw std::invalid_argument("gaussian_blur expects [C,H,W] or [N,C,H,W], got " +
                                shape_str(s));
  }
  if (image.numel() == 0) throw std::invalid_argument("gaussian_blur got an empty image");
  std::vector<double> taps = gaussian_taps(sigma, radius);
  const std::size_t h = s[s.size() - 2];
  const std::size_t w = s[s.size() - 1];
  const std::size_t planes = image.numel() / (h * w);
  Tensor out(s);
  std::vector<double> scratch;
  for (std::size_t p = 0; p < planes; ++p) {
    blur_plane(image.data() + p * h * w, out.data() + p * h * w, h, w, taps, scratch);
  }
  return out;
}

Tensor gaussian_blur(const Tensor& image, double sigma) {
  return gaussian_blur(image, sigma, default_radius(sigma));
}

Decomposition decompose(const Tensor& image, double sigma) {
  Decomposition d;
  d.low = gaussian_blur(image, sigma);
  d.high = Tensor(image.shape());
  for (std::size_t i = 0; i < image.numel(); ++i) d.high[i] = image[i] - d.low[i];
  return d;
}

void DequantConfig::validate() const {
  if (bit_depth != 8 && bit_depth != 16) {
    throw std::invalid_argument("bit depth must be 8 or 16, got " + std::to_string(bit_depth));
  }
  if (!(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi)) {
    throw std::invalid_argument("dequantization range must be finite with lo < hi");
  }
}

std::uint64_t quantize_level(double v, const DequantConfig& cfg) {
  cfg.validate();
  if (!(v >= cfg.lo && v <= cfg.hi)) {
    throw std::out_of_range("value " + std::to_string(v) + " outside [" + std::to_string(cfg.lo) +
                            ", " + std::to_string(cfg.hi) + "]");
  }
  double k = std::floor((v - cfg.lo) / cfg.step());
  std::uint64_t max_level = cfg.levels() - 1;
  if (k < 0.0) return 0;
  std::uint64_t ki = static_cast<std::uint64_t>(k);
  return ki > max_level ? max_level : ki;
}

namespace {

Tensor dequantize_impl(const Tensor& values, const DequantConfig& cfg, const double* noise) {
  cfg.validate();
  if (values.numel() == 0) throw std::invalid_argument("dequantize got an empty tensor");
  Tensor out(values.shape());
  const double step = cfg.step();
  const double max_level = static_cast<double>(cfg.levels() - 1);
  for (std::size_t i = 0; i < values.numel(); ++i) {
    double v = values[i];
    if (!(v >= cfg.lo && v <= cfg.hi)) {
      throw std::out_of_range("value " + std::to_string(v) + " at flat index " +
                              std::to_string(i) + " outside [" + std::to_string(cfg.lo) + ", " +
                              std::to_string(cfg.hi) + "]");
    }
    double level = std::floor((v - cfg.lo) / step);
    level = std::min(max_level, std::max(0.0, level));
    out[i] = cfg.lo + (level + noise[i]) * step;
  }
  return out;
}

}  // namespace

Tensor dequantize(const Tensor& values, const DequantConfig& cfg, Rng& rng) {
  if (values.numel() == 0) throw std::invalid_argument("dequantize got an empty tensor");
  std::vector<double> noise(values.numel());
  for (double& u : noise) u = rng.uniform();
  return dequantize_impl(values, cfg, noise.data());
}

Tensor dequantize(const Tensor& values, const DequantConfig& cfg, const Tensor& noise) {
  if (!values.same_shape(noise)) {
    throw std::invalid_argument("dequantize noise shape " + shape_str(noise.shape()) +
                                " does not match values shape " + shape_str(values.shape()));
  }
  return dequantize_impl(values, cfg, noise.data());
}

Tensor encode_component(const Tensor& values, const DequantConfig& cfg, Rng& rng) {
  cfg.validate();
  Tensor clamped(values.shape());
  for (std::size_t i = 0; i < values.numel(); ++i) {
    clamped[i] = std::min(cfg.hi, std::max(cfg.lo, values[i]));
  }
  return dequantize(clamped, cfg, rng);
}

double bits_per_dim(double ll_nats, std::size_t dims, std::uint32_t bit_depth, double range_width) {
  if (dims == 0) throw std::invalid_argument("bits_per_dim needs at least one dimension");
  if (!(range_width > 0.0)) throw std::invalid_argument("range width must be positive");
  const double ln2 = std::log(2.0);
  return -ll_nats / (static_cast<double>(dims) * ln2) + static_cast<double>(bit_depth) -
         std::log2(range_width);
}

}  // namespace covflow::freq
