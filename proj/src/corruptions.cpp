#include "covflow/corruptions.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "covflow/dataio.hpp"
#include "covflow/errors.hpp"
#include "covflow/freq.hpp"
#include "json.hpp"

namespace covflow::corrupt {

const char* kind_name(Kind k) {
  switch (k) {
    case Kind::kGaussianNoise: return "gaussian_noise";
    case Kind::kShotNoise: return "shot_noise";
    case Kind::kImpulseNoise: return "impulse_noise";
    case Kind::kGaussianBlur: return "gaussian_blur";
    case Kind::kContrast: return "contrast";
    case Kind::kBrightness: return "brightness";
    case Kind::kSaturate: return "saturate";
    case Kind::kPixelate: return "pixelate";
  }
  return "?";
}

Kind kind_from_name(const std::string& name) {
  for (Kind k : kAllKinds) {
    if (name == kind_name(k)) return k;
  }
  throw ConfigError("unknown corruption kind '" + name + "'");
}

SeverityTable SeverityTable::defaults() {
  SeverityTable t;
  t.values_[Kind::kGaussianNoise] = {0.04, 0.08, 0.12, 0.18, 0.26};
  t.values_[Kind::kShotNoise] = {500, 250, 100, 50, 25};
  t.values_[Kind::kImpulseNoise] = {0.01, 0.02, 0.05, 0.1, 0.15};
  t.values_[Kind::kGaussianBlur] = {0.5, 1.0, 1.5, 2.0, 3.0};
  t.values_[Kind::kContrast] = {0.75, 0.5, 0.4, 0.3, 0.15};
  t.values_[Kind::kBrightness] = {0.05, 0.1, 0.15, 0.2, 0.3};
  t.values_[Kind::kSaturate] = {1.3, 1.6, 2.0, 2.5, 3.0};
  t.values_[Kind::kPixelate] = {1.25, 1.5, 2.0, 2.67, 4.0};
  return t;
}

double SeverityTable::parameter(Kind k, int severity) const {
  if (severity < 1 || severity > 5) {
    throw ConfigError("severity must lie in 1..5, got " + std::to_string(severity));
  }
  return values_.at(k)[static_cast<std::size_t>(severity - 1)];
}

void SeverityTable::set(Kind k, const std::array<double, 5>& values) {
  for (double v : values) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw ConfigError(std::string("severity parameters for ") + kind_name(k) +
                        " must be positive and finite");
    }
  }
  values_[k] = values;
}

std::string SeverityTable::to_json() const {
  nlohmann::json j;
  for (const auto& [kind, values] : values_) {
    j[kind_name(kind)] = values;
  }
  return j.dump();
}

SeverityTable SeverityTable::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("severity table is not valid JSON: ") + e.what());
  }
  SeverityTable t = defaults();
  for (const auto& [key, value] : j.items()) {
    Kind k = kind_from_name(key);
    if (!value.is_array() || value.size() != 5) {
      throw ConfigError("severity table entry '" + key + "' must list 5 values");
    }
    std::array<double, 5> vals{};
    for (std::size_t i = 0; i < 5; ++i) vals[i] = value[i].get<double>();
    t.set(k, vals);
  }
  return t;
}

namespace {

void check_image(const Tensor& image) {
  if (image.rank() != 3) {
    throw ConfigError("corruptions expect [C,H,W], got " + shape_str(image.shape()));
  }
}

// Overlap lengths between source pixel [y, y+1) and the n2 equal cells
// covering [0, n). Each row sums to 1; transposing and normalizing by the
// cell width n/n2 gives the area-average downscale weights.
std::vector<std::vector<std::pair<std::size_t, double>>> cell_overlaps(std::size_t n,
                                                                       std::size_t n2) {
  const double cell = static_cast<double>(n) / static_cast<double>(n2);
  std::vector<std::vector<std::pair<std::size_t, double>>> out(n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t j = 0; j < n2; ++j) {
      double lo = std::max(static_cast<double>(y), cell * static_cast<double>(j));
      double hi = std::min(static_cast<double>(y + 1), cell * static_cast<double>(j + 1));
      if (hi > lo + 1e-12) out[y].emplace_back(j, hi - lo);
    }
  }
  return out;
}

Tensor pixelate(const Tensor& image, double factor) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::size_t h2 = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(static_cast<double>(h) / factor)));
  const std::size_t w2 = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(static_cast<double>(w) / factor)));
  const auto row_w = cell_overlaps(h, h2);
  const auto col_w = cell_overlaps(w, w2);
  const double inv_area = static_cast<double>(h2) / static_cast<double>(h) *
                          static_cast<double>(w2) / static_cast<double>(w);
  Tensor small({c, h2, w2});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (const auto& [cy, wy] : row_w[y]) {
        for (std::size_t x = 0; x < w; ++x) {
          for (const auto& [cx, wx] : col_w[x]) {
            small.at(ch, cy, cx) += wy * wx * inv_area * image.at(ch, y, x);
          }
        }
      }
    }
  }
  Tensor out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (const auto& [cy, wy] : row_w[y]) {
        for (std::size_t x = 0; x < w; ++x) {
          for (const auto& [cx, wx] : col_w[x]) {
            out.at(ch, y, x) += wy * wx * small.at(ch, cy, cx);
          }
        }
      }
    }
  }
  return out;
}

}  // namespace

Tensor apply(const Tensor& image, Kind kind, double parameter, Rng& rng) {
  check_image(image);
  if (!std::isfinite(parameter)) throw ConfigError("corruption parameter must be finite");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());

  switch (kind) {
    case Kind::kGaussianNoise:
      for (std::size_t i = 0; i < image.numel(); ++i) {
        out[i] = image[i] + parameter * rng.gaussian();
      }
      break;
    case Kind::kShotNoise:
      if (!(parameter > 0.0)) throw ConfigError("shot noise needs a positive photon count");
      for (std::size_t i = 0; i < image.numel(); ++i) {
        out[i] = static_cast<double>(rng.poisson(image[i] * parameter)) / parameter;
      }
      break;
    case Kind::kImpulseNoise:
      out = image;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          if (rng.uniform() < parameter) {
            double v = rng.uniform() < 0.5 ? 0.0 : 1.0;
            for (std::size_t ch = 0; ch < c; ++ch) out.at(ch, y, x) = v;
          }
        }
      }
      break;
    case Kind::kGaussianBlur:
      out = freq::gaussian_blur(image, parameter);
      break;
    case Kind::kContrast: {
      double mean = 0.0;
      for (std::size_t i = 0; i < image.numel(); ++i) mean += image[i];
      mean /= static_cast<double>(image.numel());
      for (std::size_t i = 0; i < image.numel(); ++i) {
        out[i] = (image[i] - mean) * parameter + mean;
      }
      break;
    }
    case Kind::kBrightness:
      for (std::size_t i = 0; i < image.numel(); ++i) out[i] = image[i] + parameter;
      break;
    case Kind::kSaturate:
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          double gray = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch) gray += image.at(ch, y, x);
          gray /= static_cast<double>(c);
          for (std::size_t ch = 0; ch < c; ++ch) {
            out.at(ch, y, x) = gray + parameter * (image.at(ch, y, x) - gray);
          }
        }
      }
      break;
    case Kind::kPixelate:
      if (!(parameter >= 1.0)) throw ConfigError("pixelation factor must be >= 1");
      out = pixelate(image, parameter);
      break;
  }
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(out[i], 0.0, 1.0);
  return out;
}

std::vector<std::string> build_ood_suite(const Tensor& clean_test,
                                         const std::string& clean_checksum,
                                         const std::string& out_dir, const SuiteConfig& cfg,
                                         const std::string& run_config_json) {
  if (clean_test.rank() != 4) {
    throw ConfigError("suite input must be [N,C,H,W], got " + shape_str(clean_test.shape()));
  }
  if (cfg.kinds.empty() || cfg.severities.empty()) {
    throw ConfigError("suite needs at least one kind and one severity");
  }
  const std::size_t n = clean_test.dim(0);
  const std::size_t chw = clean_test.numel() / n;
  std::vector<std::string> dirs;
  Tensor one({clean_test.dim(1), clean_test.dim(2), clean_test.dim(3)});
  for (Kind kind : cfg.kinds) {
    for (int severity : cfg.severities) {
      double parameter = cfg.table.parameter(kind, severity);
      Tensor corrupted(clean_test.shape());
      for (std::size_t i = 0; i < n; ++i) {
        Rng rng(Rng::mix({cfg.seed, static_cast<std::uint64_t>(kind),
                          static_cast<std::uint64_t>(severity), i}));
        std::memcpy(one.data(), clean_test.data() + i * chw, chw * sizeof(double));
        Tensor bad = apply(one, kind, parameter, rng);
        std::memcpy(corrupted.data() + i * chw, bad.data(), chw * sizeof(double));
      }
      std::string name = std::string(kind_name(kind)) + "_s" + std::to_string(severity);
      nlohmann::json prov;
      prov["kind"] = "corruption";
      prov["corruption"] = kind_name(kind);
      prov["severity"] = severity;
      prov["parameter"] = parameter;
      prov["seed"] = cfg.seed;
      prov["source_checksum"] = clean_checksum;
      std::string dir = (std::filesystem::path(out_dir) / name).string();
      data::write_dataset(dir, name, {{"test", corrupted}}, prov.dump(), run_config_json);
      dirs.push_back(name);
    }
  }
  return dirs;
}

}  // namespace covflow::corrupt
