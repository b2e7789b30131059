#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "covflow/rng.hpp"
#include "covflow/tensor.hpp"

namespace covflow::corrupt {

enum class Kind {
  kGaussianNoise = 0,
  kShotNoise = 1,
  kImpulseNoise = 2,
  kGaussianBlur = 3,
  kContrast = 4,
  kBrightness = 5,
  kSaturate = 6,
  kPixelate = 7,
};

inline constexpr std::array<Kind, 8> kAllKinds = {
    Kind::kGaussianNoise, Kind::kShotNoise, Kind::kImpulseNoise, Kind::kGaussianBlur,
    Kind::kContrast,      Kind::kBrightness, Kind::kSaturate,    Kind::kPixelate,
};

const char* kind_name(Kind k);
Kind kind_from_name(const std::string& name);

// Per-kind parameter at severities 1..5. Values are engineering defaults,
// overridable via JSON ({"gaussian_noise": [..5 values..], ...}, partial
// overrides allowed) and echoed into dataset manifests.
class SeverityTable {
 public:
  static SeverityTable defaults();
  double parameter(Kind k, int severity) const;
  void set(Kind k, const std::array<double, 5>& values);
  std::string to_json() const;
  static SeverityTable from_json(const std::string& text);

 private:
  std::map<Kind, std::array<double, 5>> values_;
};

// One corruption applied to a [C,H,W] image in [0,1]; stochastic kinds draw
// from `rng`. Every output value lies in [0,1].
Tensor apply(const Tensor& image, Kind kind, double parameter, Rng& rng);

struct SuiteConfig {
  std::vector<Kind> kinds{kAllKinds.begin(), kAllKinds.end()};
  std::vector<int> severities{1, 2, 3, 4, 5};
  SeverityTable table = SeverityTable::defaults();
  std::uint64_t seed = 1;
};

// Writes one corrupted copy of `clean_test` per (kind, severity) as a dataset
// directory out_dir/<kind>_s<severity> with a single "test" split. Image i of
// condition (kind k, severity s) draws from Rng(mix(seed, kind, s, i)).
// Returns the dataset directory names in generation order.
std::vector<std::string> build_ood_suite(const Tensor& clean_test,
                                         const std::string& clean_checksum,
                                         const std::string& out_dir, const SuiteConfig& cfg,
                                         const std::string& run_config_json = "");

}  // namespace covflow::corrupt
