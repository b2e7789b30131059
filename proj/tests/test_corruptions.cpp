#include <cmath>
#include <filesystem>
#include <vector>

#include "covflow/corruptions.hpp"
#include "covflow/dataio.hpp"
#include "covflow/errors.hpp"
#include "covflow/rng.hpp"
#include "doctest.h"
#include "json.hpp"
#include "test_utils.hpp"

using namespace covflow;
using namespace covflow::corrupt;
using namespace covflow::testutil;

namespace {

std::string fresh_dir(const std::string& name) {
  std::filesystem::path dir = std::filesystem::path("test_tmp") / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

Tensor test_image(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({c, h, w});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform();
  return t;
}

double rms_diff(const Tensor& a, const Tensor& b) {
  double sq = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(sq / static_cast<double>(a.numel()));
}

}  // namespace

TEST_SUITE("corruptions") {
  TEST_CASE("kind names round trip") {
    for (Kind k : kAllKinds) {
      CHECK(kind_from_name(kind_name(k)) == k);
    }
    CHECK_THROWS_AS(kind_from_name("fog"), ConfigError);
  }

  TEST_CASE("neutral parameters are identities") {
    Tensor img = test_image(3, 6, 6, 1);
    Rng rng(2);
    CHECK(max_abs_diff(apply(img, Kind::kContrast, 1.0, rng), img) == 0.0);
    CHECK(max_abs_diff(apply(img, Kind::kGaussianNoise, 0.0, rng), img) == 0.0);
    CHECK(max_abs_diff(apply(img, Kind::kSaturate, 1.0, rng), img) == 0.0);
    CHECK(max_abs_diff(apply(img, Kind::kBrightness, 0.0, rng), img) == 0.0);
    // Saturation cannot change a single-channel image.
    Tensor gray = test_image(1, 6, 6, 3);
    CHECK(max_abs_diff(apply(gray, Kind::kSaturate, 2.5, rng), gray) == 0.0);
  }

  TEST_CASE("gaussian noise statistics match the table parameter") {
    const double sigma = SeverityTable::defaults().parameter(Kind::kGaussianNoise, 2);
    Tensor img({3, 64, 64}, 0.5);
    Rng rng(55);
    Tensor noisy = apply(img, Kind::kGaussianNoise, sigma, rng);
    std::vector<double> diffs(noisy.numel());
    for (std::size_t i = 0; i < noisy.numel(); ++i) diffs[i] = noisy[i] - img[i];
    auto [mean, stddev] = two_pass_mean_std(diffs);
    CHECK(std::abs(mean) < 0.005);
    CHECK(std::abs(stddev - sigma) / sigma < 0.02);
  }

  TEST_CASE("shot noise keeps the mean and scales variance") {
    const double lam = 500.0;
    Tensor img({1, 64, 64}, 0.5);
    Rng rng(66);
    Tensor noisy = apply(img, Kind::kShotNoise, lam, rng);
    std::vector<double> vals(noisy.vec().begin(), noisy.vec().end());
    auto [mean, stddev] = two_pass_mean_std(vals);
    CHECK(std::abs(mean - 0.5) < 0.01);
    CHECK(std::abs(stddev - std::sqrt(0.5 / lam)) / std::sqrt(0.5 / lam) < 0.08);
  }

  TEST_CASE("impulse noise flips the expected pixel fraction to extremes") {
    const double p = 0.05;
    Tensor img({3, 64, 64}, 0.5);
    Rng rng(77);
    Tensor noisy = apply(img, Kind::kImpulseNoise, p, rng);
    std::size_t changed = 0;
    for (std::size_t y = 0; y < 64; ++y) {
      for (std::size_t x = 0; x < 64; ++x) {
        if (noisy.at(0, y, x) != 0.5) {
          ++changed;
          for (std::size_t c = 0; c < 3; ++c) {
            bool extreme = noisy.at(c, y, x) == 0.0 || noisy.at(c, y, x) == 1.0;
            CHECK(extreme);
          }
        }
      }
    }
    double frac = static_cast<double>(changed) / (64.0 * 64.0);
    CHECK(std::abs(frac - p) < 0.015);
  }

  TEST_CASE("pixelate averages and repeats 2x2 blocks at factor 2") {
    Tensor img = test_image(1, 8, 8, 9);
    Rng rng(1);
    Tensor out = apply(img, Kind::kPixelate, 2.0, rng);
    for (std::size_t y = 0; y < 8; y += 2) {
      for (std::size_t x = 0; x < 8; x += 2) {
        double v = out.at(0, y, x);
        CHECK(out.at(0, y, x + 1) == v);
        CHECK(out.at(0, y + 1, x) == v);
        CHECK(out.at(0, y + 1, x + 1) == v);
        double mean = 0.25 * (img.at(0, y, x) + img.at(0, y, x + 1) + img.at(0, y + 1, x) +
                              img.at(0, y + 1, x + 1));
        CHECK(close_rel(v, mean, 1e-12));
      }
    }
  }

  TEST_CASE("all kinds stay in range and are seed-deterministic") {
    Tensor img = test_image(3, 10, 10, 12);
    for (Kind kind : kAllKinds) {
      CAPTURE(kind_name(kind));
      double p = SeverityTable::defaults().parameter(kind, 5);
      Rng r1(43), r2(43), r3(44);
      Tensor a = apply(img, kind, p, r1);
      Tensor b = apply(img, kind, p, r2);
      CHECK(max_abs_diff(a, b) == 0.0);
      for (std::size_t i = 0; i < a.numel(); ++i) {
        CHECK(a[i] >= 0.0);
        CHECK(a[i] <= 1.0);
      }
      Tensor c = apply(img, kind, p, r3);
      bool stochastic = kind == Kind::kGaussianNoise || kind == Kind::kShotNoise ||
                        kind == Kind::kImpulseNoise;
      if (stochastic) CHECK(max_abs_diff(a, c) > 0.0);
    }
  }

  TEST_CASE("distortion grows with severity for every kind") {
    data::SynthConfig sc;
    sc.count = 4;
    sc.height = 16;
    sc.width = 16;
    sc.seed = 3;
    Tensor imgs = data::synth_images(sc);
    const std::size_t chw = 3 * 16 * 16;
    SeverityTable table = SeverityTable::defaults();
    for (Kind kind : kAllKinds) {
      std::string label = kind_name(kind);
      CAPTURE(label);
      double prev = -1.0;
      for (int sev = 1; sev <= 5; ++sev) {
        CAPTURE(sev);
        double acc = 0.0;
        Tensor one({3, 16, 16});
        for (std::size_t i = 0; i < sc.count; ++i) {
          for (std::size_t j = 0; j < chw; ++j) one[j] = imgs[i * chw + j];
          Rng rng(Rng::mix({9, static_cast<std::uint64_t>(kind),
                            static_cast<std::uint64_t>(sev), i}));
          acc += rms_diff(apply(one, kind, table.parameter(kind, sev), rng), one);
        }
        acc /= static_cast<double>(sc.count);
        CHECK(acc > prev);
        prev = acc;
      }
    }
  }

  TEST_CASE("severity table json overrides") {
    SeverityTable t = SeverityTable::from_json("{\"gaussian_noise\": [1, 2, 3, 4, 5]}");
    CHECK(t.parameter(Kind::kGaussianNoise, 2) == 2.0);
    CHECK(t.parameter(Kind::kContrast, 1) == 0.75);  // untouched default
    CHECK_THROWS_AS(SeverityTable::from_json("{\"fog\": [1,2,3,4,5]}"), ConfigError);
    CHECK_THROWS_AS(SeverityTable::from_json("{\"contrast\": [1,2,3]}"), ConfigError);
    CHECK_THROWS_AS(SeverityTable::from_json("{\"contrast\": [0,1,2,3,4]}"), ConfigError);
    CHECK_THROWS_AS(SeverityTable::defaults().parameter(Kind::kContrast, 6), ConfigError);
    SeverityTable back = SeverityTable::from_json(SeverityTable::defaults().to_json());
    CHECK(back.to_json() == SeverityTable::defaults().to_json());
  }

  TEST_CASE("suite generation is complete and reproducible") {
    data::SynthConfig sc;
    sc.count = 3;
    sc.height = 8;
    sc.width = 8;
    sc.seed = 15;
    Tensor clean = data::synth_images(sc);
    SuiteConfig cfg;
    cfg.kinds = {Kind::kGaussianNoise, Kind::kContrast};
    cfg.severities = {1, 3};
    cfg.seed = 29;

    std::string d1 = fresh_dir("suite_a");
    std::string d2 = fresh_dir("suite_b");
    auto names1 = build_ood_suite(clean, "feedbeef00000000", d1, cfg);
    auto names2 = build_ood_suite(clean, "feedbeef00000000", d2, cfg);
    REQUIRE(names1.size() == 4);
    CHECK(names1 == names2);

    for (const std::string& name : names1) {
      data::Dataset a = data::open_dataset(d1 + "/" + name);
      data::Dataset b = data::open_dataset(d2 + "/" + name);
      CHECK(a.manifest.count == 3);
      CHECK(a.manifest.checksum == b.manifest.checksum);
      CHECK_NOTHROW(data::verify_dataset_checksum(a));
      nlohmann::json prov = nlohmann::json::parse(a.manifest.provenance_json);
      CHECK(prov.at("kind") == "corruption");
      CHECK(prov.at("seed") == 29);
      CHECK(prov.at("source_checksum") == "feedbeef00000000");
      double expect = cfg.table.parameter(kind_from_name(prov.at("corruption")),
                                          prov.at("severity").get<int>());
      CHECK(prov.at("parameter").get<double>() == expect);
    }
  }
}
