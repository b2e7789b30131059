#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "covflow/errors.hpp"
#include "covflow/model.hpp"
#include "covflow/scoring.hpp"
#include "covflow/stats.hpp"
#include "doctest.h"
#include "test_utils.hpp"

using namespace covflow;
using namespace covflow::score;
using namespace covflow::testutil;

namespace {

flow::ModelConfig small_config(flow::FlowMode mode, std::size_t steps) {
  flow::ModelConfig cfg;
  cfg.mode = mode;
  cfg.channels = 1;
  cfg.height = 4;
  cfg.width = 4;
  cfg.coupling_steps = steps;
  cfg.hidden_channels = 4;
  cfg.residual_blocks = 1;
  cfg.init_seed = 33;
  return cfg;
}

Tensor random_images(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({n, 1, 4, 4});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.3 + 0.4 * rng.uniform();
  return t;
}

flow::FlowModel perturbed_model(flow::FlowMode mode, std::size_t steps, std::uint64_t seed) {
  flow::FlowModel m = flow::FlowModel::build(small_config(mode, steps));
  Rng rng(seed);
  for (const std::string& name : m.params().names()) {
    Tensor& t = m.params().at(name);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] += 0.04 * rng.gaussian();
  }
  return m;
}

}  // namespace

TEST_SUITE("scoring") {
  TEST_CASE("identity flow typicality equals the input norm") {
    // At initialization the single-channel flow is z = ±v, so the likelihood
    // gradient is -z and its norm is exactly the norm of the encoded input.
    flow::FlowModel m =
        flow::FlowModel::build(small_config(flow::FlowMode::kHighUnconditional, 2));
    Tensor images = random_images(5, 61);
    auto [comp, low] = m.prepare(images);
    Tensor v = m.encode_batch(comp, 17, {});
    std::vector<double> gn = typicality_score(m, images, 17);
    REQUIRE(gn.size() == 5);
    for (std::size_t b = 0; b < 5; ++b) {
      double norm = 0.0;
      for (std::size_t k = 0; k < 16; ++k) {
        norm += v[b * 16 + k] * v[b * 16 + k];
      }
      norm = std::sqrt(norm);
      CHECK(close_rel(gn[b], norm, 1e-9));
    }
  }

  TEST_CASE("typicality matches a finite-difference gradient norm") {
    flow::FlowModel m = perturbed_model(flow::FlowMode::kHighConditionalSdl, 2, 7);
    Tensor images = random_images(1, 62);
    auto [comp, low] = m.prepare(images);
    Tensor v = m.encode_batch(comp, 23, {});
    std::vector<double> gn = typicality_score(m, images, 23);

    const double d = 16.0;
    auto ll_of = [&](const Tensor& x) {
      auto out = m.transform(x, low);
      double sq = 0.0;
      for (std::size_t k = 0; k < x.numel(); ++k) sq += out.z[k] * out.z[k];
      return -0.5 * sq - d / 2.0 * std::log(2.0 * M_PI) + out.logdet[0];
    };
    const double h = 1e-5;
    double norm = 0.0;
    for (std::size_t k = 0; k < v.numel(); ++k) {
      Tensor vp = v, vm = v;
      vp[k] += h;
      vm[k] -= h;
      double g = (ll_of(vp) - ll_of(vm)) / (2.0 * h);
      norm += g * g;
    }
    norm = std::sqrt(norm);
    CHECK(close_rel(gn[0], norm, 1e-3));
  }

  TEST_CASE("accumulator handles known values and rejects degenerate streams") {
    StatsAccumulator acc;
    acc.add(0.0, 5.0);
    acc.add(2.0, 7.0);
    NormalizationStats s = acc.finalize("abc");
    CHECK(s.mu_ll == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(s.sigma_ll == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(s.mu_grad == doctest::Approx(6.0).epsilon(1e-15));
    CHECK(s.sigma_grad == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(s.count == 2);

    StatsAccumulator flat;
    flat.add(1.0, 2.0);
    flat.add(1.0, 3.0);
    CHECK_THROWS_AS(flat.finalize("abc"), ConfigError);

    StatsAccumulator single;
    single.add(1.0, 2.0);
    CHECK_THROWS_AS(single.finalize("abc"), ConfigError);
  }

  TEST_CASE("nsd identities") {
    NormalizationStats s;
    s.mu_ll = -10.0;
    s.sigma_ll = 2.0;
    s.mu_grad = 4.0;
    s.sigma_grad = 0.5;
    s.count = 10;
    s.model_fingerprint = "f";
    CHECK(nsd_value(-10.0, 4.0, s) == 0.0);
    CHECK(nsd_value(-10.0 - 2.0 * 2.0, 4.0 + 0.5, s) == doctest::Approx(3.0).epsilon(1e-15));

    // Affine reparameterization absorbed into the stats leaves NSD unchanged.
    const double c = -3.0, d = 1.25;
    NormalizationStats t = s;
    t.mu_ll = c * s.mu_ll + d;
    t.sigma_ll = std::abs(c) * s.sigma_ll;
    for (double ll : {-13.0, -10.0, -6.5}) {
      CHECK(close_rel(nsd_value(c * ll + d, 4.25, t), nsd_value(ll, 4.25, s), 1e-12));
    }
  }

  TEST_CASE("stats over a split match a two-pass recomputation") {
    flow::FlowModel m = perturbed_model(flow::FlowMode::kHighConditionalSdl, 2, 8);
    Tensor images = random_images(50, 63);
    NormalizationStats s = compute_stats(m, images, 41, 16);
    CHECK(s.count == 50);
    CHECK(s.model_fingerprint == m.fingerprint());

    auto sb = m.score(images, 41);
    std::vector<double> lls(50), gns(50);
    for (std::size_t i = 0; i < 50; ++i) {
      lls[i] = sb.ll[i].ll;
      gns[i] = sb.grad_norm[i];
    }
    auto [mu_ll, sd_ll] = two_pass_mean_std(lls);
    auto [mu_gn, sd_gn] = two_pass_mean_std(gns);
    CHECK(std::abs(s.mu_ll - mu_ll) <= 1e-9);
    CHECK(std::abs(s.sigma_ll - sd_ll) <= 1e-9);
    CHECK(std::abs(s.mu_grad - mu_gn) <= 1e-9);
    CHECK(std::abs(s.sigma_grad - sd_gn) <= 1e-9);

    CHECK_THROWS_AS(compute_stats(m, random_images(1, 64), 41, 16), ConfigError);
  }

  TEST_CASE("scoring is batch invariant and respects explicit ids") {
    flow::FlowModel m = perturbed_model(flow::FlowMode::kHighUnconditionalSdl, 2, 9);
    Tensor images = random_images(10, 65);
    auto one = score_dataset(m, images, nullptr, 19, 1);
    auto big = score_dataset(m, images, nullptr, 19, 64);
    REQUIRE(one.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(one[i].ll == big[i].ll);
      CHECK(one[i].grad_norm == big[i].grad_norm);
      CHECK(one[i].sample_id == i);
      CHECK(!one[i].has_nsd);
    }

    // Reversed dataset with matching ids yields the same records.
    Tensor rev(images.shape());
    std::vector<std::uint64_t> rev_ids(10);
    const std::size_t chw = 16;
    for (std::size_t i = 0; i < 10; ++i) {
      rev_ids[i] = 9 - i;
      for (std::size_t k = 0; k < chw; ++k) rev[i * chw + k] = images[(9 - i) * chw + k];
    }
    auto swapped = score_dataset(m, rev, nullptr, 19, 4, 1, rev_ids);
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(swapped[i].sample_id == 9 - i);
      CHECK(swapped[i].ll == one[9 - i].ll);
      CHECK(swapped[i].grad_norm == one[9 - i].grad_norm);
    }
  }

  TEST_CASE("multithreaded scoring matches single-threaded") {
    flow::FlowModel m = perturbed_model(flow::FlowMode::kHighConditionalSdl, 2, 10);
    Tensor images = random_images(12, 66);
    auto serial = score_dataset(m, images, nullptr, 27, 3, 1);
    auto parallel = score_dataset(m, images, nullptr, 27, 3, 4);
    REQUIRE(serial.size() == parallel.size());
    for (std::size_t i = 0; i < serial.size(); ++i) {
      CHECK(serial[i].ll == parallel[i].ll);
      CHECK(serial[i].grad_norm == parallel[i].grad_norm);
    }
  }

  TEST_CASE("self-scored stats give plausible folded deviations") {
    flow::FlowModel m = perturbed_model(flow::FlowMode::kHighConditionalSdl, 2, 11);
    Tensor images = random_images(60, 67);
    NormalizationStats s = compute_stats(m, images, 31, 32);
    auto records = score_dataset(m, images, &s, 31, 32);
    double ll_term = 0.0, gn_term = 0.0;
    for (const auto& r : records) {
      CHECK(r.has_nsd);
      CHECK(r.nsd >= 0.0);
      ll_term += std::abs(r.ll - s.mu_ll) / s.sigma_ll;
      gn_term += std::abs(r.grad_norm - s.mu_grad) / s.sigma_grad;
    }
    ll_term /= static_cast<double>(records.size());
    gn_term /= static_cast<double>(records.size());
    CHECK(ll_term >= 0.5);
    CHECK(ll_term <= 1.1);
    CHECK(gn_term >= 0.5);
    CHECK(gn_term <= 1.1);
  }

  TEST_CASE("stats fingerprint mismatch is rejected") {
    flow::FlowModel m = perturbed_model(flow::FlowMode::kHighConditionalSdl, 2, 12);
    Tensor images = random_images(6, 68);
    NormalizationStats s = compute_stats(m, images, 13, 8);
    s.model_fingerprint = "0000000000000000";
    CHECK_THROWS_AS(score_dataset(m, images, &s, 13, 8), DataError);
  }

  TEST_CASE("scores csv is deterministic with an exact header") {
    std::vector<ScoreRecord> recs(2);
    recs[0] = {3, -1.5, 2.25, 0.75, true};
    recs[1] = {4, -2.5, 3.5, 0.0, false};
    std::string text = scores_csv(recs, "{\"seed\":1}");
    CHECK(text == scores_csv(recs, "{\"seed\":1}"));
    CHECK(text.find("# config {\"seed\":1}\n") == 0);
    CHECK(text.find("sample_id,ll_nats,grad_norm,nsd\n") != std::string::npos);
    CHECK(text.find("3,-1.5,2.25,0.75\n") != std::string::npos);
    CHECK(text.find("4,-2.5,3.5,\n") != std::string::npos);
    std::string bare = scores_csv(recs);
    CHECK(bare.find("# config") == std::string::npos);
    CHECK(bare.find("sample_id,") == 0);
  }
}
