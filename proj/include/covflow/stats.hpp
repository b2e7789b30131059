#pragma once

#include <cstddef>
#include <string>

namespace covflow::score {

// Normalization statistics of the in-distribution score streams, computed on
// a held-out validation split and bound to a model fingerprint.
struct NormalizationStats {
  double mu_ll = 0.0;
  double sigma_ll = 0.0;
  double mu_grad = 0.0;
  double sigma_grad = 0.0;
  std::size_t count = 0;
  std::string model_fingerprint;

  void validate() const;
  std::string to_json() const;  // canonical (sorted keys)
  static NormalizationStats from_json(const std::string& text);
};

// Streaming (Welford) accumulator over (log-likelihood, gradient-norm) pairs.
class StatsAccumulator {
 public:
  void add(double ll, double grad_norm);
  std::size_t count() const { return n_; }
  NormalizationStats finalize(const std::string& model_fingerprint) const;

 private:
  std::size_t n_ = 0;
  double mean_ll_ = 0.0, m2_ll_ = 0.0;
  double mean_gn_ = 0.0, m2_gn_ = 0.0;
};

// |ll - mu_L|/sigma_L + |grad - mu_T|/sigma_T, each stream standardized by
// its own statistics.
double nsd_value(double ll, double grad_norm, const NormalizationStats& stats);

}  // namespace covflow::score
