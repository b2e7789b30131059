#include "covflow/stats.hpp"

#include <cmath>
#include <stdexcept>

#include "covflow/errors.hpp"
#include "json.hpp"

namespace covflow::score {

void NormalizationStats::validate() const {
  if (count < 2) throw ConfigError("normalization stats need at least 2 samples");
  if (!(sigma_ll > 0.0) || !std::isfinite(sigma_ll)) {
    throw ConfigError("log-likelihood spread must be positive (degenerate score stream)");
  }
  if (!(sigma_grad > 0.0) || !std::isfinite(sigma_grad)) {
    throw ConfigError("gradient-norm spread must be positive (degenerate score stream)");
  }
  if (!std::isfinite(mu_ll) || !std::isfinite(mu_grad)) {
    throw ConfigError("normalization stats contain non-finite means");
  }
  if (model_fingerprint.empty()) throw ConfigError("normalization stats lack a model fingerprint");
}

std::string NormalizationStats::to_json() const {
  nlohmann::json j;
  j["count"] = count;
  j["model_fingerprint"] = model_fingerprint;
  j["mu_grad"] = mu_grad;
  j["mu_ll"] = mu_ll;
  j["sigma_grad"] = sigma_grad;
  j["sigma_ll"] = sigma_ll;
  return j.dump();
}

NormalizationStats NormalizationStats::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  NormalizationStats s;
  s.count = j.at("count").get<std::size_t>();
  s.model_fingerprint = j.at("model_fingerprint").get<std::string>();
  s.mu_grad = j.at("mu_grad").get<double>();
  s.mu_ll = j.at("mu_ll").get<double>();
  s.sigma_grad = j.at("sigma_grad").get<double>();
  s.sigma_ll = j.at("sigma_ll").get<double>();
  s.validate();
  return s;
}

void StatsAccumulator::add(double ll, double grad_norm) {
  n_ += 1;
  double n = static_cast<double>(n_);
  double d_ll = ll - mean_ll_;
  mean_ll_ += d_ll / n;
  m2_ll_ += d_ll * (ll - mean_ll_);
  double d_gn = grad_norm - mean_gn_;
  mean_gn_ += d_gn / n;
  m2_gn_ += d_gn * (grad_norm - mean_gn_);
}

NormalizationStats StatsAccumulator::finalize(const std::string& model_fingerprint) const {
  NormalizationStats s;
  s.count = n_;
  s.model_fingerprint = model_fingerprint;
  s.mu_ll = mean_ll_;
  s.mu_grad = mean_gn_;
  double n = static_cast<double>(n_);
  s.sigma_ll = n_ > 0 ? std::sqrt(m2_ll_ / n) : 0.0;  // population convention
  s.sigma_grad = n_ > 0 ? std::sqrt(m2_gn_ / n) : 0.0;
  s.validate();
  return s;
}

double nsd_value(double ll, double grad_norm, const NormalizationStats& stats) {
  return std::abs(ll - stats.mu_ll) / stats.sigma_ll +
         std::abs(grad_norm - stats.mu_grad) / stats.sigma_grad;
}

}  // namespace covflow::score
