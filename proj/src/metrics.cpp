#include "covflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "covflow/errors.hpp"

namespace covflow::metrics {

namespace {

void check_scores(std::span<const double> id_scores, std::span<const double> ood_scores) {
  if (id_scores.empty() || ood_scores.empty()) {
    throw ConfigError("metrics need non-empty ID and OOD score lists");
  }
  for (double v : id_scores) {
    if (std::isnan(v)) throw ConfigError("ID scores contain NaN");
  }
  for (double v : ood_scores) {
    if (std::isnan(v)) throw ConfigError("OOD scores contain NaN");
  }
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

double auroc(std::span<const double> id_scores, std::span<const double> ood_scores) {
  check_scores(id_scores, ood_scores);
  const std::size_t n = id_scores.size(), m = ood_scores.size();
  std::vector<std::pair<double, int>> all;
  all.reserve(n + m);
  for (double v : id_scores) all.emplace_back(v, 0);
  for (double v : ood_scores) all.emplace_back(v, 1);
  std::sort(all.begin(), all.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  double rank_sum_ood = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    double midrank = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].second == 1) rank_sum_ood += midrank;
    }
    i = j;
  }
  double u = rank_sum_ood - 0.5 * static_cast<double>(m) * static_cast<double>(m + 1);
  return u / (static_cast<double>(n) * static_cast<double>(m));
}

double fpr_at_tpr(std::span<const double> id_scores, std::span<const double> ood_scores,
                  double tpr_target) {
  check_scores(id_scores, ood_scores);
  if (!(tpr_target > 0.0) || tpr_target > 1.0) {
    throw ConfigError("TPR target must lie in (0, 1]");
  }
  const std::size_t m = ood_scores.size();
  std::vector<double> ood(ood_scores.begin(), ood_scores.end());
  std::sort(ood.begin(), ood.end(), std::greater<>());
  std::size_t k = static_cast<std::size_t>(std::ceil(tpr_target * static_cast<double>(m)));
  k = std::clamp<std::size_t>(k, 1, m);
  double threshold = ood[k - 1];
  std::size_t false_pos = 0;
  for (double v : id_scores) {
    if (v >= threshold) ++false_pos;
  }
  return static_cast<double>(false_pos) / static_cast<double>(id_scores.size());
}

std::string EvalReport::to_csv(const std::string& config_comment) const {
  std::string out =
      "# OOD is the positive class for FPR95; AVERAGE rows with severity 0 span all severities\n";
  if (!config_comment.empty()) out += "# config " + config_comment + "\n";
  out += "corruption,severity,metric,auroc,fpr95,n_id,n_ood\n";
  for (const ReportRow& r : rows) {
    out += r.corruption + "," + std::to_string(r.severity) + "," + r.metric + "," +
           format_double(r.auroc_value) + "," + format_double(r.fpr95) + "," +
           std::to_string(r.n_id) + "," + std::to_string(r.n_ood) + "\n";
  }
  return out;
}

EvalReport build_report(const std::map<ConditionKey, MetricScores>& conditions,
                        const std::vector<std::string>& metric_order) {
  if (conditions.empty()) throw ConfigError("report needs at least one condition");
  EvalReport report;
  std::set<int> severities;
  for (const auto& [key, by_metric] : conditions) {
    if (key.first == "AVERAGE") throw ConfigError("'AVERAGE' is reserved for aggregate rows");
    if (key.second < 1) throw ConfigError("condition severity must be >= 1");
    severities.insert(key.second);
    for (const std::string& metric : metric_order) {
      auto it = by_metric.find(metric);
      if (it == by_metric.end()) {
        throw ConfigError("condition " + key.first + "/" + std::to_string(key.second) +
                          " lacks metric '" + metric + "'");
      }
      ReportRow row;
      row.corruption = key.first;
      row.severity = key.second;
      row.metric = metric;
      row.auroc_value = auroc(it->second.first, it->second.second);
      row.fpr95 = fpr_at_tpr(it->second.first, it->second.second);
      row.n_id = it->second.first.size();
      row.n_ood = it->second.second.size();
      report.rows.push_back(std::move(row));
    }
  }

  auto average_over = [&](const std::string& metric, int severity_filter) {
    ReportRow avg;
    avg.corruption = "AVERAGE";
    avg.severity = severity_filter;
    avg.metric = metric;
    std::size_t k = 0;
    for (const ReportRow& r : report.rows) {
      if (r.corruption == "AVERAGE" || r.metric != metric) continue;
      if (severity_filter != 0 && r.severity != severity_filter) continue;
      avg.auroc_value += r.auroc_value;
      avg.fpr95 += r.fpr95;
      avg.n_id += r.n_id;
      avg.n_ood += r.n_ood;
      ++k;
    }
    avg.auroc_value /= static_cast<double>(k);
    avg.fpr95 /= static_cast<double>(k);
    return avg;
  };

  if (severities.size() > 1) {
    for (int s : severities) {
      for (const std::string& metric : metric_order) report.rows.push_back(average_over(metric, s));
    }
  }
  for (const std::string& metric : metric_order) report.rows.push_back(average_over(metric, 0));
  return report;
}

}  // namespace covflow::metrics
