#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace covflow::metrics {

// Mann-Whitney AUROC: fraction of (ood, id) pairs with ood > id, ties half.
// Scores must be oriented so that higher means more OOD.
double auroc(std::span<const double> id_scores, std::span<const double> ood_scores);

// False-positive rate at the given true-positive rate, OOD as the positive
// class. The threshold is the k-th largest OOD score with k = ceil(m * tpr);
// both rates use inclusive (>=) comparison.
double fpr_at_tpr(std::span<const double> id_scores, std::span<const double> ood_scores,
                  double tpr_target = 0.95);

struct ReportRow {
  std::string corruption;  // "AVERAGE" marks aggregate rows
  int severity = 0;        // 0 in an aggregate row means all severities
  std::string metric;
  double auroc_value = 0.0;
  double fpr95 = 0.0;
  std::size_t n_id = 0;
  std::size_t n_ood = 0;
};

struct EvalReport {
  std::vector<ReportRow> rows;
  std::string to_csv(const std::string& config_comment = "") const;
};

// Per-condition score streams: metric name -> (id scores, ood scores), both
// oriented higher = more OOD.
using MetricScores = std::map<std::string, std::pair<std::vector<double>, std::vector<double>>>;
using ConditionKey = std::pair<std::string, int>;  // (corruption, severity)

// Rows per (condition, metric), then AVERAGE rows per (severity, metric) over
// corruption kinds, then overall AVERAGE rows per metric. Averages are
// arithmetic means of the constituent rows; counts are sums.
EvalReport build_report(const std::map<ConditionKey, MetricScores>& conditions,
                        const std::vector<std::string>& metric_order);

}  // namespace covflow::metrics
