#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "covflow/model.hpp"
#include "covflow/stats.hpp"
#include "covflow/tensor.hpp"

namespace covflow::score {

struct ScoreRecord {
  std::uint64_t sample_id = 0;
  double ll = 0.0;         // nats
  double grad_norm = 0.0;  // Euclidean norm of d ll / d input
  double nsd = 0.0;
  bool has_nsd = false;
};

// Per-sample input-gradient norm of the log-likelihood; dequantization noise
// for sample b is keyed by mix(seed, sample_ids[b]) (default ids 0..B-1).
std::vector<double> typicality_score(flow::FlowModel& model, const Tensor& images,
                                     std::uint64_t seed,
                                     std::span<const std::uint64_t> sample_ids = {});

// Population mean/std of the ID log-likelihood and gradient-norm streams over
// a held-out split, bound to the model fingerprint. Rejects fewer than two
// samples or a degenerate (zero-variance) stream.
NormalizationStats compute_stats(flow::FlowModel& model, const Tensor& images,
                                 std::uint64_t seed, std::size_t batch_size = 64);

// One record per sample, deterministic under (seed, sample id) and invariant
// to batch size and thread count. Pass stats to fill the NSD column; the
// stats fingerprint must match the model.
std::vector<ScoreRecord> score_dataset(flow::FlowModel& model, const Tensor& images,
                                       const NormalizationStats* stats, std::uint64_t seed,
                                       std::size_t batch_size = 64, std::size_t threads = 1,
                                       std::span<const std::uint64_t> sample_ids = {});

// CSV with header sample_id,ll_nats,grad_norm,nsd; the nsd field is empty for
// records without one. `config_comment` adds a leading "# config ..." line.
std::string scores_csv(const std::vector<ScoreRecord>& records,
                       const std::string& config_comment = "");

}  // namespace covflow::score
