#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "covflow/dataio.hpp"
#include "covflow/model.hpp"
#include "covflow/tensor.hpp"

namespace covflow::train {

struct TrainConfig {
  double alpha = 2.0;
  double lr_max = 5e-4;
  std::size_t epochs = 300;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  double clip_norm = 0.0;             // global gradient-norm clip; 0 disables
  std::size_t checkpoint_every = 1;   // epochs between checkpoint writes
  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

// One-cycle schedule: cosine warmup from lr_max/25 to lr_max over the first
// 30% of steps, cosine decay to lr_max/1e4 over the rest. Steps past the end
// clamp to the final value.
double one_cycle_lr(std::size_t step, std::size_t total_steps, double lr_max);

struct LossDiagnostics {
  double loss = 0.0;
  double nll = 0.0;      // mean negative log-likelihood, nats
  double penalty = 0.0;  // mean per-sample input-gradient norm
};

// Evaluates the training objective mean(-ll) + alpha * mean(grad_norm) on one
// batch of raw images, with dequantization noise keyed by mix(seed, id).
LossDiagnostics evaluate_loss(flow::FlowModel& model, const Tensor& images, double alpha,
                              std::uint64_t seed,
                              std::span<const std::uint64_t> sample_ids = {});

struct TrainLogRow {
  std::size_t epoch = 0;
  std::size_t step = 0;  // global optimizer step, 1-based after the update
  double nll = 0.0;
  double penalty = 0.0;
  double bpd = 0.0;  // batch NLL in bits per dimension
  double lr = 0.0;
};

std::string train_log_header();
std::string train_log_row(const TrainLogRow& row);

// Optimizer and progress state carried inside checkpoints so a resumed run
// replays exactly. Master parameters are kept at full precision; checkpoint
// parameter tensors round through float32.
struct TrainState {
  std::uint64_t next_epoch = 0;
  std::uint64_t global_step = 0;
  std::uint64_t adam_t = 0;
  std::vector<Tensor> master;  // aligned with ParamStore name order
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::vector<std::uint8_t> serialize() const;
  static TrainState deserialize(const std::vector<std::uint8_t>& bytes);
};

// One Adam update (beta 0.9/0.999, eps 1e-8) with bias correction at step t
// (1-based) over aligned flat tensors; grads are scaled by grad_scale first.
void adam_update(std::vector<Tensor>& master, std::vector<Tensor>& m, std::vector<Tensor>& v,
                 const std::vector<const Tensor*>& grads, std::uint64_t t, double lr,
                 double grad_scale = 1.0);

struct TrainHooks {
  std::function<void(const TrainLogRow&)> on_step;
  std::function<void(std::size_t epoch, const data::Checkpoint&)> on_checkpoint;
};

struct TrainSummary {
  std::size_t steps_run = 0;
  std::size_t batches_skipped = 0;
  double final_loss = 0.0;
};

// Optimizes the model in place over `images` ([N,C,H,W] in [0,1]). Pass the
// train_state blob of a checkpoint written by a previous run to resume at the
// epoch it recorded; epoch shuffles and dequantization seeds derive from
// (seed, epoch, step), so a resumed run matches an uninterrupted one.
TrainSummary train(flow::FlowModel& model, const Tensor& images, const TrainConfig& cfg,
                   const TrainHooks& hooks = {},
                   const std::vector<std::uint8_t>* resume_state = nullptr);

}  // namespace covflow::train
