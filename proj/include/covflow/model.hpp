#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "covflow/freq.hpp"
#include "covflow/graph.hpp"
#include "covflow/layers.hpp"
#include "covflow/rng.hpp"
#include "covflow/tensor.hpp"

namespace covflow::flow {

enum class FlowMode {
  kFullUnconditional = 1,     // density over the full image in [0,1]
  kHighUnconditional = 2,     // density over the high-frequency component
  kHighUnconditionalSdl = 3,  // + signal-dependent scaling from the low component
  kHighConditionalSdl = 4,    // + coupling conditioners see the low component
};

const char* flow_mode_name(FlowMode m);
FlowMode flow_mode_from_name(const std::string& name);

// FNV-1a over the canonical config JSON, then each parameter name and its
// float32 image, in store order. Shared by the model and the checkpoint
// loader so the two can never disagree.
std::string parameter_fingerprint(const std::string& config_json,
                                  const std::vector<std::string>& names,
                                  const std::function<const Tensor&(const std::string&)>& get);

struct ModelConfig {
  FlowMode mode = FlowMode::kHighConditionalSdl;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t coupling_steps = 16;
  std::size_t hidden_channels = 39;
  std::size_t residual_blocks = 2;
  double filter_sigma = 1.0;
  std::uint32_t bit_depth = 16;
  std::uint64_t init_seed = 76001;

  bool models_high() const { return mode != FlowMode::kFullUnconditional; }
  bool has_sdl() const {
    return mode == FlowMode::kHighUnconditionalSdl || mode == FlowMode::kHighConditionalSdl;
  }
  bool conditional() const { return mode == FlowMode::kHighConditionalSdl; }
  std::size_t dims() const { return channels * height * width; }
  // Modeled value range: [0,1] for full images, [-0.5,0.5] for the
  // high-frequency component.
  freq::DequantConfig dequant() const;
  void validate() const;
  std::string to_json() const;  // canonical (sorted keys)
  static ModelConfig from_json(const std::string& text);
};

struct LikelihoodResult {
  double ll = 0.0;         // log p, nats
  double log_prior = 0.0;  // base-distribution term
  double logdet = 0.0;     // total volume correction
  double bpd = 0.0;
};

class FlowModel {
 public:
  static FlowModel build(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::size_t parameter_count() const { return params_.total_parameters(); }
  // Hash of the canonical config and the float32 image of every parameter.
  std::string fingerprint() const;

  // Splits a raw [B,C,H,W] batch in [0,1] into (modeled component, low
  // component). Full-image mode passes the image through with a zero low.
  std::pair<Tensor, Tensor> prepare(const Tensor& images) const;

  // Log-likelihood of raw images. Dequantization noise for sample b is keyed
  // by mix(seed, sample_ids[b]) (default ids 0..B-1), so results are
  // independent of how a dataset is split into batches.
  std::vector<LikelihoodResult> log_likelihood(const Tensor& images, std::uint64_t seed,
                                               std::span<const std::uint64_t> sample_ids = {});

  struct ScoreBatch {
    std::vector<LikelihoodResult> ll;
    std::vector<double> grad_norm;  // || d ll / d input || per sample
  };
  ScoreBatch score(const Tensor& images, std::uint64_t seed,
                   std::span<const std::uint64_t> sample_ids = {});

  // Deterministic continuous-domain transform: no dequantization involved.
  struct TransformOut {
    Tensor z;       // [B,C,H,W]
    Tensor logdet;  // [B]
  };
  TransformOut transform(const Tensor& component, const Tensor& low);
  Tensor inverse_transform(const Tensor& z, const Tensor& low);

  // Draws `count` latent samples at the given temperature and inverts them.
  // `low` ([count,C,H,W]) conditions the layers that use it; unconditional
  // modes accept an empty tensor.
  Tensor sample_component(std::size_t count, const Tensor& low, double temperature,
                          std::uint64_t seed);

  // Training-graph bundle: fresh graph with input and parameter leaves, the
  // loss terms, and parameter gradient nodes (double backprop when alpha > 0).
  struct TrainGraph {
    std::unique_ptr<ad::Graph> graph;
    ad::NodeId v = 0;
    ad::NodeId xl = 0;
    bool has_xl = false;
    ad::NodeId ll = 0;            // [B,1,1,1]
    ad::NodeId nll_mean = 0;      // [1]
    ad::NodeId penalty_mean = 0;  // [1]
    ad::NodeId loss = 0;          // [1]
    std::vector<std::string> param_names;
    std::vector<ad::NodeId> param_leaves;
    std::vector<ad::NodeId> param_grads;
  };
  TrainGraph build_train_graph(std::size_t batch, double alpha) const;

  // Encodes the modeled component of each raw image with per-sample noise.
  Tensor encode_batch(const Tensor& component_raw, std::uint64_t seed,
                      std::span<const std::uint64_t> sample_ids) const;

 private:
  explicit FlowModel(ModelConfig cfg) : cfg_(std::move(cfg)) {}

  struct FlowNodes {
    ad::NodeId z = 0;
    ad::NodeId logdet = 0;  // [B,1,1,1]
  };
  FlowNodes build_flow(ad::Graph& g, ad::NodeId v, std::optional<ad::NodeId> xl,
                       const std::map<std::string, ad::NodeId>& leaves) const;
  std::map<std::string, ad::NodeId> make_param_leaves(ad::Graph& g) const;

  struct CacheEntry {
    std::unique_ptr<ad::Graph> graph;
    ad::Plan plan;
    ad::NodeId v = 0;
    ad::NodeId xl = 0;
    bool has_xl = false;
    std::vector<ad::NodeId> targets;
  };
  enum class Purpose { kLikelihood, kScore, kTransform };
  CacheEntry& cached(Purpose purpose, std::size_t batch);
  ad::PtrBindings bind_params(const ad::Graph& g) const;

  // Per-step conditioner graphs used by the numeric inverse.
  struct StepStEntry {
    std::unique_ptr<ad::Graph> graph;
    ad::Plan plan;
    ad::NodeId z_in = 0;
    ad::NodeId xl = 0;
    bool has_xl = false;
  };
  StepStEntry& cached_step_st(std::size_t step, std::size_t batch);

  ModelConfig cfg_;
  ParamStore params_;
  std::map<std::size_t, Tensor> masks_;  // parity masks by step
  std::map<std::string, Tensor> mix_consts_;  // perm/sign constants by name

  std::unique_ptr<std::mutex> cache_mutex_ = std::make_unique<std::mutex>();
  std::map<std::pair<int, std::size_t>, CacheEntry> cache_;
  std::map<std::pair<std::size_t, std::size_t>, StepStEntry> step_cache_;
};

}  // namespace covflow::flow
