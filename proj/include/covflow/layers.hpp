#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "covflow/graph.hpp"
#include "covflow/rng.hpp"
#include "covflow/tensor.hpp"

namespace covflow::flow {

// Named, ordered parameter tensors. Order is the serialization order.
class ParamStore {
 public:
  Tensor& add(std::string name, Tensor init);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::string>& names() const { return names_; }
  std::size_t total_parameters() const;

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, Tensor> values_;
};

// Checkerboard mask [1,1,h,w]; element is 1 where (y+x+parity) is even.
// Mask value 1 marks the passive (identity) positions.
Tensor checkerboard_mask(std::size_t h, std::size_t w, int parity);

// Graph-side layer builders. Parameters enter as leaf node ids; the caller
// owns the name -> id mapping.

struct ConditionerParams {
  ad::NodeId stem_w, stem_b;
  std::vector<std::pair<ad::NodeId, ad::NodeId>> blocks;  // conv weight, bias
  ad::NodeId head_w, head_b;
  ad::NodeId s_scale;
};

struct CouplingStOut {
  ad::NodeId s_eff;     // (1-m) * s_scale * tanh(s_raw)
  ad::NodeId t_masked;  // (1-m) * t
};

// Conditioner applied to the masked input (mask applied inside), optionally
// concatenated with a conditioning image along channels.
CouplingStOut build_coupling_st(ad::Graph& g, ad::NodeId x, std::optional<ad::NodeId> cond,
                                const Tensor& mask, const ConditionerParams& p);

struct FlowStepOut {
  ad::NodeId z;
  ad::NodeId logdet;  // [B,1,1,1]
};

// z = m*x + (1-m)*(x*exp(s) + t)
FlowStepOut build_coupling(ad::Graph& g, ad::NodeId x, std::optional<ad::NodeId> cond,
                           const Tensor& mask, const ConditionerParams& p);

// Signal-dependent scaling: z = x * sqrt(softplus(b1) * cond + softplus(b2)).
// cond must be non-negative. beta1, beta2 are per-channel [C].
FlowStepOut build_sdl(ad::Graph& g, ad::NodeId x, ad::NodeId cond, ad::NodeId beta1,
                      ad::NodeId beta2);

// Invertible per-pixel channel mixing parameterized by a packed LU
// factorization: W = perm * L * U with unit-lower L, and U carrying
// sign * exp(log_diag) on its diagonal. perm and sign are fixed constants.
struct Conv1x1Params {
  ad::NodeId l_packed = 0;  // strict lower entries, row-major; unused when C == 1
  ad::NodeId u_packed = 0;  // strict upper entries, row-major; unused when C == 1
  ad::NodeId log_diag = 0;  // [C]
  Tensor perm;              // [C,C] permutation constant
  Tensor sign;              // [C] diagonal signs, +-1
};

FlowStepOut build_conv1x1(ad::Graph& g, ad::NodeId x, const Conv1x1Params& p);

// Parameter/constant bundle for a packed mixing matrix.
struct Conv1x1Init {
  Tensor l_packed;
  Tensor u_packed;
  Tensor log_diag;
  Tensor perm;
  Tensor sign;
};

// Random rotation (orthogonal, via QR of a Gaussian matrix), LU-factored.
Conv1x1Init conv1x1_init_rotation(std::size_t c, Rng& rng);
// Factorization of an explicit matrix; rejects |det| < 1e-12.
Conv1x1Init conv1x1_from_matrix(const Tensor& w);
// Dense [C,C] row-major matrix from packed parameters.
std::vector<double> conv1x1_materialize(const Tensor& l_packed, const Tensor& u_packed,
                                        const Tensor& log_diag, const Tensor& perm,
                                        const Tensor& sign);

// Numeric inverses used by sampling. All operate on [B,C,H,W] tensors.
Tensor coupling_inverse(const Tensor& z, const Tensor& s_eff, const Tensor& t_masked);
Tensor sdl_inverse(const Tensor& z, const Tensor& cond, const Tensor& beta1, const Tensor& beta2);
Tensor conv1x1_inverse(const Tensor& z, const std::vector<double>& w_dense);

double softplus_value(double x);
// Inverse of softplus, for picking initializations by target output.
double softplus_inverse(double y);

}  // namespace covflow::flow
