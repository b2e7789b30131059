#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "covflow/tensor.hpp"

namespace covflow::ad {

using NodeId = std::uint32_t;

enum class Op : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kExp,
  kLog,
  kTanh,
  kSigmoid,
  kSoftplus,
  kAffine,
  kSumReduce,
  kMeanReduce,
  kBroadcast,
  kReshape,
  kConcat,
  kSlice,
  kTranspose2d,
  kMatMul,
  kConv2d,
  kConv2dWeightGrad,
  kKernelFlipTranspose,
};

const char* op_name(Op op);

struct Node {
  Op op;
  Shape shape;
  std::vector<NodeId> inputs;
  std::vector<std::size_t> attrs;  // SumReduce/MeanReduce: axes; Slice: {axis,start,len}; Concat: {axis}
  double alpha = 1.0;              // Affine: alpha*x + beta
  double beta = 0.0;
  std::string name;                // Leaf
  Tensor value;                    // Constant
};

class GraphError : public std::runtime_error {
 public:
  GraphError(const std::string& msg, std::optional<NodeId> node = std::nullopt)
      : std::runtime_error(msg), node_id(node) {}
  std::optional<NodeId> node_id;
};

class EvalError : public std::runtime_error {
 public:
  EvalError(const std::string& msg, NodeId node) : std::runtime_error(msg), node_id(node) {}
  NodeId node_id;
};

// Append-only computation DAG. Node ids are topologically ordered by
// construction: every input id is smaller than the node that consumes it.
// Building is single-threaded; a finished graph is immutable from the
// evaluator's point of view, so concurrent evaluation is safe.
class Graph {
 public:
  NodeId leaf(std::string name, Shape shape);
  NodeId constant(Tensor value);
  // Memoized all-zero constant, shared across backprop expansions.
  NodeId zero_constant(const Shape& shape);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId div(NodeId a, NodeId b);
  NodeId neg(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId tanh(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId softplus(NodeId a);
  NodeId affine(NodeId a, double alpha, double beta);

  NodeId sum_reduce(NodeId a, std::vector<std::size_t> axes);   // keeps reduced dims as 1
  NodeId mean_reduce(NodeId a, std::vector<std::size_t> axes);  // keeps reduced dims as 1
  NodeId broadcast(NodeId a, Shape target);
  NodeId reshape(NodeId a, Shape target);
  NodeId concat(const std::vector<NodeId>& parts, std::size_t axis);
  NodeId slice(NodeId a, std::size_t axis, std::size_t start, std::size_t len);
  NodeId transpose2d(NodeId a);
  NodeId matmul(NodeId a, NodeId b);
  // x: [N,Ci,H,W], w: [Co,Ci,kh,kw] with odd kh,kw; stride 1, zero "same"
  // padding, no bias.
  NodeId conv2d(NodeId x, NodeId w);
  // Gradient of conv2d w.r.t. its kernel: x [N,Ci,H,W], gy [N,Co,H,W]
  // -> [Co,Ci,kh,kw]. Exposed as a node so second derivatives stay in-graph.
  NodeId conv2d_weight_grad(NodeId x, NodeId gy, std::size_t kh, std::size_t kw);
  // [Co,Ci,kh,kw] -> [Ci,Co,kh,kw] with both spatial axes reversed.
  NodeId kernel_flip_transpose(NodeId w);

  // Composites (no new primitive kinds).
  NodeId square(NodeId a) { return mul(a, a); }
  NodeId sqrt_of(NodeId a) { return exp(affine(log(a), 0.5, 0.0)); }

  const Node& node(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

  void set_output(NodeId id);
  NodeId output() const;
  bool has_output() const { return output_.has_value(); }

  const std::vector<NodeId>& leaves() const { return leaf_ids_; }
  NodeId find_leaf(const std::string& name) const;  // throws if absent

  // Appends adjoint nodes computing d(out)/d(wrt[i]) and returns their ids.
  // `out` must be scalar (one element). Results are memoized so repeated
  // requests do not regrow the graph.
  std::vector<NodeId> gradient_nodes(NodeId out, std::span<const NodeId> wrt);

  // Builds || d(out)/d(input) ||_2 as a scalar node.
  NodeId gradient_norm_node(NodeId out, NodeId input);

 private:
  NodeId push(Node n);
  void check_id(NodeId id) const;
  NodeId binary_same_shape(Op op, NodeId a, NodeId b);
  NodeId unary(Op op, NodeId a);

  std::deque<Node> nodes_;  // deque keeps references stable across appends
  std::vector<NodeId> leaf_ids_;
  std::unordered_map<std::string, NodeId> leaf_by_name_;
  std::map<Shape, NodeId> zero_consts_;
  std::optional<NodeId> output_;

  std::unique_ptr<std::mutex> grad_mutex_ = std::make_unique<std::mutex>();
  std::map<std::pair<NodeId, std::vector<NodeId>>, std::vector<NodeId>> grad_cache_;
};

// Leaf bindings by pointer; the caller owns the tensors and must keep them
// alive across execute().
class PtrBindings {
 public:
  void set(NodeId leaf, const Tensor* value) { map_[leaf] = value; }
  const Tensor* find(NodeId leaf) const {
    auto it = map_.find(leaf);
    return it == map_.end() ? nullptr : it->second;
  }

 private:
  std::unordered_map<NodeId, const Tensor*> map_;
};

// Execution plan for a fixed set of target nodes: topological order restricted
// to ancestors of the targets plus buffer-reuse bookkeeping. A plan can be
// reused for any bindings of matching shapes.
struct Plan {
  std::vector<NodeId> order;           // non-leaf, non-constant nodes, ascending
  std::vector<NodeId> targets;
  std::vector<NodeId> required_leaves;
  std::vector<std::uint32_t> consumer_count;  // indexed by NodeId
  bool check_all_finite = false;
};

Plan make_plan(const Graph& g, std::span<const NodeId> targets, bool check_all_finite = false);

// Reusable scratch buffers, pooled by element count. Not thread-safe; use one
// workspace per thread.
class Workspace {
 public:
  std::vector<double>* acquire(std::size_t numel);
  void release(std::vector<double>* buf);

 private:
  std::unordered_map<std::size_t, std::vector<std::unique_ptr<std::vector<double>>>> pool_;
  std::vector<std::unique_ptr<std::vector<double>>> lent_;
};

std::vector<Tensor> execute(const Graph& g, const Plan& plan, const PtrBindings& bindings,
                            Workspace& ws);

// Convenience single-shot API over named leaves. `evaluate` computes the
// graph output; `gradient` returns d(output)/d(leaf) for each requested leaf;
// `gradient_of_gradient_norm` differentiates ||d(output)/d(input_leaf)|| with
// respect to the requested leaves (double backprop). All three check every
// intermediate for non-finite values and report the offending node.
Tensor evaluate(Graph& g, const std::map<std::string, Tensor>& bindings);
std::map<std::string, Tensor> gradient(Graph& g, const std::vector<std::string>& wrt,
                                       const std::map<std::string, Tensor>& bindings);
std::map<std::string, Tensor> gradient_of_gradient_norm(Graph& g, const std::string& input_leaf,
                                                        const std::vector<std::string>& wrt,
                                                        const std::map<std::string, Tensor>& bindings);

}  // namespace covflow::ad
