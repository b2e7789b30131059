#include "covflow/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <sstream>

namespace covflow::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "Leaf";
    case Op::kConstant: return "Constant";
    case Op::kAdd: return "Add";
    case Op::kSub: return "Sub";
    case Op::kMul: return "Mul";
    case Op::kDiv: return "Div";
    case Op::kNeg: return "Neg";
    case Op::kExp: return "Exp";
    case Op::kLog: return "Log";
    case Op::kTanh: return "Tanh";
    case Op::kSigmoid: return "Sigmoid";
    case Op::kSoftplus: return "Softplus";
    case Op::kAffine: return "Affine";
    case Op::kSumReduce: return "SumReduce";
    case Op::kMeanReduce: return "MeanReduce";
    case Op::kBroadcast: return "Broadcast";
    case Op::kReshape: return "Reshape";
    case Op::kConcat: return "Concat";
    case Op::kSlice: return "Slice";
    case Op::kTranspose2d: return "Transpose2d";
    case Op::kMatMul: return "MatMul";
    case Op::kConv2d: return "Conv2d";
    case Op::kConv2dWeightGrad: return "Conv2dWeightGrad";
    case Op::kKernelFlipTranspose: return "KernelFlipTranspose";
  }
  return "?";
}

namespace {

std::string node_desc(NodeId id, const Node& n) {
  std::ostringstream os;
  os << "node #" << id << " (" << op_name(n.op);
  if (!n.name.empty()) os << " '" << n.name << "'";
  os << " " << shape_str(n.shape) << ")";
  return os.str();
}

void check_nonempty_shape(const Shape& shape) {
  for (std::size_t d : shape) {
    if (d == 0) throw GraphError("empty tensors are not supported, got shape " + shape_str(shape));
  }
}

}  // namespace

NodeId Graph::push(Node n) {
  check_nonempty_shape(n.shape);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

void Graph::check_id(NodeId id) const {
  if (id >= nodes_.size()) {
    throw GraphError("node id " + std::to_string(id) + " out of range");
  }
}

const Node& Graph::node(NodeId id) const {
  check_id(id);
  return nodes_[id];
}

NodeId Graph::leaf(std::string name, Shape shape) {
  if (name.empty()) throw GraphError("leaf name must be non-empty");
  if (leaf_by_name_.count(name)) throw GraphError("duplicate leaf name '" + name + "'");
  Node n;
  n.op = Op::kLeaf;
  n.shape = std::move(shape);
  n.name = name;
  NodeId id = push(std::move(n));
  leaf_ids_.push_back(id);
  leaf_by_name_.emplace(std::move(name), id);
  return id;
}

NodeId Graph::constant(Tensor value) {
  Node n;
  n.op = Op::kConstant;
  n.shape = value.shape();
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Graph::zero_constant(const Shape& shape) {
  auto it = zero_consts_.find(shape);
  if (it != zero_consts_.end()) return it->second;
  NodeId id = constant(Tensor(shape));
  zero_consts_.emplace(shape, id);
  return id;
}

NodeId Graph::find_leaf(const std::string& name) const {
  auto it = leaf_by_name_.find(name);
  if (it == leaf_by_name_.end()) throw GraphError("unknown leaf '" + name + "'");
  return it->second;
}

NodeId Graph::binary_same_shape(Op op, NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  if (nodes_[a].shape != nodes_[b].shape) {
    throw GraphError(std::string(op_name(op)) + " shape mismatch: " + node_desc(a, nodes_[a]) +
                     " vs " + node_desc(b, nodes_[b]));
  }
  Node n;
  n.op = op;
  n.shape = nodes_[a].shape;
  n.inputs = {a, b};
  return push(std::move(n));
}

NodeId Graph::unary(Op op, NodeId a) {
  check_id(a);
  Node n;
  n.op = op;
  n.shape = nodes_[a].shape;
  n.inputs = {a};
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) { return binary_same_shape(Op::kAdd, a, b); }
NodeId Graph::sub(NodeId a, NodeId b) { return binary_same_shape(Op::kSub, a, b); }
NodeId Graph::mul(NodeId a, NodeId b) { return binary_same_shape(Op::kMul, a, b); }
NodeId Graph::div(NodeId a, NodeId b) { return binary_same_shape(Op::kDiv, a, b); }
NodeId Graph::neg(NodeId a) { return unary(Op::kNeg, a); }
NodeId Graph::exp(NodeId a) { return unary(Op::kExp, a); }
NodeId Graph::log(NodeId a) { return unary(Op::kLog, a); }
NodeId Graph::tanh(NodeId a) { return unary(Op::kTanh, a); }
NodeId Graph::sigmoid(NodeId a) { return unary(Op::kSigmoid, a); }
NodeId Graph::softplus(NodeId a) { return unary(Op::kSoftplus, a); }

NodeId Graph::affine(NodeId a, double alpha, double beta) {
  check_id(a);
  Node n;
  n.op = Op::kAffine;
  n.shape = nodes_[a].shape;
  n.inputs = {a};
  n.alpha = alpha;
  n.beta = beta;
  return push(std::move(n));
}

namespace {

void check_axes(const Shape& shape, const std::vector<std::size_t>& axes, const char* what) {
  if (axes.empty()) throw GraphError(std::string(what) + " needs at least one axis");
  std::vector<std::size_t> sorted = axes;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] >= shape.size()) {
      throw GraphError(std::string(what) + " axis " + std::to_string(sorted[i]) +
                       " out of range for shape " + shape_str(shape));
    }
    if (i > 0 && sorted[i] == sorted[i - 1]) {
      throw GraphError(std::string(what) + " repeats axis " + std::to_string(sorted[i]));
    }
  }
}

Shape reduced_shape(const Shape& shape, const std::vector<std::size_t>& axes) {
  Shape out = shape;
  for (std::size_t ax : axes) out[ax] = 1;
  return out;
}

}  // namespace

NodeId Graph::sum_reduce(NodeId a, std::vector<std::size_t> axes) {
  check_id(a);
  check_axes(nodes_[a].shape, axes, "SumReduce");
  Node n;
  n.op = Op::kSumReduce;
  n.shape = reduced_shape(nodes_[a].shape, axes);
  n.inputs = {a};
  n.attrs = std::move(axes);
  return push(std::move(n));
}

NodeId Graph::mean_reduce(NodeId a, std::vector<std::size_t> axes) {
  check_id(a);
  check_axes(nodes_[a].shape, axes, "MeanReduce");
  Node n;
  n.op = Op::kMeanReduce;
  n.shape = reduced_shape(nodes_[a].shape, axes);
  n.inputs = {a};
  n.attrs = std::move(axes);
  return push(std::move(n));
}

NodeId Graph::broadcast(NodeId a, Shape target) {
  check_id(a);
  const Shape& in = nodes_[a].shape;
  if (in.size() > target.size()) {
    throw GraphError("Broadcast cannot drop rank: " + shape_str(in) + " -> " + shape_str(target));
  }
  std::size_t pad = target.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i] != 1 && in[i] != target[pad + i]) {
      throw GraphError("Broadcast incompatible: " + shape_str(in) + " -> " + shape_str(target) +
                       " at axis " + std::to_string(pad + i));
    }
  }
  Node n;
  n.op = Op::kBroadcast;
  n.shape = std::move(target);
  n.inputs = {a};
  return push(std::move(n));
}

NodeId Graph::reshape(NodeId a, Shape target) {
  check_id(a);
  if (shape_numel(target) != shape_numel(nodes_[a].shape)) {
    throw GraphError("Reshape changes element count: " + shape_str(nodes_[a].shape) + " -> " +
                     shape_str(target));
  }
  Node n;
  n.op = Op::kReshape;
  n.shape = std::move(target);
  n.inputs = {a};
  return push(std::move(n));
}

NodeId Graph::concat(const std::vector<NodeId>& parts, std::size_t axis) {
  if (parts.empty()) throw GraphError("Concat needs at least one input");
  for (NodeId p : parts) check_id(p);
  const Shape& first = nodes_[parts[0]].shape;
  if (axis >= first.size()) {
    throw GraphError("Concat axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(first));
  }
  Shape out = first;
  std::size_t total = 0;
  for (NodeId p : parts) {
    const Shape& s = nodes_[p].shape;
    if (s.size() != first.size()) {
      throw GraphError("Concat rank mismatch at " + node_desc(p, nodes_[p]));
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        throw GraphError("Concat shape mismatch at " + node_desc(p, nodes_[p]));
      }
    }
    total += s[axis];
  }
  out[axis] = total;
  Node n;
  n.op = Op::kConcat;
  n.shape = std::move(out);
  n.inputs = parts;
  n.attrs = {axis};
  return push(std::move(n));
}

NodeId Graph::slice(NodeId a, std::size_t axis, std::size_t start, std::size_t len) {
  check_id(a);
  const Shape& in = nodes_[a].shape;
  if (axis >= in.size()) {
    throw GraphError("Slice axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(in));
  }
  if (len == 0 || start + len > in[axis]) {
    throw GraphError("Slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of range on axis " + std::to_string(axis) + " of " + shape_str(in));
  }
  Shape out = in;
  out[axis] = len;
  Node n;
  n.op = Op::kSlice;
  n.shape = std::move(out);
  n.inputs = {a};
  n.attrs = {axis, start, len};
  return push(std::move(n));
}

NodeId Graph::transpose2d(NodeId a) {
  check_id(a);
  const Shape& in = nodes_[a].shape;
  if (in.size() != 2) throw GraphError("Transpose2d needs rank 2, got " + shape_str(in));
  Node n;
  n.op = Op::kTranspose2d;
  n.shape = {in[1], in[0]};
  n.inputs = {a};
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  const Shape& sa = nodes_[a].shape;
  const Shape& sb = nodes_[b].shape;
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw GraphError("MatMul needs [m,k]x[k,n], got " + shape_str(sa) + " x " + shape_str(sb));
  }
  Node n;
  n.op = Op::kMatMul;
  n.shape = {sa[0], sb[1]};
  n.inputs = {a, b};
  return push(std::move(n));
}

NodeId Graph::conv2d(NodeId x, NodeId w) {
  check_id(x);
  check_id(w);
  const Shape& sx = nodes_[x].shape;
  const Shape& sw = nodes_[w].shape;
  if (sx.size() != 4 || sw.size() != 4) {
    throw GraphError("Conv2d needs rank-4 input and kernel, got " + shape_str(sx) + ", " +
                     shape_str(sw));
  }
  if (sw[1] != sx[1]) {
    throw GraphError("Conv2d channel mismatch: input " + shape_str(sx) + " kernel " +
                     shape_str(sw));
  }
  if (sw[2] % 2 == 0 || sw[3] % 2 == 0) {
    throw GraphError("Conv2d kernel extent must be odd, got " + shape_str(sw));
  }
  Node n;
  n.op = Op::kConv2d;
  n.shape = {sx[0], sw[0], sx[2], sx[3]};
  n.inputs = {x, w};
  return push(std::move(n));
}

NodeId Graph::conv2d_weight_grad(NodeId x, NodeId gy, std::size_t kh, std::size_t kw) {
  check_id(x);
  check_id(gy);
  const Shape& sx = nodes_[x].shape;
  const Shape& sg = nodes_[gy].shape;
  if (sx.size() != 4 || sg.size() != 4 || sx[0] != sg[0] || sx[2] != sg[2] || sx[3] != sg[3]) {
    throw GraphError("Conv2dWeightGrad needs matching [N,*,H,W] pair, got " + shape_str(sx) +
                     ", " + shape_str(sg));
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw GraphError("Conv2dWeightGrad kernel extent must be odd");
  Node n;
  n.op = Op::kConv2dWeightGrad;
  n.shape = {sg[1], sx[1], kh, kw};
  n.inputs = {x, gy};
  n.attrs = {kh, kw};
  return push(std::move(n));
}

NodeId Graph::kernel_flip_transpose(NodeId w) {
  check_id(w);
  const Shape& sw = nodes_[w].shape;
  if (sw.size() != 4) throw GraphError("KernelFlipTranspose needs rank 4, got " + shape_str(sw));
  Node n;
  n.op = Op::kKernelFlipTranspose;
  n.shape = {sw[1], sw[0], sw[2], sw[3]};
  n.inputs = {w};
  return push(std::move(n));
}

void Graph::set_output(NodeId id) {
  check_id(id);
  output_ = id;
}

NodeId Graph::output() const {
  if (!output_) throw GraphError("graph has no output set");
  return *output_;
}

std::vector<NodeId> Graph::gradient_nodes(NodeId out, std::span<const NodeId> wrt) {
  check_id(out);
  for (NodeId w : wrt) check_id(w);
  if (shape_numel(nodes_[out].shape) != 1) {
    throw GraphError("gradient requires a scalar output, got " + node_desc(out, nodes_[out]));
  }

  std::lock_guard<std::mutex> lock(*grad_mutex_);
  std::vector<NodeId> key_wrt(wrt.begin(), wrt.end());
  auto cache_key = std::make_pair(out, key_wrt);
  if (auto it = grad_cache_.find(cache_key); it != grad_cache_.end()) return it->second;

  // Ancestors of `out`.
  std::vector<bool> anc(nodes_.size(), false);
  {
    std::vector<NodeId> stack{out};
    anc[out] = true;
    while (!stack.empty()) {
      NodeId id = stack.back();
      stack.pop_back();
      for (NodeId in : nodes_[id].inputs) {
        if (!anc[in]) {
          anc[in] = true;
          stack.push_back(in);
        }
      }
    }
  }

  std::unordered_map<NodeId, NodeId> adj;
  adj[out] = constant(Tensor(nodes_[out].shape, 1.0));

  auto accumulate = [&](NodeId target, NodeId contrib) {
    auto it = adj.find(target);
    if (it == adj.end()) {
      adj[target] = contrib;
    } else {
      it->second = add(it->second, contrib);
    }
  };

  // Reverse sweep; consumers always have larger ids than producers, so a
  // node's adjoint is complete once every id above it has been visited.
  for (NodeId id = out + 1; id-- > 0;) {
    if (!anc[id]) continue;
    auto adj_it = adj.find(id);
    if (adj_it == adj.end()) continue;
    NodeId g = adj_it->second;
    const Node n = nodes_[id];  // copy: appends below may relocate storage
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConstant:
        break;
      case Op::kAdd:
        accumulate(n.inputs[0], g);
        accumulate(n.inputs[1], g);
        break;
      case Op::kSub:
        accumulate(n.inputs[0], g);
        accumulate(n.inputs[1], neg(g));
        break;
      case Op::kMul:
        accumulate(n.inputs[0], mul(g, n.inputs[1]));
        accumulate(n.inputs[1], mul(g, n.inputs[0]));
        break;
      case Op::kDiv:
        accumulate(n.inputs[0], div(g, n.inputs[1]));
        accumulate(n.inputs[1], neg(mul(g, div(id, n.inputs[1]))));
        break;
      case Op::kNeg:
        accumulate(n.inputs[0], neg(g));
        break;
      case Op::kExp:
        accumulate(n.inputs[0], mul(g, id));
        break;
      case Op::kLog:
        accumulate(n.inputs[0], div(g, n.inputs[0]));
        break;
      case Op::kTanh:
        accumulate(n.inputs[0], mul(g, affine(mul(id, id), -1.0, 1.0)));
        break;
      case Op::kSigmoid:
        accumulate(n.inputs[0], mul(g, mul(id, affine(id, -1.0, 1.0))));
        break;
      case Op::kSoftplus:
        accumulate(n.inputs[0], mul(g, sigmoid(n.inputs[0])));
        break;
      case Op::kAffine:
        accumulate(n.inputs[0], affine(g, n.alpha, 0.0));
        break;
      case Op::kSumReduce:
        accumulate(n.inputs[0], broadcast(g, nodes_[n.inputs[0]].shape));
        break;
      case Op::kMeanReduce: {
        std::size_t count = 1;
        for (std::size_t ax : n.attrs) count *= nodes_[n.inputs[0]].shape[ax];
        accumulate(n.inputs[0],
                   affine(broadcast(g, nodes_[n.inputs[0]].shape), 1.0 / static_cast<double>(count), 0.0));
        break;
      }
      case Op::kBroadcast: {
        const Shape in_shape = nodes_[n.inputs[0]].shape;
        std::size_t pad = n.shape.size() - in_shape.size();
        std::vector<std::size_t> axes;
        for (std::size_t i = 0; i < n.shape.size(); ++i) {
          std::size_t in_dim = i < pad ? 1 : in_shape[i - pad];
          if (in_dim == 1 && n.shape[i] != 1) axes.push_back(i);
        }
        NodeId r = axes.empty() ? g : sum_reduce(g, axes);
        accumulate(n.inputs[0], reshape(r, in_shape));
        break;
      }
      case Op::kReshape:
        accumulate(n.inputs[0], reshape(g, nodes_[n.inputs[0]].shape));
        break;
      case Op::kConcat: {
        std::size_t axis = n.attrs[0];
        std::size_t offset = 0;
        for (NodeId part : n.inputs) {
          std::size_t len = nodes_[part].shape[axis];
          accumulate(part, slice(g, axis, offset, len));
          offset += len;
        }
        break;
      }
      case Op::kSlice: {
        std::size_t axis = n.attrs[0], start = n.attrs[1], len = n.attrs[2];
        const Shape in_shape = nodes_[n.inputs[0]].shape;
        std::vector<NodeId> parts;
        if (start > 0) {
          Shape s = in_shape;
          s[axis] = start;
          parts.push_back(zero_constant(s));
        }
        parts.push_back(g);
        if (start + len < in_shape[axis]) {
          Shape s = in_shape;
          s[axis] = in_shape[axis] - start - len;
          parts.push_back(zero_constant(s));
        }
        accumulate(n.inputs[0], parts.size() == 1 ? g : concat(parts, axis));
        break;
      }
      case Op::kTranspose2d:
        accumulate(n.inputs[0], transpose2d(g));
        break;
      case Op::kMatMul:
        accumulate(n.inputs[0], matmul(g, transpose2d(n.inputs[1])));
        accumulate(n.inputs[1], matmul(transpose2d(n.inputs[0]), g));
        break;
      case Op::kConv2d: {
        const Shape w_shape = nodes_[n.inputs[1]].shape;
        accumulate(n.inputs[0], conv2d(g, kernel_flip_transpose(n.inputs[1])));
        accumulate(n.inputs[1], conv2d_weight_grad(n.inputs[0], g, w_shape[2], w_shape[3]));
        break;
      }
      case Op::kConv2dWeightGrad:
        accumulate(n.inputs[0], conv2d(n.inputs[1], kernel_flip_transpose(g)));
        accumulate(n.inputs[1], conv2d(n.inputs[0], g));
        break;
      case Op::kKernelFlipTranspose:
        accumulate(n.inputs[0], kernel_flip_transpose(g));
        break;
    }
  }

  std::vector<NodeId> result;
  result.reserve(key_wrt.size());
  for (NodeId w : key_wrt) {
    auto it = adj.find(w);
    result.push_back(it != adj.end() ? it->second : zero_constant(nodes_[w].shape));
  }
  grad_cache_.emplace(std::move(cache_key), result);
  return result;
}

NodeId Graph::gradient_norm_node(NodeId out, NodeId input) {
  NodeId g = gradient_nodes(out, std::span<const NodeId>(&input, 1))[0];
  const Shape& gs = nodes_[g].shape;
  std::vector<std::size_t> axes(gs.size());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  NodeId sumsq = sum_reduce(square(g), axes);
  return reshape(sqrt_of(sumsq), {1});
}

Plan make_plan(const Graph& g, std::span<const NodeId> targets, bool check_all_finite) {
  if (targets.empty()) throw GraphError("plan needs at least one target");
  Plan plan;
  plan.targets.assign(targets.begin(), targets.end());
  plan.check_all_finite = check_all_finite;

  std::vector<bool> needed(g.size(), false);
  std::vector<NodeId> stack;
  for (NodeId t : targets) {
    if (t >= g.size()) throw GraphError("target id out of range");
    if (!needed[t]) {
      needed[t] = true;
      stack.push_back(t);
    }
  }
  while (!stack.empty()) {
    NodeId id = stack.back();
    stack.pop_back();
    for (NodeId in : g.node(id).inputs) {
      if (!needed[in]) {
        needed[in] = true;
        stack.push_back(in);
      }
    }
  }

  plan.consumer_count.assign(g.size(), 0);
  for (NodeId id = 0; id < g.size(); ++id) {
    if (!needed[id]) continue;
    const Node& n = g.node(id);
    if (n.op != Op::kLeaf && n.op != Op::kConstant) plan.order.push_back(id);
    if (n.op == Op::kLeaf) plan.required_leaves.push_back(id);
    for (NodeId in : n.inputs) plan.consumer_count[in]++;
  }
  // Pin targets so their buffers survive to the end.
  for (NodeId t : targets) plan.consumer_count[t]++;
  return plan;
}

std::vector<double>* Workspace::acquire(std::size_t numel) {
  auto& bucket = pool_[numel];
  if (!bucket.empty()) {
    std::unique_ptr<std::vector<double>> buf = std::move(bucket.back());
    bucket.pop_back();
    lent_.push_back(std::move(buf));
    return lent_.back().get();
  }
  lent_.push_back(std::make_unique<std::vector<double>>(numel));
  return lent_.back().get();
}

void Workspace::release(std::vector<double>* buf) {
  for (std::size_t i = 0; i < lent_.size(); ++i) {
    if (lent_[i].get() == buf) {
      pool_[buf->size()].push_back(std::move(lent_[i]));
      lent_.erase(lent_.begin() + static_cast<std::ptrdiff_t>(i));
      return;
    }
  }
}

namespace {

struct Kernels {
  static void elementwise(const Node& n, std::span<const double* const> in, double* out,
                          std::size_t numel) {
    switch (n.op) {
      case Op::kAdd:
        for (std::size_t i = 0; i < numel; ++i) out[i] = in[0][i] + in[1][i];
        break;
      case Op::kSub:
        for (std::size_t i = 0; i < numel; ++i) out[i] = in[0][i] - in[1][i];
        break;
      case Op::kMul:
        for (std::size_t i = 0; i < numel; ++i) out[i] = in[0][i] * in[1][i];
        break;
      case Op::kDiv:
        for (std::size_t i = 0; i < numel; ++i) out[i] = in[0][i] / in[1][i];
        break;
      case Op::kNeg:
        for (std::size_t i = 0; i < numel; ++i) out[i] = -in[0][i];
        break;
      case Op::kExp:
        for (std::size_t i = 0; i < numel; ++i) out[i] = std::exp(in[0][i]);
        break;
      case Op::kLog:
        for (std::size_t i = 0; i < numel; ++i) out[i] = std::log(in[0][i]);
        break;
      case Op::kTanh:
        for (std::size_t i = 0; i < numel; ++i) out[i] = std::tanh(in[0][i]);
        break;
      case Op::kSigmoid:
        for (std::size_t i = 0; i < numel; ++i) out[i] = 1.0 / (1.0 + std::exp(-in[0][i]));
        break;
      case Op::kSoftplus:
        // log(1 + e^x), stable for large |x|.
        for (std::size_t i = 0; i < numel; ++i) {
          double x = in[0][i];
          out[i] = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
        }
        break;
      case Op::kAffine:
        for (std::size_t i = 0; i < numel; ++i) out[i] = n.alpha * in[0][i] + n.beta;
        break;
      default:
        throw GraphError("internal: bad elementwise dispatch");
    }
  }

  static void sum_reduce(const Node& n, const Shape& in_shape, const double* in, double* out,
                         bool mean) {
    const std::size_t out_numel = shape_numel(n.shape);
    std::fill(out, out + out_numel, 0.0);
    std::vector<std::size_t> out_strides = row_major_strides(n.shape);
    std::vector<std::size_t> step(in_shape.size(), 0);
    for (std::size_t ax = 0; ax < in_shape.size(); ++ax) {
      step[ax] = n.shape[ax] == 1 ? 0 : out_strides[ax];
    }
    std::vector<std::size_t> idx(in_shape.size(), 0);
    const std::size_t numel = shape_numel(in_shape);
    std::size_t off = 0;
    for (std::size_t lin = 0; lin < numel; ++lin) {
      out[off] += in[lin];
      for (std::size_t ax = in_shape.size(); ax-- > 0;) {
        idx[ax]++;
        off += step[ax];
        if (idx[ax] < in_shape[ax]) break;
        idx[ax] = 0;
        off -= step[ax] * in_shape[ax];
      }
    }
    if (mean) {
      double count = static_cast<double>(numel) / static_cast<double>(out_numel);
      for (std::size_t i = 0; i < out_numel; ++i) out[i] /= count;
    }
  }

  static void broadcast(const Node& n, const Shape& in_shape, const double* in, double* out) {
    const Shape& out_shape = n.shape;
    std::size_t pad = out_shape.size() - in_shape.size();
    std::vector<std::size_t> in_strides_full = row_major_strides(in_shape);
    std::vector<std::size_t> step(out_shape.size(), 0);
    for (std::size_t i = 0; i < out_shape.size(); ++i) {
      if (i < pad) continue;
      std::size_t d = in_shape[i - pad];
      step[i] = d == 1 ? 0 : in_strides_full[i - pad];
    }
    std::vector<std::size_t> idx(out_shape.size(), 0);
    const std::size_t numel = shape_numel(out_shape);
    std::size_t off = 0;
    for (std::size_t lin = 0; lin < numel; ++lin) {
      out[lin] = in[off];
      for (std::size_t ax = out_shape.size(); ax-- > 0;) {
        idx[ax]++;
        off += step[ax];
        if (idx[ax] < out_shape[ax]) break;
        idx[ax] = 0;
        off -= step[ax] * out_shape[ax];
      }
    }
  }

  static void concat(const Graph& g, const Node& n, std::span<const double* const> in,
                     double* out) {
    std::size_t axis = n.attrs[0];
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= n.shape[i];
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < n.shape.size(); ++i) inner *= n.shape[i];
    std::size_t out_row = n.shape[axis] * inner;
    std::size_t offset = 0;
    for (std::size_t p = 0; p < n.inputs.size(); ++p) {
      std::size_t len = g.node(n.inputs[p]).shape[axis] * inner;
      for (std::size_t o = 0; o < outer; ++o) {
        std::memcpy(out + o * out_row + offset, in[p] + o * len, len * sizeof(double));
      }
      offset += len;
    }
  }

  static void slice(const Node& n, const Shape& in_shape, const double* in, double* out) {
    std::size_t axis = n.attrs[0], start = n.attrs[1], len = n.attrs[2];
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= in_shape[i];
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < in_shape.size(); ++i) inner *= in_shape[i];
    std::size_t in_row = in_shape[axis] * inner;
    std::size_t out_row = len * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::memcpy(out + o * out_row, in + o * in_row + start * inner, out_row * sizeof(double));
    }
  }

  static void transpose2d(const Node& n, const Shape& in_shape, const double* in, double* out) {
    std::size_t m = in_shape[0], k = in_shape[1];
    (void)n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < k; ++j) out[j * m + i] = in[i * k + j];
    }
  }

  static void matmul(const Shape& sa, const Shape& sb, const double* a, const double* b,
                     double* out) {
    std::size_t m = sa[0], k = sa[1], n2 = sb[1];
    std::fill(out, out + m * n2, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t kk = 0; kk < k; ++kk) {
        double av = a[i * k + kk];
        const double* brow = b + kk * n2;
        double* orow = out + i * n2;
        for (std::size_t j = 0; j < n2; ++j) orow[j] += av * brow[j];
      }
    }
  }

  static void conv2d(const Shape& sx, const Shape& sw, const double* x, const double* w,
                     double* y) {
    const std::size_t N = sx[0], Ci = sx[1], H = sx[2], W = sx[3];
    const std::size_t Co = sw[0], kh = sw[2], kw = sw[3];
    const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2);
    const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(kw / 2);
    const std::ptrdiff_t Hs = static_cast<std::ptrdiff_t>(H);
    const std::ptrdiff_t Ws = static_cast<std::ptrdiff_t>(W);
    std::fill(y, y + N * Co * H * W, 0.0);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t o = 0; o < Co; ++o) {
        double* ych = y + ((n * Co + o) * H) * W;
        for (std::size_t i = 0; i < Ci; ++i) {
          const double* xch = x + ((n * Ci + i) * H) * W;
          const double* wk = w + ((o * Ci + i) * kh) * kw;
          for (std::size_t a = 0; a < kh; ++a) {
            const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(a) - ph;
            const std::ptrdiff_t h0 = std::max<std::ptrdiff_t>(0, -dy);
            const std::ptrdiff_t h1 = std::min<std::ptrdiff_t>(Hs, Hs - dy);
            for (std::size_t b = 0; b < kw; ++b) {
              const double wv = wk[a * kw + b];
              const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(b) - pw;
              const std::ptrdiff_t w0 = std::max<std::ptrdiff_t>(0, -dx);
              const std::ptrdiff_t w1 = std::min<std::ptrdiff_t>(Ws, Ws - dx);
              for (std::ptrdiff_t h = h0; h < h1; ++h) {
                const double* xr = xch + (h + dy) * Ws + dx;
                double* yr = ych + h * Ws;
                for (std::ptrdiff_t ww = w0; ww < w1; ++ww) yr[ww] += wv * xr[ww];
              }
            }
          }
        }
      }
    }
  }

  static void conv2d_weight_grad(const Shape& sx, const Shape& sg, std::size_t kh, std::size_t kw,
                                 const double* x, const double* gy, double* dw) {
    const std::size_t N = sx[0], Ci = sx[1], H = sx[2], W = sx[3];
    const std::size_t Co = sg[1];
    const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2);
    const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(kw / 2);
    const std::ptrdiff_t Hs = static_cast<std::ptrdiff_t>(H);
    const std::ptrdiff_t Ws = static_cast<std::ptrdiff_t>(W);
    for (std::size_t o = 0; o < Co; ++o) {
      for (std::size_t i = 0; i < Ci; ++i) {
        for (std::size_t a = 0; a < kh; ++a) {
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(a) - ph;
          const std::ptrdiff_t h0 = std::max<std::ptrdiff_t>(0, -dy);
          const std::ptrdiff_t h1 = std::min<std::ptrdiff_t>(Hs, Hs - dy);
          for (std::size_t b = 0; b < kw; ++b) {
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(b) - pw;
            const std::ptrdiff_t w0 = std::max<std::ptrdiff_t>(0, -dx);
            const std::ptrdiff_t w1 = std::min<std::ptrdiff_t>(Ws, Ws - dx);
            double acc = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
              const double* gch = gy + ((n * Co + o) * H) * W;
              const double* xch = x + ((n * Ci + i) * H) * W;
              for (std::ptrdiff_t h = h0; h < h1; ++h) {
                const double* gr = gch + h * Ws;
                const double* xr = xch + (h + dy) * Ws + dx;
                for (std::ptrdiff_t ww = w0; ww < w1; ++ww) acc += gr[ww] * xr[ww];
              }
            }
            dw[((o * Ci + i) * kh + a) * kw + b] = acc;
          }
        }
      }
    }
  }

  static void kernel_flip_transpose(const Shape& sw, const double* w, double* out) {
    const std::size_t Co = sw[0], Ci = sw[1], kh = sw[2], kw = sw[3];
    for (std::size_t o = 0; o < Co; ++o) {
      for (std::size_t i = 0; i < Ci; ++i) {
        for (std::size_t a = 0; a < kh; ++a) {
          for (std::size_t b = 0; b < kw; ++b) {
            out[((i * Co + o) * kh + (kh - 1 - a)) * kw + (kw - 1 - b)] =
                w[((o * Ci + i) * kh + a) * kw + b];
          }
        }
      }
    }
  }
};

}  // namespace

std::vector<Tensor> execute(const Graph& g, const Plan& plan, const PtrBindings& bindings,
                            Workspace& ws) {
  // Validate bindings up front so errors name the leaf, not a downstream node.
  for (NodeId leaf : plan.required_leaves) {
    const Tensor* bound = bindings.find(leaf);
    const Node& n = g.node(leaf);
    if (!bound) throw GraphError("unbound leaf '" + n.name + "'", leaf);
    if (bound->shape() != n.shape) {
      throw GraphError("binding for leaf '" + n.name + "' has shape " + shape_str(bound->shape()) +
                           ", expected " + shape_str(n.shape),
                       leaf);
    }
  }

  std::vector<const double*> value(g.size(), nullptr);
  std::vector<std::vector<double>*> owned(g.size(), nullptr);
  std::vector<std::uint32_t> remaining = plan.consumer_count;

  auto source_ptr = [&](NodeId id) -> const double* {
    const Node& n = g.node(id);
    if (n.op == Op::kLeaf) return bindings.find(id)->data();
    if (n.op == Op::kConstant) return n.value.data();
    return value[id];
  };

  auto release_input = [&](NodeId id) {
    if (remaining[id] > 0 && --remaining[id] == 0 && owned[id]) {
      ws.release(owned[id]);
      owned[id] = nullptr;
      value[id] = nullptr;
    }
  };

  std::vector<const double*> in_ptrs;
  for (NodeId id : plan.order) {
    const Node& n = g.node(id);
    in_ptrs.clear();
    for (NodeId in : n.inputs) in_ptrs.push_back(source_ptr(in));
    std::size_t numel = shape_numel(n.shape);
    std::vector<double>* buf = ws.acquire(numel);
    double* out = buf->data();

    switch (n.op) {
      case Op::kAdd:
      case Op::kSub:
      case Op::kMul:
      case Op::kDiv:
      case Op::kNeg:
      case Op::kExp:
      case Op::kLog:
      case Op::kTanh:
      case Op::kSigmoid:
      case Op::kSoftplus:
      case Op::kAffine:
        Kernels::elementwise(n, in_ptrs, out, numel);
        break;
      case Op::kSumReduce:
        Kernels::sum_reduce(n, g.node(n.inputs[0]).shape, in_ptrs[0], out, false);
        break;
      case Op::kMeanReduce:
        Kernels::sum_reduce(n, g.node(n.inputs[0]).shape, in_ptrs[0], out, true);
        break;
      case Op::kBroadcast:
        Kernels::broadcast(n, g.node(n.inputs[0]).shape, in_ptrs[0], out);
        break;
      case Op::kReshape:
        std::memcpy(out, in_ptrs[0], numel * sizeof(double));
        break;
      case Op::kConcat:
        Kernels::concat(g, n, in_ptrs, out);
        break;
      case Op::kSlice:
        Kernels::slice(n, g.node(n.inputs[0]).shape, in_ptrs[0], out);
        break;
      case Op::kTranspose2d:
        Kernels::transpose2d(n, g.node(n.inputs[0]).shape, in_ptrs[0], out);
        break;
      case Op::kMatMul:
        Kernels::matmul(g.node(n.inputs[0]).shape, g.node(n.inputs[1]).shape, in_ptrs[0],
                        in_ptrs[1], out);
        break;
      case Op::kConv2d:
        Kernels::conv2d(g.node(n.inputs[0]).shape, g.node(n.inputs[1]).shape, in_ptrs[0],
                        in_ptrs[1], out);
        break;
      case Op::kConv2dWeightGrad:
        Kernels::conv2d_weight_grad(g.node(n.inputs[0]).shape, g.node(n.inputs[1]).shape,
                                    n.attrs[0], n.attrs[1], in_ptrs[0], in_ptrs[1], out);
        break;
      case Op::kKernelFlipTranspose:
        Kernels::kernel_flip_transpose(g.node(n.inputs[0]).shape, in_ptrs[0], out);
        break;
      case Op::kLeaf:
      case Op::kConstant:
        throw GraphError("internal: leaf/constant in plan order");
    }

    value[id] = out;
    owned[id] = buf;

    if (plan.check_all_finite) {
      for (std::size_t i = 0; i < numel; ++i) {
        if (!std::isfinite(out[i])) {
          std::string msg = "non-finite value produced by " + node_desc(id, n);
          // Free everything before throwing.
          for (std::size_t nid = 0; nid < owned.size(); ++nid) {
            if (owned[nid]) ws.release(owned[nid]);
          }
          throw EvalError(msg, id);
        }
      }
    }

    for (NodeId in : n.inputs) release_input(in);
  }

  std::vector<Tensor> results;
  results.reserve(plan.targets.size());
  for (NodeId t : plan.targets) {
    const Node& n = g.node(t);
    const double* src = source_ptr(t);
    Tensor out(n.shape);
    std::memcpy(out.data(), src, out.numel() * sizeof(double));
    results.push_back(std::move(out));
  }
  for (std::size_t id = 0; id < owned.size(); ++id) {
    if (owned[id]) ws.release(owned[id]);
  }
  return results;
}

namespace {

PtrBindings bind_by_name(const Graph& g, const std::map<std::string, Tensor>& bindings) {
  PtrBindings pb;
  for (const auto& [name, tensor] : bindings) {
    pb.set(g.find_leaf(name), &tensor);
  }
  return pb;
}

}  // namespace

Tensor evaluate(Graph& g, const std::map<std::string, Tensor>& bindings) {
  NodeId out = g.output();
  Plan plan = make_plan(g, std::span<const NodeId>(&out, 1), true);
  Workspace ws;
  return execute(g, plan, bind_by_name(g, bindings), ws)[0];
}

std::map<std::string, Tensor> gradient(Graph& g, const std::vector<std::string>& wrt,
                                       const std::map<std::string, Tensor>& bindings) {
  std::vector<NodeId> wrt_ids;
  wrt_ids.reserve(wrt.size());
  for (const std::string& name : wrt) wrt_ids.push_back(g.find_leaf(name));
  std::vector<NodeId> grads = g.gradient_nodes(g.output(), wrt_ids);
  Plan plan = make_plan(g, grads, true);
  Workspace ws;
  std::vector<Tensor> vals = execute(g, plan, bind_by_name(g, bindings), ws);
  std::map<std::string, Tensor> out;
  for (std::size_t i = 0; i < wrt.size(); ++i) out.emplace(wrt[i], std::move(vals[i]));
  return out;
}

std::map<std::string, Tensor> gradient_of_gradient_norm(Graph& g, const std::string& input_leaf,
                                                        const std::vector<std::string>& wrt,
                                                        const std::map<std::string, Tensor>& bindings) {
  NodeId norm = g.gradient_norm_node(g.output(), g.find_leaf(input_leaf));
  std::vector<NodeId> wrt_ids;
  wrt_ids.reserve(wrt.size());
  for (const std::string& name : wrt) wrt_ids.push_back(g.find_leaf(name));
  std::vector<NodeId> grads = g.gradient_nodes(norm, wrt_ids);
  Plan plan = make_plan(g, grads, true);
  Workspace ws;
  std::vector<Tensor> vals = execute(g, plan, bind_by_name(g, bindings), ws);
  std::map<std::string, Tensor> out;
  for (std::size_t i = 0; i < wrt.size(); ++i) out.emplace(wrt[i], std::move(vals[i]));
  return out;
}

}  // namespace covflow::ad
