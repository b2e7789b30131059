#pragma once

// Shared oracles for unit and acceptance tests. Everything here is
// deliberately naive: finite differences, dense LU, O(n^2) pair counting.
// The production code must agree with these, not the other way round.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "covflow/graph.hpp"
#include "covflow/rng.hpp"
#include "covflow/tensor.hpp"

namespace covflow::testutil {

inline bool close_rel(double a, double b, double tol) {
  double scale = std::max({1.0, std::fabs(a), std::fabs(b)});
  return std::fabs(a - b) <= tol * scale;
}

inline double evaluate_scalar(ad::Graph& g, const std::map<std::string, Tensor>& bindings) {
  Tensor out = ad::evaluate(g, bindings);
  if (out.numel() != 1) throw std::runtime_error("expected scalar output");
  return out[0];
}

// Central-difference gradient of the graph output w.r.t. one leaf.
inline Tensor fd_gradient(ad::Graph& g, const std::string& wrt,
                          const std::map<std::string, Tensor>& bindings, double h = 1e-5) {
  std::map<std::string, Tensor> b = bindings;
  Tensor& x = b.at(wrt);
  Tensor grad(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    double orig = x[i];
    x[i] = orig + h;
    double fp = evaluate_scalar(g, b);
    x[i] = orig - h;
    double fm = evaluate_scalar(g, b);
    x[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

// || d(output)/d(input) || computed entirely by finite differences.
inline double fd_gradient_norm(ad::Graph& g, const std::string& input,
                               const std::map<std::string, Tensor>& bindings, double h = 1e-5) {
  Tensor grad = fd_gradient(g, input, bindings, h);
  double s = 0.0;
  for (std::size_t i = 0; i < grad.numel(); ++i) s += grad[i] * grad[i];
  return std::sqrt(s);
}

// d||d(output)/d(input)|| / d(wrt), doubly finite-differenced.
inline Tensor fd_grad_of_gradient_norm(ad::Graph& g, const std::string& input,
                                       const std::string& wrt,
                                       const std::map<std::string, Tensor>& bindings,
                                       double h_outer = 1e-4, double h_inner = 1e-5) {
  std::map<std::string, Tensor> b = bindings;
  Tensor& t = b.at(wrt);
  Tensor grad(t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) {
    double orig = t[i];
    t[i] = orig + h_outer;
    double np = fd_gradient_norm(g, input, b, h_inner);
    t[i] = orig - h_outer;
    double nm = fd_gradient_norm(g, input, b, h_inner);
    t[i] = orig;
    grad[i] = (np - nm) / (2.0 * h_outer);
  }
  return grad;
}

// Same, restricted to selected flat indices of `wrt` to bound the cost of the
// nested differencing.
inline std::vector<double> fd_grad_of_gradient_norm_at(ad::Graph& g, const std::string& input,
                                                       const std::string& wrt,
                                                       const std::map<std::string, Tensor>& bindings,
                                                       const std::vector<std::size_t>& indices,
                                                       double h_outer = 1e-4,
                                                       double h_inner = 1e-5) {
  std::map<std::string, Tensor> b = bindings;
  Tensor& t = b.at(wrt);
  std::vector<double> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    double orig = t[i];
    t[i] = orig + h_outer;
    double np = fd_gradient_norm(g, input, b, h_inner);
    t[i] = orig - h_outer;
    double nm = fd_gradient_norm(g, input, b, h_inner);
    t[i] = orig;
    out.push_back((np - nm) / (2.0 * h_outer));
  }
  return out;
}

// log|det A| by dense LU with partial pivoting. Throws on (near-)singularity.
inline double lu_log_abs_det(std::vector<double> a, std::size_t n) {
  double log_det = 0.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::fabs(a[r * n + col]) > std::fabs(a[pivot * n + col])) pivot = r;
    }
    if (std::fabs(a[pivot * n + col]) < 1e-300) throw std::runtime_error("singular matrix");
    if (pivot != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a[col * n + c], a[pivot * n + c]);
    }
    log_det += std::log(std::fabs(a[col * n + col]));
    for (std::size_t r = col + 1; r < n; ++r) {
      double f = a[r * n + col] / a[col * n + col];
      for (std::size_t c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
    }
  }
  return log_det;
}

// Dense Jacobian of f: R^D -> R^D by central differences, then log|det|.
inline double fd_jacobian_log_abs_det(const std::function<Tensor(const Tensor&)>& f,
                                      const Tensor& x, double h = 1e-5) {
  const std::size_t d = x.numel();
  std::vector<double> jac(d * d);
  Tensor xp = x;
  for (std::size_t j = 0; j < d; ++j) {
    double orig = xp[j];
    xp[j] = orig + h;
    Tensor fp = f(xp);
    xp[j] = orig - h;
    Tensor fm = f(xp);
    xp[j] = orig;
    if (fp.numel() != d) throw std::runtime_error("jacobian oracle: f changed dimension");
    for (std::size_t i = 0; i < d; ++i) jac[i * d + j] = (fp[i] - fm[i]) / (2.0 * h);
  }
  return lu_log_abs_det(std::move(jac), d);
}

inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += a.at(i, kk) * b.at(kk, j);
      out.at(i, j) = acc;
    }
  }
  return out;
}

// Two-pass mean and population standard deviation.
inline std::pair<double, double> two_pass_mean_std(const std::vector<double>& xs) {
  if (xs.size() < 2) throw std::invalid_argument("need at least two samples");
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size());
  return {mean, std::sqrt(var)};
}

// AUROC by explicit pair counting, ties worth 1/2. Positive class scores
// are expected to be larger.
inline double pair_count_auroc(const std::vector<double>& negatives,
                               const std::vector<double>& positives) {
  if (negatives.empty() || positives.empty()) throw std::invalid_argument("empty class");
  double wins = 0.0;
  for (double p : positives) {
    for (double n : negatives) {
      if (p > n) wins += 1.0;
      else if (p == n) wins += 0.5;
    }
  }
  return wins / (static_cast<double>(negatives.size()) * static_cast<double>(positives.size()));
}

// Random composite graph over the public primitive set. The recipe is driven
// by a seeded RNG; `leaves` receives the leaf names to differentiate against.
struct RandomGraphSpec {
  ad::Graph graph;
  std::vector<std::string> leaf_names;
  std::map<std::string, Tensor> bindings;
};

inline RandomGraphSpec make_random_graph(std::uint64_t seed) {
  RandomGraphSpec spec;
  ad::Graph& g = spec.graph;
  Rng rng(seed);

  const Shape base{2, 3, 4, 4};
  auto bind_leaf = [&](const std::string& name, const Shape& shape, double lo, double hi) {
    ad::NodeId id = g.leaf(name, shape);
    Tensor t(shape);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    spec.bindings.emplace(name, std::move(t));
    spec.leaf_names.push_back(name);
    return id;
  };

  std::vector<ad::NodeId> pool;
  pool.push_back(bind_leaf("x", base, -0.8, 0.8));
  pool.push_back(bind_leaf("y", base, -0.8, 0.8));
  ad::NodeId kernel = bind_leaf("w", {3, 3, 3, 3}, -0.4, 0.4);

  auto pick = [&](const std::vector<ad::NodeId>& from) {
    return from[rng.next_u64() % from.size()];
  };
  auto pick_base = [&]() {
    std::vector<ad::NodeId> candidates;
    for (ad::NodeId id : pool) {
      if (g.node(id).shape == base) candidates.push_back(id);
    }
    return pick(candidates);
  };

  // One pass through every public primitive, then a few extra random rounds.
  std::vector<std::string> ops = {"add",  "sub",       "mul",   "div",   "neg",  "exp",
                                  "log",  "tanh",      "sigmoid", "softplus", "affine",
                                  "sum",  "mean",      "broadcast", "reshape", "concat",
                                  "slice", "matmul",   "transpose", "conv2d"};
  for (int round = 0; round < 2; ++round) {
    for (const std::string& op : ops) {
      // tanh on inputs of the growth-prone ops keeps values bounded across
      // rounds, so finite differences stay well conditioned.
      ad::NodeId a = pick_base();
      if (op == "add") pool.push_back(g.add(a, pick_base()));
      else if (op == "sub") pool.push_back(g.sub(a, pick_base()));
      else if (op == "mul") pool.push_back(g.mul(g.tanh(a), g.tanh(pick_base())));
      else if (op == "div") pool.push_back(g.div(g.tanh(a), g.exp(g.tanh(pick_base()))));
      else if (op == "neg") pool.push_back(g.neg(a));
      else if (op == "exp") pool.push_back(g.exp(g.tanh(a)));
      else if (op == "log") pool.push_back(g.log(g.affine(g.softplus(a), 1.0, 0.1)));
      else if (op == "tanh") pool.push_back(g.tanh(a));
      else if (op == "sigmoid") pool.push_back(g.sigmoid(a));
      else if (op == "softplus") pool.push_back(g.softplus(a));
      else if (op == "affine") pool.push_back(g.affine(a, rng.uniform(-2.0, 2.0), rng.uniform(-1.0, 1.0)));
      else if (op == "sum") pool.push_back(g.broadcast(g.sum_reduce(a, {0, 2}), base));
      else if (op == "mean") pool.push_back(g.broadcast(g.mean_reduce(a, {1, 3}), base));
      else if (op == "broadcast") pool.push_back(g.broadcast(g.mean_reduce(a, {0, 1, 2, 3}), base));
      else if (op == "reshape") pool.push_back(g.reshape(g.reshape(a, {6, 16}), base));
      else if (op == "concat") {
        ad::NodeId lo = g.slice(a, 1, 0, 1);
        ad::NodeId hi = g.slice(a, 1, 1, 2);
        pool.push_back(g.concat({hi, lo}, 1));
      } else if (op == "slice") {
        ad::NodeId s = g.slice(a, 2, 1, 2);
        pool.push_back(g.concat({s, s}, 2));
      } else if (op == "matmul") {
        ad::NodeId m1 = g.reshape(g.tanh(a), {6, 16});
        ad::NodeId m2 = g.transpose2d(g.reshape(g.tanh(pick_base()), {6, 16}));
        pool.push_back(g.matmul(m2, m1));
      } else if (op == "transpose") {
        ad::NodeId m = g.transpose2d(g.reshape(a, {6, 16}));
        pool.push_back(g.reshape(g.transpose2d(m), base));
      } else if (op == "conv2d") {
        pool.push_back(g.tanh(g.conv2d(g.tanh(a), kernel)));
      }
    }
  }

  // Fold the whole pool into one scalar so every op is on the gradient path.
  ad::NodeId total = 0;
  bool first = true;
  for (ad::NodeId id : pool) {
    const Shape& s = g.node(id).shape;
    std::vector<std::size_t> axes(s.size());
    for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
    ad::NodeId scalar = g.reshape(g.mean_reduce(id, axes), {1});
    total = first ? scalar : g.add(total, scalar);
    first = false;
  }
  g.set_output(total);
  return spec;
}

}  // namespace covflow::testutil
