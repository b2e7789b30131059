#include "covflow/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace covflow::flow {

Tensor& ParamStore::add(std::string name, Tensor init) {
  if (values_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  names_.push_back(name);
  auto [it, ok] = values_.emplace(std::move(name), std::move(init));
  (void)ok;
  return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

bool ParamStore::has(const std::string& name) const { return values_.count(name) != 0; }

std::size_t ParamStore::total_parameters() const {
  std::size_t n = 0;
  for (const auto& name : names_) n += values_.at(name).numel();
  return n;
}

Tensor checkerboard_mask(std::size_t h, std::size_t w, int parity) {
  Tensor m({1, 1, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      m.at(0, 0, y, x) = ((y + x + static_cast<std::size_t>(parity & 1)) % 2 == 0) ? 1.0 : 0.0;
    }
  }
  return m;
}

namespace {

ad::NodeId bias_add(ad::Graph& g, ad::NodeId conv_out, ad::NodeId bias) {
  const Shape& s = g.node(conv_out).shape;
  std::size_t f = g.node(bias).shape[0];
  return g.add(conv_out, g.broadcast(g.reshape(bias, {1, f, 1, 1}), s));
}

ad::NodeId broadcast_mask(ad::Graph& g, const Tensor& mask, const Shape& to) {
  return g.broadcast(g.constant(mask), to);
}

Tensor complement(const Tensor& mask) {
  Tensor out(mask.shape());
  for (std::size_t i = 0; i < mask.numel(); ++i) out[i] = 1.0 - mask[i];
  return out;
}

ad::NodeId per_channel(ad::Graph& g, ad::NodeId vec, const Shape& to) {
  std::size_t c = g.node(vec).shape[0];
  return g.broadcast(g.reshape(vec, {1, c, 1, 1}), to);
}

}  // namespace

CouplingStOut build_coupling_st(ad::Graph& g, ad::NodeId x, std::optional<ad::NodeId> cond,
                                const Tensor& mask, const ConditionerParams& p) {
  const Shape shape = g.node(x).shape;
  if (shape.size() != 4) throw ad::GraphError("coupling expects [B,C,H,W]");
  ad::NodeId m = broadcast_mask(g, mask, shape);
  ad::NodeId xm = g.mul(x, m);
  ad::NodeId in = cond ? g.concat({xm, *cond}, 1) : xm;

  ad::NodeId h = g.tanh(bias_add(g, g.conv2d(in, p.stem_w), p.stem_b));
  const std::size_t hidden = g.node(p.stem_w).shape[0];
  for (const auto& [bw, bb] : p.blocks) {
    ad::NodeId u = bias_add(g, g.conv2d(h, bw), bb);
    ad::NodeId a = g.slice(u, 1, 0, hidden);
    ad::NodeId gate = g.slice(u, 1, hidden, hidden);
    h = g.add(h, g.mul(g.tanh(a), g.sigmoid(gate)));
  }
  ad::NodeId head = bias_add(g, g.conv2d(h, p.head_w), p.head_b);
  const std::size_t c = shape[1];
  ad::NodeId s_raw = g.slice(head, 1, 0, c);
  ad::NodeId t = g.slice(head, 1, c, c);

  ad::NodeId scale = g.broadcast(g.reshape(p.s_scale, {1, 1, 1, 1}), shape);
  ad::NodeId s = g.mul(scale, g.tanh(s_raw));
  ad::NodeId one_minus_m = broadcast_mask(g, complement(mask), shape);
  CouplingStOut out;
  out.s_eff = g.mul(one_minus_m, s);
  out.t_masked = g.mul(one_minus_m, t);
  return out;
}

FlowStepOut build_coupling(ad::Graph& g, ad::NodeId x, std::optional<ad::NodeId> cond,
                           const Tensor& mask, const ConditionerParams& p) {
  CouplingStOut st = build_coupling_st(g, x, cond, mask, p);
  FlowStepOut out;
  out.z = g.add(g.mul(x, g.exp(st.s_eff)), st.t_masked);
  out.logdet = g.sum_reduce(st.s_eff, {1, 2, 3});
  return out;
}

FlowStepOut build_sdl(ad::Graph& g, ad::NodeId x, ad::NodeId cond, ad::NodeId beta1,
                      ad::NodeId beta2) {
  const Shape shape = g.node(x).shape;
  if (shape.size() != 4) throw ad::GraphError("sdl expects [B,C,H,W]");
  ad::NodeId b1 = per_channel(g, g.softplus(beta1), shape);
  ad::NodeId b2 = per_channel(g, g.softplus(beta2), shape);
  ad::NodeId s2 = g.add(g.mul(b1, cond), b2);
  ad::NodeId s = g.sqrt_of(s2);
  FlowStepOut out;
  out.z = g.mul(x, s);
  out.logdet = g.affine(g.sum_reduce(g.log(s2), {1, 2, 3}), 0.5, 0.0);
  return out;
}

namespace {

// Row-major enumeration of strict-triangle coordinates.
std::vector<std::pair<std::size_t, std::size_t>> strict_lower_coords(std::size_t c) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t r = 1; r < c; ++r)
    for (std::size_t col = 0; col < r; ++col) out.emplace_back(r, col);
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> strict_upper_coords(std::size_t c) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t r = 0; r < c; ++r)
    for (std::size_t col = r + 1; col < c; ++col) out.emplace_back(r, col);
  return out;
}

Tensor basis_matrix(std::size_t c, std::size_t r, std::size_t col) {
  Tensor e({c, c});
  e.at(r, col) = 1.0;
  return e;
}

// Sum of packed entries scattered into their triangle positions.
ad::NodeId scatter_packed(ad::Graph& g, ad::NodeId packed, std::size_t c,
                          const std::vector<std::pair<std::size_t, std::size_t>>& coords,
                          ad::NodeId base) {
  ad::NodeId acc = base;
  for (std::size_t k = 0; k < coords.size(); ++k) {
    ad::NodeId entry = g.broadcast(g.reshape(g.slice(packed, 0, k, 1), {1, 1}), {c, c});
    acc = g.add(acc, g.mul(entry, g.constant(basis_matrix(c, coords[k].first, coords[k].second))));
  }
  return acc;
}

ad::NodeId diag_from_vector(ad::Graph& g, ad::NodeId v, std::size_t c, ad::NodeId base) {
  ad::NodeId acc = base;
  for (std::size_t i = 0; i < c; ++i) {
    ad::NodeId entry = g.broadcast(g.reshape(g.slice(v, 0, i, 1), {1, 1}), {c, c});
    acc = g.add(acc, g.mul(entry, g.constant(basis_matrix(c, i, i))));
  }
  return acc;
}

Tensor identity_matrix(std::size_t c) {
  Tensor e({c, c});
  for (std::size_t i = 0; i < c; ++i) e.at(i, i) = 1.0;
  return e;
}

}  // namespace

FlowStepOut build_conv1x1(ad::Graph& g, ad::NodeId x, const Conv1x1Params& p) {
  const Shape shape = g.node(x).shape;
  if (shape.size() != 4) throw ad::GraphError("conv1x1 expects [B,C,H,W]");
  const std::size_t c = shape[1];
  const std::size_t hw = shape[2] * shape[3];

  ad::NodeId diag = g.mul(g.constant(p.sign), g.exp(p.log_diag));
  ad::NodeId w;
  if (c == 1) {
    w = g.reshape(diag, {1, 1});
  } else {
    ad::NodeId l = scatter_packed(g, p.l_packed, c, strict_lower_coords(c),
                                  g.constant(identity_matrix(c)));
    ad::NodeId u = scatter_packed(g, p.u_packed, c, strict_upper_coords(c),
                                  diag_from_vector(g, diag, c, g.zero_constant({c, c})));
    w = g.matmul(g.constant(p.perm), g.matmul(l, u));
  }
  ad::NodeId kernel = g.reshape(w, {c, c, 1, 1});

  FlowStepOut out;
  out.z = g.conv2d(x, kernel);
  ad::NodeId ld = g.affine(g.sum_reduce(p.log_diag, {0}), static_cast<double>(hw), 0.0);
  out.logdet = g.broadcast(g.reshape(ld, {1, 1, 1, 1}), {shape[0], 1, 1, 1});
  return out;
}

Conv1x1Init conv1x1_init_rotation(std::size_t c, Rng& rng) {
  if (c == 0) throw std::invalid_argument("channel count must be positive");
  // Orthonormalize a Gaussian matrix (modified Gram-Schmidt).
  std::vector<double> q(c * c);
  for (double& v : q) v = rng.gaussian();
  for (std::size_t col = 0; col < c; ++col) {
    for (std::size_t prev = 0; prev < col; ++prev) {
      double dot = 0.0;
      for (std::size_t r = 0; r < c; ++r) dot += q[r * c + col] * q[r * c + prev];
      for (std::size_t r = 0; r < c; ++r) q[r * c + col] -= dot * q[r * c + prev];
    }
    double norm = 0.0;
    for (std::size_t r = 0; r < c; ++r) norm += q[r * c + col] * q[r * c + col];
    norm = std::sqrt(norm);
    if (norm < 1e-8) throw std::runtime_error("degenerate rotation draw");
    for (std::size_t r = 0; r < c; ++r) q[r * c + col] /= norm;
  }
  return conv1x1_from_matrix(Tensor({c, c}, std::move(q)));
}

Conv1x1Init conv1x1_from_matrix(const Tensor& w) {
  if (w.rank() != 2 || w.dim(0) != w.dim(1)) {
    throw std::invalid_argument("mixing matrix must be square, got " + shape_str(w.shape()));
  }
  const std::size_t c = w.dim(0);
  // LU with partial pivoting: P*W = L*U, so W = P^T * L * U.
  std::vector<double> a(w.data(), w.data() + c * c);
  std::vector<std::size_t> perm_rows(c);
  for (std::size_t i = 0; i < c; ++i) perm_rows[i] = i;
  for (std::size_t col = 0; col < c; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < c; ++r) {
      if (std::fabs(a[r * c + col]) > std::fabs(a[pivot * c + col])) pivot = r;
    }
    if (pivot != col) {
      for (std::size_t k = 0; k < c; ++k) std::swap(a[col * c + k], a[pivot * c + k]);
      std::swap(perm_rows[col], perm_rows[pivot]);
    }
    double d = a[col * c + col];
    if (std::fabs(d) < 1e-300) throw std::invalid_argument("mixing matrix is singular");
    for (std::size_t r = col + 1; r < c; ++r) {
      double f = a[r * c + col] / d;
      a[r * c + col] = f;
      for (std::size_t k = col + 1; k < c; ++k) a[r * c + k] -= f * a[col * c + k];
    }
  }
  double log_abs_det = 0.0;
  for (std::size_t i = 0; i < c; ++i) log_abs_det += std::log(std::fabs(a[i * c + i]));
  if (log_abs_det < std::log(1e-12)) {
    throw std::invalid_argument("mixing matrix is numerically singular (|det| < 1e-12)");
  }

  Conv1x1Init init;
  auto lower = strict_lower_coords(c);
  auto upper = strict_upper_coords(c);
  init.l_packed = Tensor({std::max<std::size_t>(lower.size(), 1)});
  init.u_packed = Tensor({std::max<std::size_t>(upper.size(), 1)});
  for (std::size_t k = 0; k < lower.size(); ++k) {
    init.l_packed[k] = a[lower[k].first * c + lower[k].second];
  }
  for (std::size_t k = 0; k < upper.size(); ++k) {
    init.u_packed[k] = a[upper[k].first * c + upper[k].second];
  }
  init.log_diag = Tensor({c});
  init.sign = Tensor({c});
  for (std::size_t i = 0; i < c; ++i) {
    double d = a[i * c + i];
    init.log_diag[i] = std::log(std::fabs(d));
    init.sign[i] = d < 0.0 ? -1.0 : 1.0;
  }
  // perm = P^T: column perm_rows[i] gets a 1 in row... P moves row perm_rows[i]
  // to position i, so (P^T)[perm_rows[i], i] = 1.
  init.perm = Tensor({c, c});
  for (std::size_t i = 0; i < c; ++i) init.perm.at(perm_rows[i], i) = 1.0;
  return init;
}

std::vector<double> conv1x1_materialize(const Tensor& l_packed, const Tensor& u_packed,
                                        const Tensor& log_diag, const Tensor& perm,
                                        const Tensor& sign) {
  const std::size_t c = log_diag.dim(0);
  std::vector<double> l(c * c, 0.0), u(c * c, 0.0);
  for (std::size_t i = 0; i < c; ++i) l[i * c + i] = 1.0;
  auto lower = strict_lower_coords(c);
  auto upper = strict_upper_coords(c);
  for (std::size_t k = 0; k < lower.size(); ++k) {
    l[lower[k].first * c + lower[k].second] = l_packed[k];
  }
  for (std::size_t k = 0; k < upper.size(); ++k) {
    u[upper[k].first * c + upper[k].second] = u_packed[k];
  }
  for (std::size_t i = 0; i < c; ++i) u[i * c + i] = sign[i] * std::exp(log_diag[i]);
  // W = perm * L * U.
  std::vector<double> lu(c * c, 0.0), w(c * c, 0.0);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t j = 0; j < c; ++j) lu[i * c + j] += l[i * c + k] * u[k * c + j];
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t j = 0; j < c; ++j) w[i * c + j] += perm.at(i, k) * lu[k * c + j];
  return w;
}

Tensor coupling_inverse(const Tensor& z, const Tensor& s_eff, const Tensor& t_masked) {
  if (!z.same_shape(s_eff) || !z.same_shape(t_masked)) {
    throw std::invalid_argument("coupling_inverse shape mismatch");
  }
  Tensor x(z.shape());
  for (std::size_t i = 0; i < z.numel(); ++i) {
    x[i] = (z[i] - t_masked[i]) * std::exp(-s_eff[i]);
  }
  return x;
}

Tensor sdl_inverse(const Tensor& z, const Tensor& cond, const Tensor& beta1, const Tensor& beta2) {
  if (!z.same_shape(cond)) throw std::invalid_argument("sdl_inverse shape mismatch");
  const std::size_t c = z.dim(1);
  Tensor x(z.shape());
  const std::size_t chw = z.numel() / z.dim(0);
  const std::size_t hw = chw / c;
  for (std::size_t i = 0; i < z.numel(); ++i) {
    std::size_t ch = (i % chw) / hw;
    double s2 = softplus_value(beta1[ch]) * cond[i] + softplus_value(beta2[ch]);
    x[i] = z[i] / std::sqrt(s2);
  }
  return x;
}

Tensor conv1x1_inverse(const Tensor& z, const std::vector<double>& w_dense) {
  const std::size_t c = z.dim(1);
  if (w_dense.size() != c * c) throw std::invalid_argument("conv1x1_inverse matrix size mismatch");
  // Factor once, solve per pixel.
  std::vector<double> a = w_dense;
  std::vector<std::size_t> piv(c);
  for (std::size_t i = 0; i < c; ++i) piv[i] = i;
  for (std::size_t col = 0; col < c; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < c; ++r) {
      if (std::fabs(a[r * c + col]) > std::fabs(a[pivot * c + col])) pivot = r;
    }
    if (std::fabs(a[pivot * c + col]) < 1e-300) {
      throw std::invalid_argument("conv1x1_inverse: singular matrix");
    }
    if (pivot != col) {
      for (std::size_t k = 0; k < c; ++k) std::swap(a[col * c + k], a[pivot * c + k]);
      std::swap(piv[col], piv[pivot]);
    }
    for (std::size_t r = col + 1; r < c; ++r) {
      double f = a[r * c + col] / a[col * c + col];
      a[r * c + col] = f;
      for (std::size_t k = col + 1; k < c; ++k) a[r * c + k] -= f * a[col * c + k];
    }
  }
  const std::size_t b = z.dim(0), h = z.dim(2), w = z.dim(3);
  Tensor x(z.shape());
  std::vector<double> rhs(c), sol(c);
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        for (std::size_t ch = 0; ch < c; ++ch) rhs[ch] = z.at(n, piv[ch], y, xx);
        // Forward substitution (unit lower).
        for (std::size_t i = 0; i < c; ++i) {
          sol[i] = rhs[i];
          for (std::size_t k = 0; k < i; ++k) sol[i] -= a[i * c + k] * sol[k];
        }
        // Back substitution.
        for (std::size_t i = c; i-- > 0;) {
          for (std::size_t k = i + 1; k < c; ++k) sol[i] -= a[i * c + k] * sol[k];
          sol[i] /= a[i * c + i];
        }
        for (std::size_t ch = 0; ch < c; ++ch) x.at(n, ch, y, xx) = sol[ch];
      }
    }
  }
  return x;
}

double softplus_value(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw std::invalid_argument("softplus_inverse needs a positive target");
  // x = log(e^y - 1), stable for both tails.
  return y > 20.0 ? y : std::log(std::expm1(y));
}

}  // namespace covflow::flow
