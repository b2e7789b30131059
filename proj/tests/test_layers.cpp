#include <cmath>

#include "covflow/layers.hpp"
#include "doctest.h"
#include "test_utils.hpp"

using namespace covflow;
using namespace covflow::testutil;

namespace {

std::vector<Tensor> run_targets(ad::Graph& g, const std::vector<ad::NodeId>& targets,
                                const std::map<std::string, Tensor>& bindings) {
  ad::Plan plan = ad::make_plan(g, targets, true);
  ad::Workspace ws;
  ad::PtrBindings pb;
  for (const auto& [name, tensor] : bindings) pb.set(g.find_leaf(name), &tensor);
  return ad::execute(g, plan, pb, ws);
}

// Random conditioner with leaves bound to fresh values; zero_head makes the
// coupling an exact identity.
flow::ConditionerParams make_conditioner(ad::Graph& g, std::map<std::string, Tensor>& bindings,
                                         const std::string& prefix, std::size_t c_in,
                                         std::size_t c, std::size_t hidden, std::size_t blocks,
                                         Rng& rng, bool zero_head) {
  auto bind = [&](const std::string& name, const Shape& shape, double scale) {
    ad::NodeId id = g.leaf(prefix + name, shape);
    Tensor t(shape);
    if (scale != 0.0) {
      for (std::size_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.gaussian();
    }
    bindings.emplace(prefix + name, std::move(t));
    return id;
  };
  flow::ConditionerParams p;
  p.stem_w = bind("stem_w", {hidden, c_in, 3, 3}, 0.2);
  p.stem_b = bind("stem_b", {hidden}, 0.1);
  for (std::size_t i = 0; i < blocks; ++i) {
    p.blocks.emplace_back(bind("blk" + std::to_string(i) + "_w", {2 * hidden, hidden, 3, 3}, 0.2),
                          bind("blk" + std::to_string(i) + "_b", {2 * hidden}, 0.1));
  }
  p.head_w = bind("head_w", {2 * c, hidden, 3, 3}, zero_head ? 0.0 : 0.2);
  p.head_b = bind("head_b", {2 * c}, zero_head ? 0.0 : 0.1);
  ad::NodeId sc = g.leaf(prefix + "s_scale", {1});
  bindings.emplace(prefix + "s_scale", Tensor::scalar(1.0));
  p.s_scale = sc;
  return p;
}

Tensor random_tensor(const Shape& shape, Rng& rng, double lo, double hi) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_SUITE("layers") {

TEST_CASE("checkerboard masks alternate and complement each other") {
  Tensor m0 = flow::checkerboard_mask(4, 4, 0);
  Tensor m1 = flow::checkerboard_mask(4, 4, 1);
  double sum0 = 0.0;
  for (std::size_t y = 0; y < 4; ++y) {
    for (std::size_t x = 0; x < 4; ++x) {
      CHECK(m0.at(0, 0, y, x) + m1.at(0, 0, y, x) == 1.0);
      if (x + 1 < 4) CHECK(m0.at(0, 0, y, x) != m0.at(0, 0, y, x + 1));
      sum0 += m0.at(0, 0, y, x);
    }
  }
  CHECK(sum0 == 8.0);
  CHECK(m0.at(0, 0, 0, 0) == 1.0);
}

TEST_CASE("signal-dependent layer reduces to identity at the neutral init") {
  ad::Graph g;
  ad::NodeId x = g.leaf("x", {2, 3, 4, 4});
  ad::NodeId xl = g.leaf("xl", {2, 3, 4, 4});
  ad::NodeId b1 = g.leaf("b1", {3});
  ad::NodeId b2 = g.leaf("b2", {3});
  auto out = flow::build_sdl(g, x, xl, b1, b2);

  Rng rng(1);
  std::map<std::string, Tensor> b{
      {"x", random_tensor({2, 3, 4, 4}, rng, -0.5, 0.5)},
      {"xl", random_tensor({2, 3, 4, 4}, rng, 0.0, 1.0)},
      {"b1", Tensor({3}, -40.0)},
      {"b2", Tensor({3}, flow::softplus_inverse(1.0))},
  };
  auto vals = run_targets(g, {out.z, out.logdet}, b);
  CHECK(max_abs_diff(vals[0], b.at("x")) < 1e-12);
  for (std::size_t i = 0; i < vals[1].numel(); ++i) CHECK(std::fabs(vals[1][i]) < 1e-9);
}

TEST_CASE("signal-dependent layer with constant scale 2 has logdet D log 2") {
  ad::Graph g;
  ad::NodeId x = g.leaf("x", {1, 2, 3, 3});
  ad::NodeId xl = g.leaf("xl", {1, 2, 3, 3});
  ad::NodeId b1 = g.leaf("b1", {2});
  ad::NodeId b2 = g.leaf("b2", {2});
  auto out = flow::build_sdl(g, x, xl, b1, b2);
  Rng rng(2);
  std::map<std::string, Tensor> b{
      {"x", random_tensor({1, 2, 3, 3}, rng, -1.0, 1.0)},
      {"xl", random_tensor({1, 2, 3, 3}, rng, 0.0, 1.0)},
      {"b1", Tensor({2}, -40.0)},
      {"b2", Tensor({2}, flow::softplus_inverse(4.0))},
  };
  auto vals = run_targets(g, {out.z, out.logdet}, b);
  const double want = 18.0 * std::log(2.0);
  CHECK(vals[1][0] == doctest::Approx(want).epsilon(1e-9));
  for (std::size_t i = 0; i < vals[0].numel(); ++i) {
    CHECK(vals[0][i] == doctest::Approx(2.0 * b.at("x")[i]));
  }
}

TEST_CASE("signal-dependent layer logdet matches the dense Jacobian oracle") {
  ad::Graph g;
  ad::NodeId x = g.leaf("x", {1, 1, 4, 4});
  ad::NodeId xl = g.leaf("xl", {1, 1, 4, 4});
  ad::NodeId b1 = g.leaf("b1", {1});
  ad::NodeId b2 = g.leaf("b2", {1});
  auto out = flow::build_sdl(g, x, xl, b1, b2);
  Rng rng(3);
  std::map<std::string, Tensor> b{
      {"x", random_tensor({1, 1, 4, 4}, rng, -1.0, 1.0)},
      {"xl", random_tensor({1, 1, 4, 4}, rng, 0.1, 1.0)},
      {"b1", Tensor({1}, 0.3)},
      {"b2", Tensor({1}, 0.2)},
  };
  double logdet = run_targets(g, {out.logdet}, b)[0][0];

  auto f = [&](const Tensor& xin) {
    auto bb = b;
    bb.at("x") = xin.reshaped({1, 1, 4, 4});
    return run_targets(g, {out.z}, bb)[0];
  };
  double fd = fd_jacobian_log_abs_det(f, b.at("x"));
  CHECK(close_rel(logdet, fd, 1e-3));

  Tensor xb = flow::sdl_inverse(run_targets(g, {out.z}, b)[0], b.at("xl"),
                                b.at("b1"), b.at("b2"));
  CHECK(max_abs_diff(xb, b.at("x")) < 1e-9);
}

TEST_CASE("coupling with a zero head is the identity") {
  ad::Graph g;
  ad::NodeId x = g.leaf("x", {2, 3, 4, 4});
  std::map<std::string, Tensor> b;
  Rng rng(4);
  auto p = make_conditioner(g, b, "c_", 3, 3, 6, 2, rng, true);
  auto out = flow::build_coupling(g, x, std::nullopt, flow::checkerboard_mask(4, 4, 0), p);
  b.emplace("x", random_tensor({2, 3, 4, 4}, rng, -1.0, 1.0));
  auto vals = run_targets(g, {out.z, out.logdet}, b);
  CHECK(max_abs_diff(vals[0], b.at("x")) == 0.0);
  CHECK(vals[1][0] == 0.0);
  CHECK(vals[1][1] == 0.0);
}

TEST_CASE("coupling keeps passive positions bit-identical and inverts exactly") {
  ad::Graph g;
  ad::NodeId x = g.leaf("x", {1, 2, 4, 4});
  std::map<std::string, Tensor> b;
  Rng rng(5);
  auto p = make_conditioner(g, b, "c_", 2, 2, 5, 2, rng, false);
  Tensor mask = flow::checkerboard_mask(4, 4, 1);
  auto st = flow::build_coupling_st(g, x, std::nullopt, mask, p);
  auto out = flow::build_coupling(g, x, std::nullopt, mask, p);
  b.emplace("x", random_tensor({1, 2, 4, 4}, rng, -1.0, 1.0));

  auto vals = run_targets(g, {out.z, st.s_eff, st.t_masked, out.logdet}, b);
  const Tensor& z = vals[0];
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t y = 0; y < 4; ++y) {
      for (std::size_t xx = 0; xx < 4; ++xx) {
        if (mask.at(0, 0, y, xx) == 1.0) {
          CHECK(z.at(0, c, y, xx) == b.at("x").at(0, c, y, xx));
        }
      }
    }
  }

  // Inverse: the conditioner sees only passive positions, which z preserves,
  // so s and t recomputed from z match and the affine map undoes exactly.
  auto bb = b;
  bb.at("x") = z;
  auto st_vals = run_targets(g, {st.s_eff, st.t_masked}, bb);
  CHECK(max_abs_diff(st_vals[0], vals[1]) == 0.0);
  Tensor back = flow::coupling_inverse(z, st_vals[0], st_vals[1]);
  CHECK(max_abs_diff(back, b.at("x")) < 1e-9);

  auto f = [&](const Tensor& xin) {
    auto bf = b;
    bf.at("x") = xin.reshaped({1, 2, 4, 4});
    return run_targets(g, {out.z}, bf)[0];
  };
  CHECK(close_rel(vals[3][0], fd_jacobian_log_abs_det(f, b.at("x")), 1e-3));
}

TEST_CASE("conditioning image reaches only a bounded receptive field") {
  const std::size_t hw = 12, blocks = 2;
  ad::Graph g;
  ad::NodeId x = g.leaf("x", {1, 1, hw, hw});
  ad::NodeId cond = g.leaf("cond", {1, 1, hw, hw});
  std::map<std::string, Tensor> b;
  Rng rng(6);
  auto p = make_conditioner(g, b, "c_", 2, 1, 4, blocks, rng, false);
  auto st = flow::build_coupling_st(g, x, cond, flow::checkerboard_mask(hw, hw, 0), p);
  b.emplace("x", random_tensor({1, 1, hw, hw}, rng, -1.0, 1.0));
  b.emplace("cond", random_tensor({1, 1, hw, hw}, rng, 0.0, 1.0));

  auto base_vals = run_targets(g, {st.s_eff, st.t_masked}, b);
  auto bb = b;
  bb.at("cond").at(0, 0, 6, 6) += 0.25;
  auto pert_vals = run_targets(g, {st.s_eff, st.t_masked}, bb);

  // One 3x3 stem conv, `blocks` 3x3 convs, one 3x3 head: radius blocks + 2.
  const std::ptrdiff_t radius = static_cast<std::ptrdiff_t>(blocks) + 2;
  bool some_change = false;
  for (std::size_t y = 0; y < hw; ++y) {
    for (std::size_t xx = 0; xx < hw; ++xx) {
      double d = std::fabs(pert_vals[0].at(0, 0, y, xx) - base_vals[0].at(0, 0, y, xx)) +
                 std::fabs(pert_vals[1].at(0, 0, y, xx) - base_vals[1].at(0, 0, y, xx));
      std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(y) - 6;
      std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(xx) - 6;
      if (std::max(std::llabs(dy), std::llabs(dx)) > radius) {
        CHECK(d == 0.0);
      } else if (d > 0.0) {
        some_change = true;
      }
    }
  }
  CHECK(some_change);
}

TEST_CASE("channel mixing with an identity matrix is the identity") {
  auto init = flow::conv1x1_from_matrix(Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}));
  ad::Graph g;
  ad::NodeId x = g.leaf("x", {1, 2, 3, 3});
  flow::Conv1x1Params p;
  p.l_packed = g.leaf("l", init.l_packed.shape());
  p.u_packed = g.leaf("u", init.u_packed.shape());
  p.log_diag = g.leaf("d", init.log_diag.shape());
  p.perm = init.perm;
  p.sign = init.sign;
  auto out = flow::build_conv1x1(g, x, p);
  Rng rng(7);
  std::map<std::string, Tensor> b{{"x", random_tensor({1, 2, 3, 3}, rng, -1.0, 1.0)},
                                  {"l", init.l_packed},
                                  {"u", init.u_packed},
                                  {"d", init.log_diag}};
  auto vals = run_targets(g, {out.z, out.logdet}, b);
  CHECK(max_abs_diff(vals[0], b.at("x")) < 1e-12);
  CHECK(std::fabs(vals[1][0]) < 1e-12);
}

TEST_CASE("channel mixing with diag(2,2) doubles and has logdet H W log 4") {
  auto init = flow::conv1x1_from_matrix(Tensor({2, 2}, {2.0, 0.0, 0.0, 2.0}));
  ad::Graph g;
  ad::NodeId x = g.leaf("x", {1, 2, 2, 2});
  flow::Conv1x1Params p;
  p.l_packed = g.leaf("l", init.l_packed.shape());
  p.u_packed = g.leaf("u", init.u_packed.shape());
  p.log_diag = g.leaf("d", init.log_diag.shape());
  p.perm = init.perm;
  p.sign = init.sign;
  auto out = flow::build_conv1x1(g, x, p);
  Rng rng(8);
  std::map<std::string, Tensor> b{{"x", random_tensor({1, 2, 2, 2}, rng, -1.0, 1.0)},
                                  {"l", init.l_packed},
                                  {"u", init.u_packed},
                                  {"d", init.log_diag}};
  auto vals = run_targets(g, {out.z, out.logdet}, b);
  for (std::size_t i = 0; i < vals[0].numel(); ++i) {
    CHECK(vals[0][i] == doctest::Approx(2.0 * b.at("x")[i]));
  }
  CHECK(vals[1][0] == doctest::Approx(4.0 * std::log(4.0)).epsilon(1e-10));
}

TEST_CASE("random channel mixing: factorization, logdet, inverse, Jacobian") {
  Rng rng(9);
  Tensor w({3, 3});
  for (std::size_t i = 0; i < 9; ++i) w[i] = rng.uniform(-1.0, 1.0);
  w.at(0, 0) += 2.0;  // keep comfortably invertible
  auto init = flow::conv1x1_from_matrix(w);

  auto dense = flow::conv1x1_materialize(init.l_packed, init.u_packed, init.log_diag, init.perm,
                                         init.sign);
  for (std::size_t i = 0; i < 9; ++i) CHECK(std::fabs(dense[i] - w[i]) < 1e-12);

  ad::Graph g;
  ad::NodeId x = g.leaf("x", {2, 3, 2, 2});
  flow::Conv1x1Params p;
  p.l_packed = g.leaf("l", init.l_packed.shape());
  p.u_packed = g.leaf("u", init.u_packed.shape());
  p.log_diag = g.leaf("d", init.log_diag.shape());
  p.perm = init.perm;
  p.sign = init.sign;
  auto out = flow::build_conv1x1(g, x, p);
  std::map<std::string, Tensor> b{{"x", random_tensor({2, 3, 2, 2}, rng, -1.0, 1.0)},
                                  {"l", init.l_packed},
                                  {"u", init.u_packed},
                                  {"d", init.log_diag}};
  auto vals = run_targets(g, {out.z, out.logdet}, b);

  std::vector<double> wcopy(w.data(), w.data() + 9);
  double want_ld = 4.0 * lu_log_abs_det(wcopy, 3);
  CHECK(vals[1][0] == doctest::Approx(want_ld).epsilon(1e-10));
  CHECK(vals[1][0] == doctest::Approx(vals[1][vals[1].numel() - 1]));

  Tensor back = flow::conv1x1_inverse(vals[0], dense);
  CHECK(max_abs_diff(back, b.at("x")) < 1e-9);

  auto f = [&](const Tensor& xin) {
    auto bf = b;
    bf.at("x") = xin.reshaped({2, 3, 2, 2});
    return run_targets(g, {out.z}, bf)[0];
  };
  CHECK(close_rel(2.0 * vals[1][0], fd_jacobian_log_abs_det(f, b.at("x")), 1e-3));
}

TEST_CASE("singular mixing matrices are rejected") {
  CHECK_THROWS(flow::conv1x1_from_matrix(Tensor({2, 2}, {1.0, 2.0, 2.0, 4.0})));
  CHECK_THROWS(flow::conv1x1_from_matrix(Tensor({2, 3}, std::vector<double>(6, 1.0))));
  CHECK_THROWS(flow::conv1x1_from_matrix(Tensor({2, 2}, {1e-7, 0.0, 0.0, 1e-7})));
}

TEST_CASE("rotation init is orthogonal with near-zero logdet") {
  Rng rng(10);
  auto init = flow::conv1x1_init_rotation(3, rng);
  auto w = flow::conv1x1_materialize(init.l_packed, init.u_packed, init.log_diag, init.perm,
                                     init.sign);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (std::size_t r = 0; r < 3; ++r) dot += w[r * 3 + i] * w[r * 3 + j];
      CHECK(std::fabs(dot - (i == j ? 1.0 : 0.0)) < 1e-9);
    }
  }
  double ld = 0.0;
  for (std::size_t i = 0; i < 3; ++i) ld += init.log_diag[i];
  CHECK(std::fabs(ld) < 1e-9);
}

TEST_CASE("logdet of a stack is the sum of the parts and matches the oracle") {
  ad::Graph g;
  ad::NodeId x = g.leaf("x", {1, 2, 4, 4});
  ad::NodeId xl = g.leaf("xl", {1, 2, 4, 4});
  ad::NodeId b1 = g.leaf("b1", {2});
  ad::NodeId b2 = g.leaf("b2", {2});
  std::map<std::string, Tensor> b;
  Rng rng(11);

  auto sdl = flow::build_sdl(g, x, xl, b1, b2);
  auto p = make_conditioner(g, b, "c_", 2, 2, 4, 2, rng, false);
  auto cpl = flow::build_coupling(g, sdl.z, std::nullopt, flow::checkerboard_mask(4, 4, 0), p);
  Tensor wmix({2, 2}, {0.8, -0.4, 0.3, 1.1});
  auto init = flow::conv1x1_from_matrix(wmix);
  flow::Conv1x1Params cp;
  cp.l_packed = g.leaf("l", init.l_packed.shape());
  cp.u_packed = g.leaf("u", init.u_packed.shape());
  cp.log_diag = g.leaf("d", init.log_diag.shape());
  cp.perm = init.perm;
  cp.sign = init.sign;
  auto mix = flow::build_conv1x1(g, cpl.z, cp);
  ad::NodeId total_ld = g.add(g.add(sdl.logdet, cpl.logdet), mix.logdet);

  b.emplace("x", random_tensor({1, 2, 4, 4}, rng, -1.0, 1.0));
  b.emplace("xl", random_tensor({1, 2, 4, 4}, rng, 0.1, 1.0));
  b.emplace("b1", Tensor({2}, 0.4));
  b.emplace("b2", Tensor({2}, 0.1));
  b.emplace("l", init.l_packed);
  b.emplace("u", init.u_packed);
  b.emplace("d", init.log_diag);

  auto vals = run_targets(g, {mix.z, total_ld, sdl.logdet, cpl.logdet, mix.logdet}, b);
  CHECK(vals[1][0] == doctest::Approx(vals[2][0] + vals[3][0] + vals[4][0]).epsilon(1e-12));

  auto f = [&](const Tensor& xin) {
    auto bf = b;
    bf.at("x") = xin.reshaped({1, 2, 4, 4});
    return run_targets(g, {mix.z}, bf)[0];
  };
  CHECK(close_rel(vals[1][0], fd_jacobian_log_abs_det(f, b.at("x")), 1e-3));
}

}  // TEST_SUITE
