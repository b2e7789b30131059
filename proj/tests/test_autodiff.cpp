#include <cmath>

#include "covflow/graph.hpp"
#include "doctest.h"
#include "test_utils.hpp"

using namespace covflow;
using namespace covflow::testutil;

TEST_SUITE("autodiff") {

TEST_CASE("forward evaluation of simple expressions") {
  ad::Graph g;
  g.leaf("x", {1});
  g.set_output(g.square(g.find_leaf("x")));
  CHECK(evaluate_scalar(g, {{"x", Tensor::scalar(3.0)}}) == doctest::Approx(9.0));

  ad::Graph g2;
  ad::NodeId v = g2.leaf("v", {3});
  g2.set_output(g2.reshape(g2.sum_reduce(v, {0}), {1}));
  CHECK(evaluate_scalar(g2, {{"v", Tensor({3}, {1.0, 2.0, 3.0})}}) == doctest::Approx(6.0));
}

TEST_CASE("matmul matches the naive oracle") {
  ad::Graph g;
  ad::NodeId a = g.leaf("a", {3, 4});
  ad::NodeId b = g.leaf("b", {4, 2});
  g.set_output(g.matmul(a, b));
  Rng rng(11);
  Tensor ta({3, 4});
  Tensor tb({4, 2});
  for (std::size_t i = 0; i < ta.numel(); ++i) ta[i] = rng.uniform(-2.0, 2.0);
  for (std::size_t i = 0; i < tb.numel(); ++i) tb[i] = rng.uniform(-2.0, 2.0);
  Tensor got = ad::evaluate(g, {{"a", ta}, {"b", tb}});
  Tensor want = naive_matmul(ta, tb);
  CHECK(max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("conv2d matches an independently written direct convolution") {
  const std::size_t N = 2, Ci = 3, Co = 2, H = 5, W = 4, K = 3;
  ad::Graph g;
  ad::NodeId x = g.leaf("x", {N, Ci, H, W});
  ad::NodeId w = g.leaf("w", {Co, Ci, K, K});
  g.set_output(g.conv2d(x, w));
  Rng rng(7);
  Tensor tx({N, Ci, H, W});
  Tensor tw({Co, Ci, K, K});
  for (std::size_t i = 0; i < tx.numel(); ++i) tx[i] = rng.uniform(-1.0, 1.0);
  for (std::size_t i = 0; i < tw.numel(); ++i) tw[i] = rng.uniform(-1.0, 1.0);
  Tensor got = ad::evaluate(g, {{"x", tx}, {"w", tw}});

  Tensor want({N, Co, H, W});
  const std::ptrdiff_t p = K / 2;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t ww = 0; ww < W; ++ww) {
          double acc = 0.0;
          for (std::size_t i = 0; i < Ci; ++i)
            for (std::size_t a = 0; a < K; ++a)
              for (std::size_t b = 0; b < K; ++b) {
                std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(h) + static_cast<std::ptrdiff_t>(a) - p;
                std::ptrdiff_t sw = static_cast<std::ptrdiff_t>(ww) + static_cast<std::ptrdiff_t>(b) - p;
                if (sh < 0 || sw < 0 || sh >= static_cast<std::ptrdiff_t>(H) ||
                    sw >= static_cast<std::ptrdiff_t>(W))
                  continue;
                acc += tw.at(o, i, a, b) *
                       tx.at(n, i, static_cast<std::size_t>(sh), static_cast<std::size_t>(sw));
              }
          want.at(n, o, h, ww) = acc;
        }
  CHECK(max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("gradient of x^2 and of a sum of squares") {
  ad::Graph g;
  g.leaf("x", {1});
  g.set_output(g.square(g.find_leaf("x")));
  auto grads = ad::gradient(g, {"x"}, {{"x", Tensor::scalar(3.0)}});
  CHECK(grads.at("x")[0] == doctest::Approx(6.0));

  ad::Graph g2;
  ad::NodeId v = g2.leaf("v", {2});
  g2.set_output(g2.reshape(g2.sum_reduce(g2.square(v), {0}), {1}));
  auto grads2 = ad::gradient(g2, {"v"}, {{"v", Tensor({2}, {1.0, -2.0})}});
  CHECK(grads2.at("v")[0] == doctest::Approx(2.0));
  CHECK(grads2.at("v")[1] == doctest::Approx(-4.0));
}

TEST_CASE("gradients agree with finite differences on random composite graphs") {
  for (std::uint64_t seed : {101ull, 202ull, 303ull}) {
    CAPTURE(seed);
    RandomGraphSpec spec = make_random_graph(seed);
    auto grads = ad::gradient(spec.graph, spec.leaf_names, spec.bindings);
    for (const std::string& leaf : spec.leaf_names) {
      CAPTURE(leaf);
      Tensor fd = fd_gradient(spec.graph, leaf, spec.bindings);
      const Tensor& got = grads.at(leaf);
      REQUIRE(got.same_shape(fd));
      for (std::size_t i = 0; i < fd.numel(); ++i) {
        CAPTURE(i);
        CHECK(close_rel(got[i], fd[i], 1e-4));
      }
    }
  }
}

TEST_CASE("gradient is linear in the output") {
  ad::Graph g;
  ad::NodeId x = g.leaf("x", {4});
  ad::NodeId f = g.reshape(g.sum_reduce(g.mul(g.tanh(x), x), {0}), {1});
  ad::NodeId h = g.reshape(g.sum_reduce(g.exp(g.affine(x, 0.5, 0.0)), {0}), {1});
  ad::NodeId combo = g.add(g.affine(f, 2.5, 0.0), g.affine(h, -1.25, 0.0));
  std::map<std::string, Tensor> b{{"x", Tensor({4}, {0.3, -0.7, 1.1, 0.05})}};

  g.set_output(f);
  Tensor gf = ad::gradient(g, {"x"}, b).at("x");
  g.set_output(h);
  Tensor gh = ad::gradient(g, {"x"}, b).at("x");
  g.set_output(combo);
  Tensor gc = ad::gradient(g, {"x"}, b).at("x");
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::fabs(gc[i] - (2.5 * gf[i] - 1.25 * gh[i])) < 1e-10);
  }
}

TEST_CASE("repeated evaluation is bit-identical") {
  RandomGraphSpec spec = make_random_graph(42);
  double a = evaluate_scalar(spec.graph, spec.bindings);
  double b = evaluate_scalar(spec.graph, spec.bindings);
  CHECK(a == b);
  auto g1 = ad::gradient(spec.graph, spec.leaf_names, spec.bindings);
  auto g2 = ad::gradient(spec.graph, spec.leaf_names, spec.bindings);
  for (const std::string& leaf : spec.leaf_names) {
    CHECK(max_abs_diff(g1.at(leaf), g2.at(leaf)) == 0.0);
  }
}

TEST_CASE("gradient of a non-scalar output is rejected") {
  ad::Graph g;
  ad::NodeId x = g.leaf("x", {3});
  g.set_output(g.square(x));
  CHECK_THROWS_AS(ad::gradient(g, {"x"}, {{"x", Tensor({3}, {1, 2, 3})}}), ad::GraphError);
}

TEST_CASE("binding errors name the offending leaf") {
  ad::Graph g;
  ad::NodeId x = g.leaf("velocity", {2, 2});
  g.set_output(g.reshape(g.sum_reduce(x, {0, 1}), {1}));
  try {
    ad::evaluate(g, {{"velocity", Tensor({3}, {1, 2, 3})}});
    FAIL("expected shape mismatch");
  } catch (const ad::GraphError& e) {
    CHECK(std::string(e.what()).find("velocity") != std::string::npos);
  }
  CHECK_THROWS_AS(ad::evaluate(g, {}), ad::GraphError);
}

TEST_CASE("non-finite values are flagged with the producing node") {
  ad::Graph g;
  ad::NodeId x = g.leaf("x", {1});
  g.set_output(g.log(x));
  try {
    ad::evaluate(g, {{"x", Tensor::scalar(-1.0)}});
    FAIL("expected non-finite detection");
  } catch (const ad::EvalError& e) {
    CHECK(std::string(e.what()).find("Log") != std::string::npos);
  }
}

TEST_CASE("shape errors identify the node") {
  ad::Graph g;
  ad::NodeId a = g.leaf("a", {2, 3});
  ad::NodeId b = g.leaf("b", {3, 2});
  CHECK_THROWS_AS(g.add(a, b), ad::GraphError);
  CHECK_THROWS_AS(g.matmul(a, a), ad::GraphError);
  CHECK_THROWS_AS(g.slice(a, 1, 2, 2), ad::GraphError);
  CHECK_THROWS_AS(g.leaf("a", {1}), ad::GraphError);
}

TEST_CASE("gradient norm of a scaled sum of squares matches the closed form") {
  // f = a * sum(x^2): ||df/dx|| = 2|a| ||x||.
  ad::Graph g;
  ad::NodeId x = g.leaf("x", {2});
  ad::NodeId a = g.leaf("a", {1});
  ad::NodeId sum = g.reshape(g.sum_reduce(g.square(x), {0}), {1});
  g.set_output(g.mul(a, sum));
  std::map<std::string, Tensor> b{{"x", Tensor({2}, {3.0, 4.0})}, {"a", Tensor::scalar(1.5)}};

  auto grads = ad::gradient_of_gradient_norm(g, "x", {"a", "x"}, b);
  // gn = 2a||x|| = 15; d gn/da = 2||x|| = 10; d gn/dx_i = 2a x_i/||x||.
  CHECK(grads.at("a")[0] == doctest::Approx(10.0));
  CHECK(grads.at("x")[0] == doctest::Approx(1.8));
  CHECK(grads.at("x")[1] == doctest::Approx(2.4));
}

TEST_CASE("double backprop through a convolution matches nested finite differences") {
  ad::Graph g;
  ad::NodeId x = g.leaf("x", {1, 2, 3, 3});
  ad::NodeId w = g.leaf("w", {2, 2, 3, 3});
  ad::NodeId y = g.tanh(g.conv2d(x, w));
  g.set_output(g.reshape(g.sum_reduce(g.square(y), {0, 1, 2, 3}), {1}));

  Rng rng(5);
  Tensor tx({1, 2, 3, 3});
  Tensor tw({2, 2, 3, 3});
  for (std::size_t i = 0; i < tx.numel(); ++i) tx[i] = rng.uniform(-0.8, 0.8);
  for (std::size_t i = 0; i < tw.numel(); ++i) tw[i] = rng.uniform(-0.5, 0.5);
  std::map<std::string, Tensor> b{{"x", tx}, {"w", tw}};

  auto grads = ad::gradient_of_gradient_norm(g, "x", {"w"}, b);
  std::vector<std::size_t> probe{0, 5, 11, 17, 23, 29, 35};
  std::vector<double> fd = fd_grad_of_gradient_norm_at(g, "x", "w", b, probe);
  for (std::size_t i = 0; i < probe.size(); ++i) {
    CAPTURE(probe[i]);
    CHECK(close_rel(grads.at("w")[probe[i]], fd[i], 1e-3));
  }
}

TEST_CASE("zero gradient norm is reported as an error") {
  ad::Graph g;
  ad::NodeId x = g.leaf("x", {2});
  g.set_output(g.reshape(g.sum_reduce(g.square(x), {0}), {1}));
  CHECK_THROWS_AS(ad::gradient_of_gradient_norm(g, "x", {"x"}, {{"x", Tensor({2}, {0.0, 0.0})}}),
                  ad::EvalError);
}

TEST_CASE("gradient w.r.t. an unconnected leaf is zero") {
  ad::Graph g;
  ad::NodeId x = g.leaf("x", {2});
  g.leaf("unused", {3});
  g.set_output(g.reshape(g.sum_reduce(g.square(x), {0}), {1}));
  auto grads = ad::gradient(g, {"unused"}, {{"x", Tensor({2}, {1.0, 2.0})},
                                            {"unused", Tensor({3}, {5.0, 6.0, 7.0})}});
  for (std::size_t i = 0; i < 3; ++i) CHECK(grads.at("unused")[i] == 0.0);
}

}  // TEST_SUITE
