#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "utuning/autograd.hpp"
#include "utuning/gradcheck.hpp"
#include "utuning/tensor.hpp"

using namespace utuning;

namespace {

// Naive triple-loop product, the reference for matmul.
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t l = 0; l < k; ++l) acc += a[i * k + l] * b[l * n + j];
      c[i * n + j] = acc;
    }
  }
  return c;
}

}  // namespace

TEST_CASE("matmul identity and hand cases") {
  Var i2 = constant(Tensor::identity(2));
  Var a = constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  Tensor out = matmul(i2, a)->value;
  CHECK(out == a->value);

  Var row = constant(Tensor::matrix(1, 2, {1, 2}));
  Var col = constant(Tensor::matrix(2, 1, {3, 4}));
  Tensor prod = matmul(row, col)->value;
  CHECK(prod.shape() == Shape{1, 1});
  CHECK(prod[0] == 11.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(11);
  Tensor a = rng.normal_tensor({3, 4});
  Tensor b = rng.normal_tensor({4, 5});
  Tensor got = matmul(constant(a), constant(b))->value;
  CHECK(max_abs_diff(got, matmul_oracle(a, b)) < 1e-12);
}

TEST_CASE("matmul shape errors carry both shapes") {
  Var a = constant(Tensor::zeros({2, 3}));
  Var b = constant(Tensor::zeros({4, 5}));
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 5]") != std::string::npos);
  }
}

TEST_CASE("batched matmul broadcasts a shared rank-2 operand") {
  Rng rng(5);
  Tensor a = rng.normal_tensor({2, 3, 4});
  Tensor w = rng.normal_tensor({4, 5});
  Tensor got = matmul(constant(a), constant(w))->value;
  CHECK(got.shape() == Shape{2, 3, 5});
  for (int64_t b = 0; b < 2; ++b) {
    Tensor slice({3, 4}, std::vector<double>(a.data() + b * 12, a.data() + (b + 1) * 12));
    Tensor want = matmul_oracle(slice, w);
    Tensor got_slice({3, 5}, std::vector<double>(got.data() + b * 15, got.data() + (b + 1) * 15));
    CHECK(max_abs_diff(got_slice, want) < 1e-12);
  }
}

TEST_CASE("softmax trivial rows") {
  Tensor s1 = softmax(constant(Tensor::row({0, 0})), -1)->value;
  CHECK(s1[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s1[1] == doctest::Approx(0.5).epsilon(1e-15));

  Tensor s2 = softmax(constant(Tensor::row({1000, 1000, 1000})), -1)->value;
  for (int i = 0; i < 3; ++i) {
    CHECK(std::isfinite(s2[i]));
    CHECK(s2[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
}

TEST_CASE("softmax matches extended-precision oracle") {
  Tensor x = Tensor::row({1, 2, 3});
  Tensor got = softmax(constant(x), -1)->value;
  long double denom = 0;
  for (int i = 0; i < 3; ++i) denom += expl(static_cast<long double>(x[i]));
  for (int i = 0; i < 3; ++i) {
    long double want = expl(static_cast<long double>(x[i])) / denom;
    CHECK(std::fabs(got[i] - static_cast<double>(want)) < 1e-14);
  }
}

TEST_CASE("softmax rows sum to one and stay in (0,1)") {
  Rng rng(99);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor x = rng.normal_tensor({4, 7}, 3.0);
    Tensor s = softmax(constant(x), -1)->value;
    for (int64_t r = 0; r < 4; ++r) {
      double sum = 0;
      for (int64_t j = 0; j < 7; ++j) {
        double v = s[r * 7 + j];
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        sum += v;
      }
      CHECK(std::fabs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("concat basics and split round trip") {
  Var a = constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  CHECK(concat({a}, 0)->value == a->value);

  Var ones = constant(Tensor::ones({1, 2}));
  Var zeros = constant(Tensor::zeros({1, 2}));
  Tensor cat = concat({ones, zeros}, 0)->value;
  CHECK(cat == Tensor::matrix(2, 2, {1, 1, 0, 0}));

  Rng rng(3);
  for (int64_t axis : {0L, 1L}) {
    Tensor p = rng.normal_tensor({3, 4});
    Tensor q = rng.normal_tensor({3, 4});
    Var joined = concat({constant(p), constant(q)}, axis);
    int64_t len = p.dim(axis);
    Tensor back_p = narrow(joined, axis, 0, len)->value;
    Tensor back_q = narrow(joined, axis, len, len)->value;
    CHECK(back_p == p);  // bit-exact
    CHECK(back_q == q);
  }
}

TEST_CASE("layer_norm trivial and statistical cases") {
  Var gamma = constant(Tensor::ones({4}));
  Var beta = constant(Tensor::zeros({4}));

  Tensor flat = layer_norm(constant(Tensor::full({1, 4}, 3.7)), gamma, beta)->value;
  for (int i = 0; i < 4; ++i) CHECK(std::fabs(flat[i]) < 1e-12);

  Var g2 = constant(Tensor::ones({2}));
  Var b2 = constant(Tensor::zeros({2}));
  Tensor pm = layer_norm(constant(Tensor::matrix(1, 2, {1, -1})), g2, b2)->value;
  CHECK(pm[0] == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(pm[1] == doctest::Approx(-1.0).epsilon(1e-5));

  Rng rng(21);
  Tensor x = rng.normal_tensor({1, 64}, 2.5);
  Var g64 = constant(Tensor::ones({64}));
  Var b64 = constant(Tensor::zeros({64}));
  Tensor out = layer_norm(constant(x), g64, b64)->value;
  double mean = 0, var = 0;
  for (int64_t i = 0; i < 64; ++i) mean += out[i];
  mean /= 64;
  for (int64_t i = 0; i < 64; ++i) var += (out[i] - mean) * (out[i] - mean);
  var /= 64;
  CHECK(std::fabs(mean) < 1e-10);
  CHECK(std::fabs(var - 1.0) < 1e-4);
}

TEST_CASE("gelu and relu reference values") {
  CHECK(gelu(constant(Tensor::row({0})))->value[0] == 0.0);
  Tensor r = relu(constant(Tensor::row({-1, 2})))->value;
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 2.0);

  // tanh-form reference in extended precision.
  long double c = sqrtl(2.0L / 3.14159265358979323846264338327950288L);
  long double u = c * (1.0L + 0.044715L);
  long double want = 0.5L * (1.0L + tanhl(u));
  double got = gelu(constant(Tensor::row({1.0})))->value[0];
  CHECK(std::fabs(got - static_cast<double>(want)) < 1e-12);
}

TEST_CASE("backward basics") {
  Rng rng(17);
  Var v = variable(rng.normal_tensor({3, 2}), true, "v");
  backward(sum(v));
  CHECK(v->grad == Tensor::ones({3, 2}));

  Var a = variable(rng.normal_tensor({4}), true, "a");
  Var b = variable(rng.normal_tensor({4}), true, "b");
  backward(sum(mul(a, b)));
  CHECK(max_abs_diff(a->grad, b->value) < 1e-15);
  CHECK(max_abs_diff(b->grad, a->value) < 1e-15);
}

TEST_CASE("backward rejects non-scalar loss") {
  Var v = variable(Tensor::ones({2, 2}), true, "v");
  CHECK_THROWS_AS(backward(add(v, v)), ContractError);
}

TEST_CASE("backward twice without zeroing doubles leaf grads") {
  Rng rng(8);
  Var v = variable(rng.normal_tensor({3}), true, "v");
  Var w = variable(rng.normal_tensor({3}), true, "w");
  auto make_loss = [&] { return sum(mul(gelu(v), w)); };
  Var loss = make_loss();
  backward(loss);
  Tensor once_v = v->grad;
  Tensor once_w = w->grad;
  backward(loss);
  for (int64_t i = 0; i < 3; ++i) {
    CHECK(v->grad[i] == 2.0 * once_v[i]);  // exact doubling
    CHECK(w->grad[i] == 2.0 * once_w[i]);
  }
}

TEST_CASE("diamond-shaped reuse accumulates correctly") {
  Var v = variable(Tensor::row({1.5, -0.5}), true, "v");
  // loss = sum(v * v) + sum(v): d/dv = 2v + 1
  Var loss = add(sum(mul(v, v)), sum(v));
  backward(loss);
  CHECK(v->grad[0] == doctest::Approx(2 * 1.5 + 1).epsilon(1e-14));
  CHECK(v->grad[1] == doctest::Approx(2 * -0.5 + 1).epsilon(1e-14));
}

TEST_CASE("finite difference oracle hand cases") {
  Tensor at = Tensor::row({1, 2});
  Tensor g = finite_difference_gradient(
      [](const Tensor& x) {
        double s = 0;
        for (int64_t i = 0; i < x.numel(); ++i) s += x[i] * x[i];
        return s;
      },
      at);
  CHECK(std::fabs(g[0] - 2.0) < 1e-8);
  CHECK(std::fabs(g[1] - 4.0) < 1e-8);

  Tensor g2 = finite_difference_gradient(
      [](const Tensor& x) { return softmax_value(x, -1)[0]; }, Tensor::row({0, 0}));
  CHECK(std::fabs(g2[0] - 0.25) < 1e-7);
  CHECK(std::fabs(g2[1] + 0.25) < 1e-7);

  Tensor g3 = finite_difference_gradient([](const Tensor&) { return 4.2; }, Tensor::row({1, 2, 3}));
  CHECK(std::fabs(g3[0]) < 1e-10);
  CHECK(std::fabs(g3[1]) < 1e-10);
}

// Every primitive op, checked against central differences at random points.
TEST_CASE("primitive gradients agree with finite differences") {
  Rng rng(2024);
  auto check_op = [&](const char* name, auto builder, std::vector<Var> leaves) {
    for (const Var& leaf : leaves) {
      double err = check_gradient(leaf, builder);
      INFO(name << " leaf " << leaf->name);
      CHECK(err < 1e-4);
    }
  };

  for (int rep = 0; rep < 10; ++rep) {
    Var x = variable(rng.normal_tensor({2, 3}), true, "x");
    Var y = variable(rng.normal_tensor({2, 3}), true, "y");
    Var row = variable(rng.normal_tensor({3}), true, "row");
    Var a = variable(rng.normal_tensor({2, 3}), true, "a");
    Var b = variable(rng.normal_tensor({3, 4}), true, "b");
    Var bt = variable(rng.normal_tensor({4, 3}), true, "bt");
    Var pos = variable(rng.uniform_tensor({2, 3}, 0.5, 2.0), true, "pos");
    Var gamma = variable(rng.uniform_tensor({3}, 0.5, 1.5), true, "gamma");
    Var beta = variable(rng.normal_tensor({3}), true, "beta");
    Var r = variable(rng.normal_tensor({2}), true, "r");
    Var batch = variable(rng.normal_tensor({2, 2, 3}), true, "batch");

    check_op("add", [&] { return sum(mul(add(x, y), y)); }, {x, y});
    check_op("add_suffix", [&] { return sum(mul(add(x, row), x)); }, {x, row});
    check_op("sub", [&] { return sum(mul(sub(x, row), x)); }, {x, row});
    check_op("mul_suffix", [&] { return sum(mul(mul(x, row), y)); }, {x, row});
    check_op("div", [&] { return sum(div(x, pos)); }, {x, pos});
    check_op("scale", [&] { return sum(scale(x, -1.7)); }, {x});
    check_op("matmul", [&] { return sum(mul(matmul(a, b), matmul(a, b))); }, {a, b});
    check_op("matmul_nt", [&] { return sum(matmul_nt(a, bt)); }, {a, bt});
    check_op("matmul_batched", [&] { return sum(mul(matmul(batch, b), matmul(batch, b))); },
             {batch, b});
    check_op("softmax", [&] { return sum(mul(softmax(x, -1), y)); }, {x});
    check_op("softmax_axis0", [&] { return sum(mul(softmax(x, 0), y)); }, {x});
    check_op("concat", [&] { return sum(mul(concat({x, y}, 0), concat({y, x}, 0))); }, {x, y});
    check_op("narrow", [&] { return sum(mul(narrow(x, 1, 1, 2), narrow(y, 1, 0, 2))); }, {x});
    check_op("reshape", [&] { return sum(mul(reshape(x, {3, 2}), reshape(y, {3, 2}))); }, {x});
    check_op("broadcast_batch", [&] { return sum(mul(broadcast_batch(x, 3), broadcast_batch(y, 3))); },
             {x});
    check_op("layer_norm", [&] { return sum(mul(layer_norm(x, gamma, beta), y)); },
             {x, gamma, beta});
    check_op("gelu", [&] { return sum(mul(gelu(x), y)); }, {x});
    check_op("relu", [&] { return sum(mul(relu(x), y)); }, {x});
    check_op("sigmoid", [&] { return sum(mul(sigmoid(x), y)); }, {x});
    check_op("exp", [&] { return sum(mul(utuning::exp(scale(x, 0.3)), y)); }, {x});
    check_op("sum_last", [&] { return sum(mul(sum_last(x), r)); }, {x});
    check_op("mean_axis", [&] { return sum(mul(mean_axis(x, 0), row)); }, {x});
    check_op("scale_rows", [&] { return sum(mul(scale_rows(x, r), y)); }, {x, r});
    check_op("cross_entropy",
             [&] { return cross_entropy_mean(matmul(a, b), std::vector<int64_t>{1, 3}); }, {a, b});
  }
}

TEST_CASE("stop-gradient-at-frozen prunes frozen leaves only") {
  Rng rng(4);
  Var frozen = variable(rng.normal_tensor({3}), false, "frozen");
  Var live = variable(rng.normal_tensor({3}), true, "live");

  backward(sum(mul(frozen, live)));
  CHECK(max_abs_diff(frozen->grad, live->value) < 1e-15);  // frozen still receives grads

  set_stop_grad_at_frozen(true);
  zero_grad({frozen, live});
  backward(sum(mul(frozen, live)));
  set_stop_grad_at_frozen(false);
  CHECK(frozen->grad == Tensor::zeros({3}));
  CHECK(max_abs_diff(live->grad, frozen->value) < 1e-15);
}

TEST_CASE("numeric checks flag non-finite results") {
  set_numeric_checks(true);
  Var a = constant(Tensor::row({1.0}));
  Var zero = constant(Tensor::row({0.0}));
  CHECK_THROWS_AS(div(a, zero), NumericError);
  set_numeric_checks(false);
  CHECK_NOTHROW(div(a, zero));
}

TEST_CASE("f32 precision mode rounds op results") {
  set_precision(Precision::f32);
  Var a = constant(Tensor::row({1.0 / 3.0}));
  Var b = constant(Tensor::row({1.0 / 7.0}));
  Tensor got = add(a, b)->value;
  set_precision(Precision::f64);
  double want = static_cast<double>(static_cast<float>(1.0 / 3.0 + 1.0 / 7.0));
  CHECK(got[0] == want);
  Tensor full = add(a, b)->value;
  CHECK(full[0] == 1.0 / 3.0 + 1.0 / 7.0);
}

TEST_CASE("graph visits each node exactly once") {
  Var v = variable(Tensor::row({1, 2}), true, "v");
  Var shared = gelu(v);
  Var loss = sum(add(mul(shared, shared), shared));
  Graph g = Graph::build(loss);
  std::set<const Node*> seen;
  for (const Node* n : g.order) CHECK(seen.insert(n).second);
  // parents precede children
  std::map<const Node*, size_t> pos;
  for (size_t i = 0; i < g.order.size(); ++i) pos[g.order[i]] = i;
  for (const Node* n : g.order) {
    for (const auto& p : n->parents) CHECK(pos[p.get()] < pos[n]);
  }
}
