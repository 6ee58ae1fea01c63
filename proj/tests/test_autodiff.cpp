#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "setinfer/autodiff.hpp"
#include "setinfer/rng.hpp"

using namespace setinfer::ad;
using setinfer::rng::Stream;

namespace {

Array random_array(Shape shape, Stream& s, double lo = -1.0, double hi = 1.0) {
  Array a(std::move(shape));
  for (std::int64_t i = 0; i < a.size(); ++i) a[i] = s.uniform(lo, hi);
  return a;
}

}  // namespace

TEST_CASE("relu forward matches definition") {
  Var x = Var::constant(Array({3}, {-1.0, 0.0, 2.0}));
  Var y = relu(x);
  REQUIRE(y.value()[0] == 0.0);
  REQUIRE(y.value()[1] == 0.0);
  REQUIRE(y.value()[2] == 2.0);
}

TEST_CASE("log-sum-exp is exact and max-shift stable") {
  Var x = Var::constant(Array({2}, {0.0, 0.0}));
  REQUIRE_THAT(logsumexp(x, 0).value().item(),
               Catch::Matchers::WithinAbs(std::log(2.0), 1e-12));

  Var big = Var::constant(Array({2}, {1000.0, 1000.0}));
  double v = logsumexp(big, 0).value().item();
  REQUIRE(std::isfinite(v));
  REQUIRE_THAT(v, Catch::Matchers::WithinAbs(1000.0 + std::log(2.0), 1e-9));

  Var sm = softmax(Var::constant(Array({3}, {1000.0, 0.0, -1000.0})), 0);
  for (std::int64_t i = 0; i < 3; ++i) REQUIRE(std::isfinite(sm.value()[i]));
  REQUIRE_THAT(sm.value()[0], Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("matmul matches a triple-loop reference") {
  Stream s(11);
  Array a = random_array({2, 3}, s);
  Array b = random_array({3, 4}, s);
  Array ref({2, 4}, 0.0);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 4; ++j)
      for (int k = 0; k < 3; ++k) ref[i * 4 + j] += a[i * 3 + k] * b[k * 4 + j];

  Var c = matmul(Var::constant(a), Var::constant(b));
  REQUIRE(c.shape() == Shape{2, 4});
  for (std::int64_t i = 0; i < ref.size(); ++i)
    REQUIRE_THAT(c.value()[i], Catch::Matchers::WithinAbs(ref[i], 1e-14));
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
  Var a = Var::constant(Array({2, 3}, 1.0));
  Var b = Var::constant(Array({4, 2}, 1.0));
  REQUIRE_THROWS_MATCHES(matmul(a, b), ShapeError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("[2,3]") &&
                             Catch::Matchers::ContainsSubstring("[4,2]")));
}

TEST_CASE("derivative of x squared at 3 is 6") {
  ParameterStore ps;
  Var x = ps.create("x", Array::scalar(3.0));
  Var y = mul(x, x);
  auto g = backward(y, ps);
  REQUIRE_THAT(g.at("x").item(), Catch::Matchers::WithinAbs(6.0, 1e-14));
}

TEST_CASE("gradient of sum of softmax is zero") {
  ParameterStore ps;
  Var v = ps.create("v", Array({4}, {0.3, -1.2, 2.0, 0.0}));
  Var y = sum_all(softmax(v, 0));
  auto g = backward(y, ps);
  for (std::int64_t i = 0; i < 4; ++i)
    REQUIRE_THAT(g.at("v")[i], Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("unreachable parameters get exactly zero gradient") {
  ParameterStore ps;
  Var x = ps.create("x", Array::scalar(2.0));
  ps.create("unused", Array({3}, 1.0));
  auto g = backward(mul(x, x), ps);
  REQUIRE(g.at("unused").shape() == Shape{3});
  for (std::int64_t i = 0; i < 3; ++i) REQUIRE(g.at("unused")[i] == 0.0);
}

TEST_CASE("gradients accumulate until zero_grad") {
  ParameterStore ps;
  Var x = ps.create("x", Array::scalar(3.0));
  backward(mul(x, x));
  backward(mul(x, x));
  auto* g = ps.grad("x");
  REQUIRE(g != nullptr);
  REQUIRE_THAT(g->item(), Catch::Matchers::WithinAbs(12.0, 1e-12));
  ps.zero_grad();
  REQUIRE(ps.grad("x") == nullptr);
  auto gm = backward(mul(x, x), ps);
  REQUIRE_THAT(gm.at("x").item(), Catch::Matchers::WithinAbs(6.0, 1e-12));
}

TEST_CASE("backward on a non-scalar is rejected") {
  ParameterStore ps;
  Var x = ps.create("x", Array({2}, 1.0));
  REQUIRE_THROWS_AS(backward(add(x, x)), ShapeError);
}

TEST_CASE("domain errors instead of silent NaN") {
  REQUIRE_THROWS_AS(log(Var::constant(Array({2}, {1.0, 0.0}))), DomainError);
  REQUIRE_THROWS_AS(log(Var::constant(Array({1}, {-2.0}))), DomainError);
  REQUIRE_THROWS_AS(div(Var::constant(1.0), Var::constant(0.0)), DomainError);
  REQUIRE_THROWS_AS(sqrt(Var::constant(-1.0)), DomainError);
}

TEST_CASE("broadcasting follows trailing-axis alignment") {
  Var a = Var::constant(Array({2, 3}, {1, 2, 3, 4, 5, 6}));
  Var b = Var::constant(Array({3}, {10, 20, 30}));
  Var c = add(a, b);
  REQUIRE(c.shape() == Shape{2, 3});
  REQUIRE(c.value()[0] == 11.0);
  REQUIRE(c.value()[5] == 36.0);

  Var col = Var::constant(Array({2, 1}, {100, 200}));
  Var d = add(a, col);
  REQUIRE(d.value()[2] == 103.0);
  REQUIRE(d.value()[3] == 204.0);

  REQUIRE_THROWS_AS(add(Var::constant(Array({2}, 1.0)), Var::constant(Array({3}, 1.0))),
                    ShapeError);
}

TEST_CASE("broadcast backward sums over expanded axes") {
  ParameterStore ps;
  Var b = ps.create("b", Array({3}, {1.0, 2.0, 3.0}));
  Var a = Var::constant(Array({2, 3}, 1.0));
  auto g = backward(sum_all(mul(a, b)), ps);
  for (std::int64_t i = 0; i < 3; ++i)
    REQUIRE_THAT(g.at("b")[i], Catch::Matchers::WithinAbs(2.0, 1e-14));

  ps.zero_grad();
  Var e = broadcast_to(b, {4, 3});
  REQUIRE(e.shape() == Shape{4, 3});
  auto g2 = backward(sum_all(e), ps);
  for (std::int64_t i = 0; i < 3; ++i)
    REQUIRE_THAT(g2.at("b")[i], Catch::Matchers::WithinAbs(4.0, 1e-14));
}

TEST_CASE("axis reductions") {
  Var a = Var::constant(Array({2, 3}, {1, 2, 3, 4, 5, 6}));
  Var s0 = sum(a, 0);
  REQUIRE(s0.shape() == Shape{3});
  REQUIRE(s0.value()[0] == 5.0);
  REQUIRE(s0.value()[2] == 9.0);
  Var s1 = sum(a, 1, true);
  REQUIRE(s1.shape() == Shape{2, 1});
  REQUIRE(s1.value()[0] == 6.0);
  Var m = mean(a, 1);
  REQUIRE_THAT(m.value()[1], Catch::Matchers::WithinAbs(5.0, 1e-14));
  REQUIRE_THAT(mean_all(a).value().item(), Catch::Matchers::WithinAbs(3.5, 1e-14));
}

TEST_CASE("concat, slice and chunk round-trip with exact gradients") {
  ParameterStore ps;
  Var a = ps.create("a", Array({2, 2}, {1, 2, 3, 4}));
  Var b = ps.create("b", Array({2, 3}, {5, 6, 7, 8, 9, 10}));
  Var c = concat({a, b}, 1);
  REQUIRE(c.shape() == Shape{2, 5});
  REQUIRE(c.value()[2] == 5.0);
  REQUIRE(c.value()[5] == 3.0);

  Var back = slice(c, 1, 2, 3);
  for (std::int64_t i = 0; i < 6; ++i) REQUIRE(back.value()[i] == b.value()[i]);

  auto parts = chunk(Var::constant(Array({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8})), 1, 2);
  REQUIRE(parts.size() == 2);
  REQUIRE(parts[1].value()[0] == 3.0);
  REQUIRE(parts[1].value()[3] == 8.0);

  // only the b-slice feeds the loss, so a's gradient is zero
  auto g = backward(sum_all(back), ps);
  for (std::int64_t i = 0; i < 4; ++i) REQUIRE(g.at("a")[i] == 0.0);
  for (std::int64_t i = 0; i < 6; ++i) REQUIRE(g.at("b")[i] == 1.0);
}

TEST_CASE("transpose and reshape") {
  Var a = Var::constant(Array({2, 3}, {1, 2, 3, 4, 5, 6}));
  Var t = transpose(a);
  REQUIRE(t.shape() == Shape{3, 2});
  REQUIRE(t.value()[1] == 4.0);
  Var r = reshape(a, {3, 2});
  REQUIRE(r.value()[1] == 2.0);
  REQUIRE_THROWS_AS(reshape(a, {4, 2}), ShapeError);
}

TEST_CASE("segment_sum pools ragged batches permutation invariantly") {
  Array x({5, 2}, {1.5, -0.25, 0.125, 2.0, -3.0, 0.5, 10.0, 1.0, 0.0625, -7.0});
  std::vector<std::int64_t> offsets{0, 3, 5};
  Var pooled = segment_sum(Var::constant(x), offsets);
  REQUIRE(pooled.shape() == Shape{2, 2});
  REQUIRE_THAT(pooled.value()[0], Catch::Matchers::WithinAbs(1.5 + 0.125 - 3.0, 1e-15));
  REQUIRE_THAT(pooled.value()[3], Catch::Matchers::WithinAbs(-6.0, 1e-15));

  // permute rows inside segment 0: result must be bit-identical
  Array xp({5, 2}, {-3.0, 0.5, 1.5, -0.25, 0.125, 2.0, 10.0, 1.0, 0.0625, -7.0});
  Var pooled_p = segment_sum(Var::constant(xp), offsets);
  for (std::int64_t i = 0; i < 4; ++i) {
    REQUIRE(pooled.value()[i] == pooled_p.value()[i]);
  }

  ParameterStore ps;
  Var leaf = ps.create("x", x);
  Var w = Var::constant(Array({2, 2}, {1.0, 2.0, 3.0, 4.0}));
  auto g = backward(sum_all(mul(segment_sum(leaf, offsets), w)), ps);
  // row r in segment s receives that segment's weight row
  REQUIRE(g.at("x")[0] == 1.0);
  REQUIRE(g.at("x")[1] == 2.0);
  REQUIRE(g.at("x")[6] == 3.0);
  REQUIRE(g.at("x")[9] == 4.0);
}

TEST_CASE("segment_expand repeats rows and sums gradients per segment") {
  Var v = Var::constant(Array({2, 2}, {1, 2, 3, 4}));
  Var e = segment_expand(v, {0, 2, 5});
  REQUIRE(e.shape() == Shape{5, 2});
  REQUIRE(e.value()[0] == 1.0);
  REQUIRE(e.value()[3] == 2.0);
  REQUIRE(e.value()[8] == 3.0);

  ParameterStore ps;
  Var leaf = ps.create("v", Array({2, 2}, {1, 2, 3, 4}));
  auto g = backward(sum_all(segment_expand(leaf, {0, 2, 5})), ps);
  REQUIRE(g.at("v")[0] == 2.0);
  REQUIRE(g.at("v")[2] == 3.0);
}

TEST_CASE("grad_check on a constant-gradient function is near machine precision") {
  std::map<std::string, Array> point{{"x", Array({4}, {0.3, -2.0, 1.7, 0.9})}};
  double err = grad_check(
      [](ParameterStore& ps) { return sum_all(ps.get("x")); }, point, 1e-5);
  REQUIRE(err <= 1e-8);
}

TEST_CASE("every primitive matches central finite differences") {
  Stream s(101);
  auto check = [&](const char* tag, std::function<Var(ParameterStore&)> f,
                   std::map<std::string, Array> point) {
    INFO(tag);
    REQUIRE(grad_check(f, point, 1e-5) <= 1e-4);
  };

  Array x = random_array({2, 3}, s, 0.4, 1.8);
  Array y = random_array({2, 3}, s, 0.4, 1.8);
  Array row = random_array({3}, s, 0.4, 1.8);

  check("add", [](ParameterStore& p) { return sum_all(add(p.get("x"), p.get("y"))); },
        {{"x", x}, {"y", y}});
  check("sub",
        [](ParameterStore& p) { return sum_all(mul(sub(p.get("x"), p.get("y")), p.get("x"))); },
        {{"x", x}, {"y", y}});
  check("mul", [](ParameterStore& p) { return sum_all(mul(p.get("x"), p.get("y"))); },
        {{"x", x}, {"y", y}});
  check("div", [](ParameterStore& p) { return sum_all(div(p.get("x"), p.get("y"))); },
        {{"x", x}, {"y", y}});
  check("broadcast mul",
        [](ParameterStore& p) { return sum_all(mul(p.get("x"), p.get("r"))); },
        {{"x", x}, {"r", row}});
  check("matmul",
        [](ParameterStore& p) { return sum_all(matmul(p.get("a"), p.get("b"))); },
        {{"a", random_array({3, 4}, s)}, {"b", random_array({4, 2}, s)}});
  check("exp", [](ParameterStore& p) { return sum_all(exp(p.get("x"))); }, {{"x", x}});
  check("log", [](ParameterStore& p) { return sum_all(log(p.get("x"))); }, {{"x", x}});
  check("sqrt", [](ParameterStore& p) { return sum_all(sqrt(p.get("x"))); }, {{"x", x}});
  check("tanh", [](ParameterStore& p) { return sum_all(tanh(p.get("x"))); }, {{"x", x}});
  check("relu", [](ParameterStore& p) { return sum_all(relu(p.get("x"))); },
        {{"x", random_array({8}, s, 0.2, 1.0)}});
  check("gelu", [](ParameterStore& p) { return sum_all(gelu(p.get("x"))); },
        {{"x", random_array({8}, s, -2.0, 2.0)}});
  check("sigmoid", [](ParameterStore& p) { return sum_all(sigmoid(p.get("x"))); }, {{"x", x}});
  check("softplus", [](ParameterStore& p) { return sum_all(softplus(p.get("x"))); }, {{"x", x}});
  check("logsumexp",
        [](ParameterStore& p) { return sum_all(logsumexp(p.get("x"), 1)); }, {{"x", x}});
  check("sum axis", [](ParameterStore& p) { return sum_all(mul(sum(p.get("x"), 0), Var::constant(Array({3}, {1.0, -2.0, 3.0})))); },
        {{"x", x}});
  check("mean axis", [](ParameterStore& p) { return sum_all(mean(p.get("x"), 1)); }, {{"x", x}});
  check("transpose",
        [](ParameterStore& p) { return sum_all(mul(transpose(p.get("x")), Var::constant(Array({3, 2}, 0.5)))); },
        {{"x", x}});
  check("concat+slice",
        [](ParameterStore& p) {
          Var c = concat({p.get("x"), p.get("y")}, 1);
          return sum_all(mul(slice(c, 1, 1, 4), Var::constant(Array({2, 4}, 1.25))));
        },
        {{"x", x}, {"y", y}});
  check("segment ops",
        [](ParameterStore& p) {
          std::vector<std::int64_t> off{0, 2, 3};
          Var pooled = segment_sum(p.get("r3"), off);
          return sum_all(mul(segment_expand(pooled, off), p.get("r3")));
        },
        {{"r3", random_array({3, 2}, s)}});
  check("softmax composite",
        [](ParameterStore& p) {
          return sum_all(mul(softmax(p.get("x"), 1), Var::constant(Array({2, 3}, {1, 2, 3, 4, 5, 6}))));
        },
        {{"x", x}});
}

TEST_CASE("three-layer MLP gradient matches finite differences") {
  Stream s(55);
  std::map<std::string, Array> point{
      {"w0", random_array({4, 8}, s, -0.5, 0.5)}, {"b0", random_array({8}, s, -0.1, 0.1)},
      {"w1", random_array({8, 8}, s, -0.4, 0.4)}, {"b1", random_array({8}, s, -0.1, 0.1)},
      {"w2", random_array({8, 1}, s, -0.4, 0.4)}, {"b2", random_array({1}, s, -0.1, 0.1)},
  };
  Array input = random_array({5, 4}, s);
  auto f = [input](ParameterStore& p) {
    Var h = relu(add(matmul(Var::constant(input), p.get("w0")), p.get("b0")));
    h = relu(add(matmul(h, p.get("w1")), p.get("b1")));
    Var out = add(matmul(h, p.get("w2")), p.get("b2"));
    return sum_all(tanh(out));
  };
  REQUIRE(grad_check(f, point, 1e-5) <= 1e-4);
}

TEST_CASE("forward evaluation is deterministic") {
  Stream s(8);
  Array x = random_array({6, 6}, s);
  Var a = Var::constant(x);
  Var y1 = sum_all(matmul(gelu(a), transpose(a)));
  Var y2 = sum_all(matmul(gelu(a), transpose(a)));
  REQUIRE(y1.value().item() == y2.value().item());
}
