#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "promptlab/digest.hpp"
#include "promptlab/errors.hpp"
#include "promptlab/rng.hpp"
#include "promptlab/tensor.hpp"

using namespace promptlab;

namespace {

Tensor param(std::vector<std::size_t> shape, std::vector<double> values) {
  return Tensor::parameter(std::move(shape), std::move(values));
}

std::vector<double> ramp(std::size_t n, double lo, double hi) {
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  }
  return out;
}

}  // namespace

TEST_CASE("construction and accessors") {
  Tensor z = Tensor::zeros({2, 3});
  CHECK(z.rank() == 2);
  CHECK(z.size() == 6);
  CHECK(z.at(1, 2) == 0.0);
  CHECK_FALSE(z.requires_grad());

  Tensor s = Tensor::scalar(2.5);
  CHECK(s.rank() == 0);
  CHECK(s.value() == 2.5);

  Tensor p = param({2}, {1.0, -1.0});
  CHECK(p.requires_grad());
  CHECK(p.is_leaf());

  CHECK_THROWS_AS(Tensor::from_values({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
}

TEST_CASE("matmul values and shape errors") {
  Tensor a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_values({3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor c = matmul(a, b);
  CHECK(c.at(0, 0) == doctest::Approx(58).epsilon(1e-15));
  CHECK(c.at(0, 1) == doctest::Approx(64).epsilon(1e-15));
  CHECK(c.at(1, 0) == doctest::Approx(139).epsilon(1e-15));
  CHECK(c.at(1, 1) == doctest::Approx(154).epsilon(1e-15));

  // Vector conveniences: rank-1 left is a row, rank-1 right a column.
  Tensor v = Tensor::from_values({3}, {1, 0, -1});
  Tensor row = matmul(v, b);
  CHECK(row.rank() == 1);
  CHECK(row.at(0) == doctest::Approx(7 - 11));
  Tensor col = matmul(a, v);
  CHECK(col.rank() == 1);
  CHECK(col.at(0) == doctest::Approx(1 - 3));

  try {
    matmul(a, Tensor::zeros({4, 2}));
    FAIL("expected shape error");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("(2, 3)") != std::string::npos);
    CHECK(msg.find("(4, 2)") != std::string::npos);
  }
}

TEST_CASE("softmax matches a high-precision oracle") {
  // Input drawn once from a seeded gaussian, outputs computed with
  // 60-digit arithmetic and frozen here.
  std::vector<double> logits = {0.8417604857323,  -1.9334689267086, 0.6192103602440,
                                2.2505294543970,  -0.3871328478107, 1.5390986905379,
                                -2.7461837021491, 0.0931047229821,  1.1097254397880,
                                -0.7246249331542};
  std::vector<double> expected = {
      0.097356772211753116468,   0.00606875139281669220989, 0.0779316507043206610934,
      0.398278402163405128784,   0.0284881713696877292778,  0.195531306041550013148,
      0.00269241377965474371424, 0.046049943337960221536,   0.127274637174114412558,
      0.0203279518247372812102};
  Tensor p = softmax_row(Tensor::from_values({10}, logits));
  double total = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(std::abs(p.at(i) - expected[i]) < 1e-15);
    total += p.at(i);
  }
  CHECK(std::abs(total - 1.0) < 1e-12);
}

TEST_CASE("softmax shift invariance and rank-2 rows") {
  std::vector<double> logits = {0.3, -1.2, 2.0, 0.0};
  Tensor base = softmax_row(Tensor::from_values({4}, logits));
  std::vector<double> shifted = logits;
  for (double& v : shifted) v += 7.5;
  Tensor moved = softmax_row(Tensor::from_values({4}, shifted));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::abs(base.at(i) - moved.at(i)) < 1e-14);
  }

  Tensor m = softmax_row(Tensor::from_values({2, 2}, {0.0, 1.0, 3.0, 3.0}));
  CHECK(std::abs(m.at(0, 0) + m.at(0, 1) - 1.0) < 1e-15);
  CHECK(m.at(1, 0) == doctest::Approx(0.5).epsilon(1e-12));

  std::vector<double> bad = {1.0, std::nan(""), 0.0};
  CHECK_THROWS_AS(softmax_row(Tensor::from_values({3}, bad)), NumericError);
  std::vector<double> inf = {1.0, INFINITY, 0.0};
  CHECK_THROWS_AS(softmax_row(Tensor::from_values({3}, inf)), NumericError);
}

TEST_CASE("cross entropy values, floor and validation") {
  Tensor uniform = Tensor::from_values({4}, {0.25, 0.25, 0.25, 0.25});
  CHECK(std::abs(cross_entropy(uniform, 2).value() - 1.386294361119890618834) < 1e-12);

  Tensor certain = Tensor::from_values({3}, {0.0, 1.0, 0.0});
  CHECK(cross_entropy(certain, 1).value() == 0.0);

  Tensor p3 = Tensor::from_values({2}, {0.3, 0.7});
  CHECK(std::abs(cross_entropy(p3, 0).value() - 1.203972804325935992623) < 1e-12);

  // Probability floor: -log(1e-12).
  Tensor zeroed = Tensor::from_values({2}, {0.0, 1.0});
  CHECK(std::abs(cross_entropy(zeroed, 0).value() - 27.63102111592854821) < 1e-9);

  Tensor off = Tensor::from_values({2}, {0.6, 0.6});
  CHECK_THROWS_AS(cross_entropy(off, 0), NumericError);
  CHECK_THROWS_AS(cross_entropy(uniform, 4), std::out_of_range);
}

TEST_CASE("cosine similarity geometry and degenerate input") {
  Tensor e0 = Tensor::from_values({3}, {2.0, 0.0, 0.0});
  Tensor e1 = Tensor::from_values({3}, {0.0, 5.0, 0.0});
  CHECK(cosine_similarity(e0, e1).value() == 0.0);
  CHECK(cosine_similarity(e0, e0).value() == doctest::Approx(1.0).epsilon(1e-15));
  Tensor neg = Tensor::from_values({3}, {-1.0, 0.0, 0.0});
  CHECK(cosine_similarity(e0, neg).value() == doctest::Approx(-1.0).epsilon(1e-15));

  // Scale invariance.
  Tensor u = Tensor::from_values({4}, {0.3, -1.1, 0.7, 2.0});
  Tensor v = Tensor::from_values({4}, {1.4, 0.2, -0.5, 0.9});
  double c1 = cosine_similarity(u, v).value();
  double c2 = cosine_similarity(scale(u, 3.7), v).value();
  CHECK(std::abs(c1 - c2) < 1e-14);

  Tensor zero = Tensor::zeros({4});
  CHECK_THROWS_AS(cosine_similarity(u, zero), NumericError);
}

TEST_CASE("l2 normalize produces unit vectors") {
  Tensor x = Tensor::from_values({4}, {3.0, -4.0, 12.0, 0.0});
  Tensor y = l2_normalize(x);
  double n2 = 0.0;
  for (std::size_t i = 0; i < 4; ++i) n2 += y.at(i) * y.at(i);
  CHECK(std::abs(std::sqrt(n2) - 1.0) < 1e-15);
  CHECK(y.at(0) == doctest::Approx(3.0 / 13.0).epsilon(1e-15));
  CHECK_THROWS_AS(l2_normalize(Tensor::zeros({3})), NumericError);
}

TEST_CASE("layer norm statistics") {
  Tensor gain = Tensor::full({4}, 1.0);
  Tensor bias = Tensor::zeros({4});
  Tensor x = Tensor::from_values({4}, {1.0, 2.0, 3.0, 4.0});
  Tensor y = layer_norm(x, gain, bias);
  double mean = 0.0;
  for (std::size_t i = 0; i < 4; ++i) mean += y.at(i);
  mean /= 4.0;
  CHECK(std::abs(mean) < 1e-12);
  double var = 0.0;
  for (std::size_t i = 0; i < 4; ++i) var += (y.at(i) - mean) * (y.at(i) - mean);
  var /= 4.0;
  CHECK(var == doctest::Approx(1.0).epsilon(1e-4));

  // A constant row has zero variance, so the output is the bias term.
  Tensor shift = Tensor::from_values({4}, {0.5, 0.5, 0.5, 0.5});
  Tensor b2 = Tensor::from_values({4}, {1.0, -2.0, 0.25, 9.0});
  Tensor y2 = layer_norm(shift, gain, b2);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y2.at(i) == doctest::Approx(b2.at(i)).epsilon(1e-9));
}

TEST_CASE("exact gradients for simple closed forms") {
  // loss = sum(x * x) has gradient 2x.
  Tensor x = param({3}, {1.5, -2.0, 0.5});
  Tensor loss = sum(mul(x, x));
  GradientMap grads = backward(loss);
  REQUIRE(grads.contains(x));
  const Tensor& g = grads.at(x);
  CHECK(g.at(0) == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(g.at(1) == doctest::Approx(-4.0).epsilon(1e-15));
  CHECK(g.at(2) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("gradients exist only for grad-enabled leaves") {
  Tensor x = param({2}, {1.0, 2.0});
  Tensor frozen = Tensor::from_values({2}, {3.0, 4.0});
  Tensor loss = sum(mul(x, frozen));
  GradientMap grads = backward(loss);
  CHECK(grads.size() == 1);
  CHECK(grads.contains(x));
  CHECK(grads.find(frozen) == nullptr);

  // A graph with no parameters yields an empty map.
  Tensor silent = sum(mul(frozen, frozen));
  CHECK(backward(silent).size() == 0);
}

TEST_CASE("backward consumes the graph") {
  Tensor x = param({2}, {1.0, 2.0});
  Tensor loss = sum(mul(x, x));
  GradientMap first = backward(loss);
  CHECK(first.size() == 1);
  GradientMap second = backward(loss);
  CHECK(second.size() == 0);
  // Values survive consumption.
  CHECK(loss.value() == doctest::Approx(5.0));
}

TEST_CASE("finite difference agreement across the op set") {
  const double step = 1e-5;
  const double tol = 1e-4;

  SUBCASE("dense classifier path") {
    Tensor w = param({3, 4}, ramp(12, -0.8, 0.9));
    Tensor b = param({4}, {0.1, -0.2, 0.3, 0.05});
    Tensor x = Tensor::from_values({3}, {0.7, -1.1, 0.4});
    auto loss_fn = [&]() {
      Tensor logits = add(matmul(x, w), b);
      return cross_entropy(softmax_row(logits), 2);
    };
    std::vector<Tensor> params = {w, b};
    CHECK(finite_difference_check(loss_fn, params, step) < tol);
  }

  SUBCASE("normalization and similarity path") {
    Tensor u = param({5}, {0.9, -0.3, 0.5, 1.2, -0.7});
    Tensor w = param({5, 5}, ramp(25, -0.5, 0.6));
    Tensor gain = param({5}, {1.1, 0.9, 1.0, 1.05, 0.95});
    Tensor bias = param({5}, {0.0, 0.1, -0.1, 0.02, 0.0});
    Tensor anchor = Tensor::from_values({5}, {0.2, 0.8, -0.4, 0.1, 0.5});
    auto loss_fn = [&]() {
      Tensor h = layer_norm(matmul(u, w), gain, bias);
      Tensor z = l2_normalize(tanh(h));
      Tensor sim = cosine_similarity(z, anchor);
      Tensor two = stack_scalars(std::vector<Tensor>{sim, Tensor::scalar(0.0)});
      return cross_entropy(softmax_row(scale(two, 3.0)), 0);
    };
    std::vector<Tensor> params = {u, w, gain, bias};
    CHECK(finite_difference_check(loss_fn, params, step) < tol);
  }

  SUBCASE("structural ops path") {
    Tensor a = param({2, 3}, {0.3, -0.2, 0.5, 0.8, -0.6, 0.1});
    Tensor v = param({3}, {0.4, -0.9, 0.2});
    auto loss_fn = [&]() {
      Tensor block = concat_rows(std::vector<Tensor>{a, repeat_row(v, 2)});  // 4 x 3
      Tensor wide = concat_cols(std::vector<Tensor>{block, transpose(transpose(block))});
      Tensor mid = slice_cols(wide, 1, 5);
      Tensor r = relu(slice_rows(mid, 0, 3));
      Tensor probe = take_row(r, 1);
      Tensor flat = matmul(mid, transpose(mid));  // 4 x 4
      return add(sum(flat), sum(mul(probe, probe)));
    };
    std::vector<Tensor> params = {a, v};
    CHECK(finite_difference_check(loss_fn, params, step) < tol);
  }

  SUBCASE("shared subexpression accumulates") {
    Tensor x = param({3}, {0.6, -0.4, 1.1});
    auto loss_fn = [&]() {
      Tensor y = tanh(x);
      Tensor p = softmax_row(add(mul(y, y), y));
      return cross_entropy(p, 1);
    };
    std::vector<Tensor> params = {x};
    CHECK(finite_difference_check(loss_fn, params, step) < tol);
  }

  SUBCASE("scalar broadcasting") {
    Tensor x = param({4}, {0.2, -0.5, 0.9, 0.0});
    Tensor s = param({1}, {0.7});
    auto loss_fn = [&]() {
      Tensor y = mul(x, s);
      Tensor z = sub(y, Tensor::scalar(0.1));
      return sum(mul(z, add(z, s)));
    };
    std::vector<Tensor> params = {x, s};
    CHECK(finite_difference_check(loss_fn, params, step) < tol);
  }
}

TEST_CASE("rng determinism and distribution sanity") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng g(7);
  double mean = 0.0, m2 = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double v = g.gaussian();
    mean += v;
    m2 += v * v;
  }
  mean /= n;
  double var = m2 / n - mean * mean;
  CHECK(std::abs(mean) < 0.03);
  CHECK(std::abs(var - 1.0) < 0.05);

  Rng u(3);
  for (int i = 0; i < 1000; ++i) CHECK(u.below(17) < 17);

  // Forked streams differ from the parent and from each other.
  Rng root(99);
  Rng f1 = root.fork(1);
  Rng f2 = root.fork(2);
  CHECK(f1.next_u64() != f2.next_u64());

  // Shuffle is a permutation.
  std::vector<int> items = {0, 1, 2, 3, 4, 5, 6, 7};
  Rng s(5);
  s.shuffle(items);
  std::vector<int> sorted = items;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 8; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("digest matches reference vectors and separates fields") {
  // Canonical FNV-1a 64 results.
  Digest empty;
  CHECK(empty.value() == 0xcbf29ce484222325ULL);
  Digest a;
  a.update("a", 1);
  CHECK(a.value() == 0xaf63dc4c8601ec8cULL);
  Digest foobar;
  foobar.update("foobar", 6);
  CHECK(foobar.value() == 0x85944171f73967e8ULL);
  CHECK(foobar.hex().size() == 16);

  // Field framing: ("ab", "c") and ("a", "bc") must differ.
  Digest left, right;
  left.update_string("ab");
  left.update_string("c");
  right.update_string("a");
  right.update_string("bc");
  CHECK(left.value() != right.value());

  Digest d1, d2;
  d1.update_double(0.1);
  d2.update_double(0.1 + 1e-18);  // below half an ulp: same double after rounding
  CHECK(d1.value() == d2.value());
}

TEST_CASE("double formatting round-trips exactly") {
  std::vector<double> probes = {0.0,  1.0,     -1.0,          0.1,
                                1e-12, 3.14159, 1.0 / 3.0,    -2.5e-8,
                                1e300, 5e-324,  123456.789012, 0.30000000000000004};
  for (double v : probes) {
    std::string text = format_double(v);
    CHECK(parse_double(text) == v);
  }
  CHECK_THROWS_AS(parse_double("12x"), DataError);
  CHECK_THROWS_AS(parse_double(""), DataError);
}
