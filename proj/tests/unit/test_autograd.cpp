#include "doctest.h"

#include "layercake/autograd.hpp"
#include "layercake/rng.hpp"
#include "layercake/tensor.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

using layercake::Rng;
using layercake::Tensor;
namespace ad = layercake::ad;

namespace {

using GraphFn =
    std::function<ad::Value(ad::Tape&, const std::vector<ad::Value>&)>;

double eval_loss(const GraphFn& fn, const std::vector<Tensor>& inputs) {
  ad::Tape tape;
  std::vector<ad::Value> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
  return tape.val(fn(tape, leaves)).item();
}

// Central-difference oracle: analytic gradients from the tape must match
// (f(x+h)-f(x-h))/2h on every element of every input.
void check_grads(const GraphFn& fn, std::vector<Tensor> inputs,
                 double rel_tol = 1e-4, double abs_tol = 1e-7) {
  ad::Tape tape;
  std::vector<ad::Value> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, true));
  ad::Value loss = fn(tape, leaves);
  tape.backward(loss);

  const double h = 1e-5;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor& analytic = tape.grad(leaves[k]);
    for (std::int64_t i = 0; i < inputs[k].numel(); ++i) {
      std::vector<Tensor> probe = inputs;
      probe[k].v[i] += h;
      double fp = eval_loss(fn, probe);
      probe[k].v[i] -= 2 * h;
      double fm = eval_loss(fn, probe);
      double numeric = (fp - fm) / (2 * h);
      double tol = abs_tol + rel_tol * std::fabs(numeric);
      INFO("input ", k, " element ", i, ": analytic=", analytic.v[i],
           " numeric=", numeric);
      CHECK(std::fabs(analytic.v[i] - numeric) <= tol);
    }
  }
}

Tensor rand_tensor(std::vector<std::int64_t> shape, std::uint64_t seed,
                   double scale = 1.0) {
  Rng rng(seed);
  return Tensor::randn(std::move(shape), rng, scale);
}

}  // namespace

TEST_CASE("backward seeds the loss gradient with one") {
  ad::Tape tape;
  auto x = tape.leaf(Tensor::full({3}, 2.0), true);
  auto loss = tape.sum_all(x);
  tape.backward(loss);
  CHECK(tape.grad(loss).item() == 1.0);
  for (double g : tape.grad(x).v) CHECK(g == 1.0);
}

TEST_CASE("nodes without requires_grad receive no gradient") {
  ad::Tape tape;
  auto x = tape.leaf(Tensor::full({2}, 1.0), true);
  auto c = tape.leaf(Tensor::full({2}, 3.0), false);
  auto loss = tape.mean_all(tape.mul(x, c));
  tape.backward(loss);
  CHECK(tape.has_grad(x));
  CHECK_FALSE(tape.has_grad(c));
  CHECK(tape.grad(x).v[0] == doctest::Approx(1.5));
}

TEST_CASE("gradients accumulate when a value is reused") {
  // loss = mean(x*x + x) -> d/dx = (2x + 1)/n
  ad::Tape tape;
  auto x = tape.leaf(Tensor::full({4}, 3.0), true);
  auto loss = tape.mean_all(tape.add(tape.mul(x, x), x));
  tape.backward(loss);
  for (double g : tape.grad(x).v) CHECK(g == doctest::Approx(7.0 / 4.0));
}

TEST_CASE("elementwise op gradients match central differences") {
  Tensor x = rand_tensor({2, 3}, 11);
  Tensor y = rand_tensor({2, 3}, 12);

  SUBCASE("add") {
    check_grads([](ad::Tape& t, const auto& in) {
      return t.mean_all(t.square(t.add(in[0], in[1])));
    }, {x, y});
  }
  SUBCASE("sub") {
    check_grads([](ad::Tape& t, const auto& in) {
      return t.mean_all(t.square(t.sub(in[0], in[1])));
    }, {x, y});
  }
  SUBCASE("mul") {
    check_grads([](ad::Tape& t, const auto& in) {
      return t.mean_all(t.mul(in[0], in[1]));
    }, {x, y});
  }
  SUBCASE("scale and add_scalar") {
    check_grads([](ad::Tape& t, const auto& in) {
      return t.mean_all(t.square(t.add_scalar(t.scale(in[0], -1.7), 0.3)));
    }, {x});
  }
  SUBCASE("gelu") {
    check_grads([](ad::Tape& t, const auto& in) {
      return t.mean_all(t.gelu(in[0]));
    }, {x});
  }
  SUBCASE("sigmoid") {
    check_grads([](ad::Tape& t, const auto& in) {
      return t.mean_all(t.square(t.sigmoid(in[0])));
    }, {x});
  }
  SUBCASE("tanh") {
    check_grads([](ad::Tape& t, const auto& in) {
      return t.mean_all(t.square(t.tanh_(in[0])));
    }, {x});
  }
  SUBCASE("exp") {
    check_grads([](ad::Tape& t, const auto& in) {
      return t.mean_all(t.exp_(in[0]));
    }, {x});
  }
  SUBCASE("abs away from zero") {
    Tensor far = x;
    for (auto& v : far.v) v += (v >= 0 ? 0.5 : -0.5);
    check_grads([](ad::Tape& t, const auto& in) {
      return t.mean_all(t.abs_(in[0]));
    }, {far});
  }
  SUBCASE("square") {
    check_grads([](ad::Tape& t, const auto& in) {
      return t.mean_all(t.square(in[0]));
    }, {x});
  }
}

TEST_CASE("matmul gradients match central differences") {
  check_grads([](ad::Tape& t, const auto& in) {
    return t.mean_all(t.square(t.matmul(in[0], in[1])));
  }, {rand_tensor({3, 4}, 21), rand_tensor({4, 2}, 22)});
}

TEST_CASE("transpose gradients match central differences") {
  check_grads([](ad::Tape& t, const auto& in) {
    return t.mean_all(t.mul(t.transpose(in[0]), in[1]));
  }, {rand_tensor({2, 5}, 23), rand_tensor({5, 2}, 24)});
}

TEST_CASE("add_rowvec broadcasts and backpropagates to both arguments") {
  check_grads([](ad::Tape& t, const auto& in) {
    return t.mean_all(t.square(t.add_rowvec(in[0], in[1])));
  }, {rand_tensor({4, 3}, 25), rand_tensor({3}, 26)});
}

TEST_CASE("softmax_rows output rows sum to one") {
  ad::Tape tape;
  auto x = tape.leaf(rand_tensor({3, 5}, 27, 2.0));
  const Tensor& y = tape.val(tape.softmax_rows(x));
  for (int r = 0; r < 3; ++r) {
    double s = 0.0;
    for (int c = 0; c < 5; ++c) {
      double p = y.v[r * 5 + c];
      CHECK(p > 0.0);
      s += p;
    }
    CHECK(s == doctest::Approx(1.0));
  }
}

TEST_CASE("softmax_rows is invariant to a per-row shift") {
  ad::Tape tape;
  Tensor x = rand_tensor({2, 4}, 28);
  Tensor shifted = x;
  for (auto& v : shifted.v) v += 123.0;
  const Tensor& a = tape.val(tape.softmax_rows(tape.leaf(x)));
  const Tensor& b = tape.val(tape.softmax_rows(tape.leaf(shifted)));
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    CHECK(a.v[i] == doctest::Approx(b.v[i]));
  }
}

TEST_CASE("softmax_rows gradients match central differences") {
  check_grads([](ad::Tape& t, const auto& in) {
    return t.mean_all(t.mul(t.softmax_rows(in[0]), in[1]));
  }, {rand_tensor({3, 4}, 29), rand_tensor({3, 4}, 30)});
}

TEST_CASE("layer_norm normalizes rows to zero mean and unit variance") {
  ad::Tape tape;
  auto x = tape.leaf(rand_tensor({4, 8}, 31, 3.0));
  auto gain = tape.leaf(Tensor::full({8}, 1.0));
  auto bias = tape.leaf(Tensor::zeros({8}));
  const Tensor& y = tape.val(tape.layer_norm(x, gain, bias));
  for (int r = 0; r < 4; ++r) {
    double mean = 0.0, var = 0.0;
    for (int c = 0; c < 8; ++c) mean += y.v[r * 8 + c];
    mean /= 8.0;
    for (int c = 0; c < 8; ++c) {
      var += (y.v[r * 8 + c] - mean) * (y.v[r * 8 + c] - mean);
    }
    var /= 8.0;
    CHECK(std::fabs(mean) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("layer_norm gradients match central differences") {
  check_grads([](ad::Tape& t, const auto& in) {
    return t.mean_all(t.mul(t.layer_norm(in[0], in[1], in[2]), in[3]));
  }, {rand_tensor({3, 6}, 32), rand_tensor({6}, 33), rand_tensor({6}, 34),
      rand_tensor({3, 6}, 35)}, 5e-4, 1e-6);
}

TEST_CASE("reduction gradients match central differences") {
  SUBCASE("mean_all") {
    check_grads([](ad::Tape& t, const auto& in) {
      return t.mean_all(t.square(in[0]));
    }, {rand_tensor({2, 2, 3}, 36)});
  }
  SUBCASE("sum_all") {
    check_grads([](ad::Tape& t, const auto& in) {
      return t.sum_all(t.square(in[0]));
    }, {rand_tensor({5}, 37)});
  }
}

TEST_CASE("shape and indexing gradients match central differences") {
  SUBCASE("reshape") {
    check_grads([](ad::Tape& t, const auto& in) {
      return t.mean_all(t.mul(t.reshape(in[0], {6, 2}), in[1]));
    }, {rand_tensor({3, 4}, 41), rand_tensor({6, 2}, 42)});
  }
  SUBCASE("slice_rows") {
    check_grads([](ad::Tape& t, const auto& in) {
      return t.mean_all(t.square(t.slice_rows(in[0], 1, 2)));
    }, {rand_tensor({4, 3}, 43)});
  }
  SUBCASE("slice_cols") {
    check_grads([](ad::Tape& t, const auto& in) {
      return t.mean_all(t.square(t.slice_cols(in[0], 1, 3)));
    }, {rand_tensor({2, 5}, 44)});
  }
  SUBCASE("concat_rows") {
    check_grads([](ad::Tape& t, const auto& in) {
      return t.mean_all(t.square(t.concat_rows({in[0], in[1], in[2]})));
    }, {rand_tensor({1, 3}, 45), rand_tensor({2, 3}, 46), rand_tensor({1, 3}, 47)});
  }
  SUBCASE("gather_rows with a repeated id accumulates") {
    check_grads([](ad::Tape& t, const auto& in) {
      return t.mean_all(t.square(t.gather_rows(in[0], {2, 0, 2})));
    }, {rand_tensor({3, 4}, 48)});
  }
}

TEST_CASE("slice of concat recovers the original block") {
  ad::Tape tape;
  Tensor a = rand_tensor({2, 3}, 51);
  Tensor b = rand_tensor({3, 3}, 52);
  auto cat = tape.concat_rows({tape.leaf(a), tape.leaf(b)});
  const Tensor& back = tape.val(tape.slice_rows(cat, 2, 3));
  REQUIRE(back.same_shape(b));
  for (std::int64_t i = 0; i < b.numel(); ++i) CHECK(back.v[i] == b.v[i]);
}

TEST_CASE("conv2d matches a hand-computed 1x1 example") {
  // 1 input channel, 1 output channel, 1x1 kernel w=2, bias=1: y = 2x + 1.
  ad::Tape tape;
  auto x = tape.leaf(Tensor::full({1, 2, 2}, 3.0));
  auto w = tape.leaf(Tensor::full({1, 1, 1, 1}, 2.0));
  auto b = tape.leaf(Tensor::full({1}, 1.0));
  const Tensor& y = tape.val(tape.conv2d(x, w, b, 1, 0));
  REQUIRE(y.shape == std::vector<std::int64_t>{1, 2, 2});
  for (double v : y.v) CHECK(v == doctest::Approx(7.0));
}

TEST_CASE("conv2d stride-2 halves spatial dims with 3x3 kernel pad 1") {
  ad::Tape tape;
  auto x = tape.leaf(rand_tensor({2, 8, 8}, 53));
  auto w = tape.leaf(rand_tensor({3, 2, 3, 3}, 54));
  auto b = tape.leaf(Tensor::zeros({3}));
  const Tensor& y = tape.val(tape.conv2d(x, w, b, 2, 1));
  CHECK(y.shape == std::vector<std::int64_t>{3, 4, 4});
}

TEST_CASE("conv2d gradients match central differences") {
  check_grads([](ad::Tape& t, const auto& in) {
    return t.mean_all(t.square(t.conv2d(in[0], in[1], in[2], 1, 1)));
  }, {rand_tensor({2, 4, 4}, 55), rand_tensor({2, 2, 3, 3}, 56),
      rand_tensor({2}, 57)}, 5e-4, 1e-6);
}

TEST_CASE("strided conv2d gradients match central differences") {
  check_grads([](ad::Tape& t, const auto& in) {
    return t.mean_all(t.square(t.conv2d(in[0], in[1], in[2], 2, 1)));
  }, {rand_tensor({1, 4, 4}, 58), rand_tensor({2, 1, 3, 3}, 59),
      rand_tensor({2}, 60)}, 5e-4, 1e-6);
}

TEST_CASE("upsample2x repeats each pixel into a 2x2 block") {
  ad::Tape tape;
  Tensor x({1, 2, 2});
  x.v = {1.0, 2.0, 3.0, 4.0};
  const Tensor& y = tape.val(tape.upsample2x(tape.leaf(x)));
  REQUIRE(y.shape == std::vector<std::int64_t>{1, 4, 4});
  CHECK(y.v[0] == 1.0);
  CHECK(y.v[1] == 1.0);
  CHECK(y.v[4] == 1.0);
  CHECK(y.v[5] == 1.0);
  CHECK(y.v[2] == 2.0);
  CHECK(y.v[15] == 4.0);
}

TEST_CASE("upsample2x gradients match central differences") {
  check_grads([](ad::Tape& t, const auto& in) {
    return t.mean_all(t.square(t.upsample2x(in[0])));
  }, {rand_tensor({2, 3, 3}, 61)});
}

TEST_CASE("avg_pool averages non-overlapping windows") {
  ad::Tape tape;
  Tensor x({1, 2, 2});
  x.v = {1.0, 2.0, 3.0, 4.0};
  const Tensor& y = tape.val(tape.avg_pool(tape.leaf(x), 2));
  REQUIRE(y.shape == std::vector<std::int64_t>{1, 1, 1});
  CHECK(y.v[0] == doctest::Approx(2.5));
}

TEST_CASE("avg_pool gradients match central differences") {
  check_grads([](ad::Tape& t, const auto& in) {
    return t.mean_all(t.square(t.avg_pool(in[0], 2)));
  }, {rand_tensor({2, 4, 4}, 62)});
}

TEST_CASE("a small composite network differentiates end to end") {
  // linear -> gelu -> layer_norm -> linear -> mean: exercises op chaining.
  check_grads([](ad::Tape& t, const auto& in) {
    auto h = t.gelu(t.add_rowvec(t.matmul(in[0], in[1]), in[2]));
    auto n = t.layer_norm(h, in[3], in[4]);
    return t.mean_all(t.square(t.matmul(n, in[5])));
  }, {rand_tensor({2, 3}, 71), rand_tensor({3, 4}, 72), rand_tensor({4}, 73),
      rand_tensor({4}, 74), rand_tensor({4}, 75), rand_tensor({4, 2}, 76)},
      1e-3, 1e-6);
}

TEST_CASE("backward rejects non-scalar losses") {
  ad::Tape tape;
  auto x = tape.leaf(Tensor::full({2}, 1.0), true);
  CHECK_THROWS_AS(tape.backward(x), std::logic_error);
}

TEST_CASE("shape mismatches are rejected") {
  ad::Tape tape;
  auto a = tape.leaf(Tensor::zeros({2, 3}));
  auto b = tape.leaf(Tensor::zeros({3, 2}));
  CHECK_THROWS_AS(tape.add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(tape.reshape(a, {4, 2}), std::invalid_argument);
  CHECK_THROWS_AS(tape.slice_rows(a, 1, 5), std::invalid_argument);
  CHECK_THROWS_AS(tape.gather_rows(a, {7}), std::invalid_argument);
}
