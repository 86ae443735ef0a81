#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "calgp/layers.hpp"
#include "calgp/rng.hpp"
#include "test_util.hpp"

using namespace calgp;
using testutil::central_diff;
using testutil::random_tensor;
using testutil::rel_err;

TEST_CASE("conv2d: zero input gives zero output") {
  Tensor in({1, 1, 3, 3});
  Rng rng(1);
  Tensor w = random_tensor({2, 1, 2, 2}, rng);
  Tensor b({2});
  auto [out, cache] = conv2d_forward(in, w, b);
  for (double v : out.values()) CHECK(v == 0.0);
}

TEST_CASE("conv2d: 1x1 kernel is affine scaling") {
  Tensor in({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor w({1, 1, 1, 1}, {2});
  Tensor b({1}, {1});
  auto [out, cache] = conv2d_forward(in, w, b);
  CHECK(out(0, 0, 0, 0) == 3.0);
  CHECK(out(0, 0, 0, 1) == 5.0);
  CHECK(out(0, 0, 1, 0) == 7.0);
  CHECK(out(0, 0, 1, 1) == 9.0);
}

TEST_CASE("conv2d: equals the six-loop reference") {
  Rng rng(2);
  Tensor in = random_tensor({2, 3, 8, 8}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  Tensor b = random_tensor({4}, rng);
  auto [out, cache] = conv2d_forward(in, w, b);
  Tensor ref = testutil::conv2d_naive(in, w, b);
  REQUIRE(out.shape() == ref.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    CHECK(std::abs(out[i] - ref[i]) < 1e-12);
}

TEST_CASE("conv2d: shape errors name the offending dimension") {
  Tensor in({1, 2, 3, 3});
  Tensor w({1, 3, 2, 2});
  Tensor b({1});
  CHECK_THROWS_WITH_AS(conv2d_forward(in, w, b),
                       doctest::Contains("channel dim"), std::invalid_argument);
  Tensor w2({1, 2, 4, 2});
  CHECK_THROWS_WITH_AS(conv2d_forward(in, w2, b),
                       doctest::Contains("kernel height"), std::invalid_argument);
}

TEST_CASE("conv2d backward: zero upstream gradient") {
  Rng rng(3);
  Tensor in = random_tensor({1, 2, 4, 4}, rng);
  Tensor w = random_tensor({3, 2, 2, 2}, rng);
  Tensor b = random_tensor({3}, rng);
  auto [out, cache] = conv2d_forward(in, w, b);
  Tensor gz(out.shape());
  auto g = conv2d_backward(gz, cache);
  for (double v : g.input.values()) CHECK(v == 0.0);
  for (double v : g.weights.values()) CHECK(v == 0.0);
  for (double v : g.bias.values()) CHECK(v == 0.0);
}

TEST_CASE("conv2d backward: scalar chain rule") {
  Tensor in({1, 1, 1, 1}, {3.5});
  Tensor w({1, 1, 1, 1}, {-2.0});
  Tensor b({1}, {0.25});
  auto [out, cache] = conv2d_forward(in, w, b);
  Tensor g1({1, 1, 1, 1}, {1.0});
  auto g = conv2d_backward(g1, cache);
  CHECK(g.weights[0] == 3.5);
  CHECK(g.input[0] == -2.0);
  CHECK(g.bias[0] == 1.0);
}

TEST_CASE("conv2d backward: stale cache rejected") {
  Rng rng(4);
  Tensor in = random_tensor({1, 1, 4, 4}, rng);
  Tensor w = random_tensor({1, 1, 2, 2}, rng);
  Tensor b({1});
  auto [out, cache] = conv2d_forward(in, w, b);
  Tensor bad({1, 1, 2, 2});
  CHECK_THROWS_AS(conv2d_backward(bad, cache), std::invalid_argument);
}

// Scalar objective sum(R . conv(in, w, b)) for finite-difference probes.
static double conv_probe(const Tensor& in, const Tensor& w, const Tensor& b,
                         const Tensor& r) {
  auto [out, cache] = conv2d_forward(in, w, b);
  return dot(out.values(), r.values());
}

TEST_CASE("conv2d backward: matches central finite differences") {
  Rng rng(5);
  Tensor in = random_tensor({2, 2, 5, 5}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  Tensor b = random_tensor({3}, rng);
  auto [out, cache] = conv2d_forward(in, w, b);
  Tensor r = random_tensor(out.shape(), rng);
  auto g = conv2d_backward(r, cache);

  const double h = 1e-5;
  auto f_in = [&] { return conv_probe(in, w, b, r); };
  for (std::size_t i = 0; i < in.size(); i += 7) {
    const double fd = central_diff(f_in, &in[i], h);
    CHECK(rel_err(g.input[i], fd) < 1e-4);
  }
  for (std::size_t i = 0; i < w.size(); i += 5) {
    const double fd = central_diff(f_in, &w[i], h);
    CHECK(rel_err(g.weights[i], fd) < 1e-4);
  }
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double fd = central_diff(f_in, &b[i], h);
    CHECK(rel_err(g.bias[i], fd) < 1e-4);
  }
}

TEST_CASE("maxpool2: forward and argmax routing") {
  Tensor in({1, 1, 2, 2}, {1, 2, 3, 4});
  auto [out, cache] = maxpool2_forward(in);
  CHECK(out.size() == 1);
  CHECK(out[0] == 4.0);
  Tensor g1({1, 1, 1, 1}, {1.0});
  Tensor gin = maxpool2_backward(g1, cache);
  CHECK(gin(0, 0, 0, 0) == 0.0);
  CHECK(gin(0, 0, 1, 1) == 1.0);
}

TEST_CASE("maxpool2: ties route to the lowest flat index") {
  Tensor in = Tensor::full({1, 1, 2, 2}, 7.0);
  auto [out, cache] = maxpool2_forward(in);
  CHECK(out[0] == 7.0);
  Tensor g1({1, 1, 1, 1}, {2.5});
  Tensor gin = maxpool2_backward(g1, cache);
  CHECK(gin(0, 0, 0, 0) == 2.5);
  CHECK(gin(0, 0, 0, 1) == 0.0);
  CHECK(gin(0, 0, 1, 0) == 0.0);
  CHECK(gin(0, 0, 1, 1) == 0.0);
}

TEST_CASE("maxpool2: odd spatial dimension rejected") {
  Tensor in({1, 1, 3, 4});
  CHECK_THROWS_WITH_AS(maxpool2_forward(in), doctest::Contains("odd"),
                       std::invalid_argument);
}

TEST_CASE("maxpool2 backward: finite differences away from ties") {
  Rng rng(6);
  Tensor in = random_tensor({1, 2, 4, 4}, rng);
  auto [out, cache] = maxpool2_forward(in);
  Tensor r = random_tensor(out.shape(), rng);
  Tensor gin = maxpool2_backward(r, cache);
  auto f = [&] {
    auto [o, c] = maxpool2_forward(in);
    return dot(o.values(), r.values());
  };
  const double h = 1e-5;
  const std::size_t hh = in.dim(2), ww = in.dim(3);
  int checked = 0;
  for (std::size_t plane = 0; plane < in.dim(0) * in.dim(1); ++plane) {
    for (std::size_t i = 0; i < hh; ++i) {
      for (std::size_t j = 0; j < ww; ++j) {
        const std::size_t idx = plane * hh * ww + i * ww + j;
        // tie filter: skip coordinates within 1e-3 of their window maximum
        // unless they are the strict argmax by more than 1e-3
        double wmax = -1e300, wsecond = -1e300;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const double v =
                in[plane * hh * ww + ((i / 2) * 2 + di) * ww + (j / 2) * 2 + dj];
            if (v > wmax) {
              wsecond = wmax;
              wmax = v;
            } else if (v > wsecond) {
              wsecond = v;
            }
          }
        const bool is_max = in[idx] == wmax;
        if (is_max && wmax - wsecond < 1e-3) continue;
        if (!is_max && wmax - in[idx] < 1e-3) continue;
        const double fd = central_diff(f, &in[idx], h);
        CHECK(rel_err(gin[idx], fd) < 1e-4);
        ++checked;
      }
    }
  }
  CHECK(checked > 20);
}

TEST_CASE("relu forward/backward") {
  Tensor in({1, 4}, {-1.0, 0.0, 0.5, 2.0});
  auto [out, cache] = relu_forward(in);
  CHECK(out[0] == 0.0);
  CHECK(out[1] == 0.0);
  CHECK(out[2] == 0.5);
  CHECK(out[3] == 2.0);
  Tensor g({1, 4}, {1, 1, 1, 1});
  Tensor gin = relu_backward(g, cache);
  CHECK(gin[0] == 0.0);
  CHECK(gin[1] == 0.0);  // subgradient 0 at 0
  CHECK(gin[2] == 1.0);
  CHECK(gin[3] == 1.0);
}

TEST_CASE("dense: forward and backward match finite differences") {
  Rng rng(7);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor w = random_tensor({4, 5}, rng);
  Tensor b = random_tensor({5}, rng);
  auto [out, cache] = dense_forward(x, w, b);
  REQUIRE(out.shape() == std::vector<std::size_t>{3, 5});
  Tensor r = random_tensor(out.shape(), rng);
  auto g = dense_backward(r, cache);
  auto f = [&] {
    auto [o, c] = dense_forward(x, w, b);
    return dot(o.values(), r.values());
  };
  const double h = 1e-5;
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(rel_err(g.input[i], central_diff(f, &x[i], h)) < 1e-4);
  for (std::size_t i = 0; i < w.size(); ++i)
    CHECK(rel_err(g.weights[i], central_diff(f, &w[i], h)) < 1e-4);
  for (std::size_t i = 0; i < b.size(); ++i)
    CHECK(rel_err(g.bias[i], central_diff(f, &b[i], h)) < 1e-4);
}

TEST_CASE("softmax cross entropy: uniform logits give ln Q") {
  Tensor logits({2, 10});
  Tensor onehot({2, 10});
  onehot(0, 3) = 1.0;
  onehot(1, 7) = 1.0;
  auto [loss, grad] = softmax_cross_entropy(logits, onehot);
  CHECK(loss == doctest::Approx(std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("softmax cross entropy: saturated correct class gives ~0 loss") {
  Tensor logits({1, 4});
  Tensor onehot({1, 4});
  onehot(0, 2) = 1.0;
  logits(0, 2) = 1e6;
  auto [loss, grad] = softmax_cross_entropy(logits, onehot);
  CHECK(loss >= 0.0);
  CHECK(loss < 1e-9);
}

TEST_CASE("softmax cross entropy: non-one-hot rows rejected") {
  Tensor logits({1, 3});
  Tensor bad({1, 3}, {0.5, 0.5, 0.0});
  CHECK_THROWS_WITH_AS(softmax_cross_entropy(logits, bad),
                       doctest::Contains("one-hot"), std::invalid_argument);
  Tensor bad2({1, 3}, {1.0, 1.0, 0.0});
  CHECK_THROWS_AS(softmax_cross_entropy(logits, bad2), std::invalid_argument);
}

TEST_CASE("softmax cross entropy: gradient matches finite differences") {
  Rng rng(8);
  Tensor logits = random_tensor({4, 6}, rng);
  Tensor onehot({4, 6});
  for (std::size_t i = 0; i < 4; ++i) onehot(i, rng.below(6)) = 1.0;
  auto [loss, grad] = softmax_cross_entropy(logits, onehot);
  auto f = [&] { return softmax_cross_entropy(logits, onehot).first; };
  const double h = 1e-5;
  for (std::size_t i = 0; i < logits.size(); ++i)
    CHECK(rel_err(grad[i], central_diff(f, &logits[i], h)) < 1e-4);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(9);
  Tensor logits = random_tensor({5, 7}, rng, 3.0);
  Tensor p = softmax_rows(logits);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 7; ++j) {
      CHECK(p(i, j) >= 0.0);
      s += p(i, j);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}
