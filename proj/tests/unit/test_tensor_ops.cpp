#include <doctest.h>

#include <cmath>
#include <numeric>
#include <thread>

#include "dynfuse/ops.hpp"
#include "dynfuse/parallel.hpp"
#include "test_util.hpp"

using namespace dynfuse;
using namespace dynfuse::testing;

TEST_SUITE("tensor") {

TEST_CASE("shape invariants") {
  CHECK_THROWS_AS(Tensor({1, 0, 2, 2}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({1, 1, 2, 2}, std::vector<double>(3)), std::invalid_argument);
  Tensor t({2, 3, 4, 5});
  CHECK(t.size() == 120);
  t.at(1, 2, 3, 4) = 7.0;
  CHECK(t.vec().back() == 7.0);
  CHECK_THROWS(Matrix(0, 3));
}

TEST_CASE("conv2d identity and counting window") {
  std::vector<double> v(9);
  std::iota(v.begin(), v.end(), 1.0);
  const Tensor x({1, 1, 3, 3}, v);
  CHECK(conv2d_forward(x, Kernel4D({1, 1, 1, 1}, 1.0), 1) == x);
  const Tensor y = conv2d_forward(Tensor({1, 1, 3, 3}, 1.0), Kernel4D({1, 1, 2, 2}, 1.0), 1);
  CHECK(y.shape() == Tensor::Shape{1, 1, 2, 2});
  for (double e : y.data()) CHECK(e == 4.0);
}

TEST_CASE("conv2d matches nested-loop oracle") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int stride = 1 + trial % 3;
    const Tensor x = random_tensor({2, 3, 8, 8}, rng);
    const Kernel4D k = random_kernel({5, 3, 3, 3}, rng);
    const Tensor y = conv2d_forward(x, k, stride);
    const Tensor ref = reference_conv(x, k, stride);
    REQUIRE(y.shape() == ref.shape());
    CHECK(max_abs_diff(y.data(), ref.data()) < 1e-12);
  }
}

TEST_CASE("conv2d geometry errors") {
  CHECK_THROWS_AS(conv2d_forward(Tensor({1, 2, 5, 5}), Kernel4D({1, 3, 3, 3}), 1), std::invalid_argument);
  CHECK_THROWS_AS(conv2d_forward(Tensor({1, 1, 2, 2}), Kernel4D({1, 1, 3, 3}), 1), std::invalid_argument);
  CHECK_THROWS_AS(conv2d_forward(Tensor({1, 1, 5, 5}), Kernel4D({1, 1, 3, 3}), 0), std::invalid_argument);
  CHECK(conv_output_size(107, 7, 2) == 51);
  CHECK(conv_output_size(25, 5, 2) == 11);
}

TEST_CASE("conv2d is linear in the kernel") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor({1, 4, 9, 9}, rng);
    const Kernel4D a = random_kernel({3, 4, 3, 3}, rng), b = random_kernel({3, 4, 3, 3}, rng);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    const double alpha = u(rng), beta = u(rng);
    Kernel4D m = a;
    scale(alpha, m.data());
    axpy(beta, b.data(), m.data());
    Tensor rhs = conv2d_forward(x, a, 1);
    scale(alpha, rhs.data());
    axpy(beta, conv2d_forward(x, b, 1).data(), rhs.data());
    CHECK(rel_error(conv2d_forward(x, m, 1).data(), rhs.data()) < 1e-10);
  }
}

TEST_CASE("conv2d backward") {
  std::mt19937_64 rng(5);
  SUBCASE("zero cotangent") {
    const Tensor x = random_tensor({1, 2, 6, 6}, rng);
    const Kernel4D k = random_kernel({3, 2, 3, 3}, rng);
    const auto g = conv2d_backward(Tensor({1, 3, 4, 4}), x, k, 1);
    CHECK(max_abs_diff(g.grad_input.data(), Tensor(x.shape()).data()) == 0.0);
    CHECK(max_abs_diff(g.grad_kernel.data(), Kernel4D(k.shape()).data()) == 0.0);
  }
  SUBCASE("identity kernel passes the gradient through") {
    const Tensor x = random_tensor({1, 1, 5, 5}, rng);
    const Tensor go = random_tensor({1, 1, 5, 5}, rng);
    CHECK(conv2d_backward(go, x, Kernel4D({1, 1, 1, 1}, 1.0), 1).grad_input == go);
  }
  SUBCASE("finite differences") {
    for (int trial = 0; trial < 100; ++trial) {
      const int stride = 1 + trial % 2;
      Tensor x = random_tensor({2, 2, 6, 6}, rng);
      Kernel4D k = random_kernel({3, 2, 3, 3}, rng);
      const Tensor go = random_tensor(conv2d_forward(x, k, stride).shape(), rng);
      const auto loss = [&] { return dot(go.data(), conv2d_forward(x, k, stride).data()); };
      const auto g = conv2d_backward(go, x, k, stride);
      CHECK(rel_error(g.grad_input.data(), numeric_grad(x.data(), loss)) < 1e-6);
      CHECK(rel_error(g.grad_kernel.data(), numeric_grad(k.data(), loss)) < 1e-6);
    }
  }
  CHECK_THROWS_AS(conv2d_backward(Tensor({1, 1, 3, 3}), Tensor({1, 1, 4, 4}), Kernel4D({1, 1, 3, 3}), 1),
                  std::invalid_argument);
}

TEST_CASE("conv counter counts single-image convolutions") {
  const auto before = conv_invocations();
  conv2d_forward(Tensor({3, 1, 4, 4}), Kernel4D({1, 1, 3, 3}), 1);
  CHECK(conv_invocations() - before == 3);
}

TEST_CASE("relu") {
  const Tensor x({1, 1, 1, 3}, {-1.0, 0.0, 2.0});
  CHECK(relu(x).vec() == std::vector<double>{0.0, 0.0, 2.0});
  const Tensor pos({1, 1, 1, 3}, {0.5, 1.0, 2.0});
  CHECK(relu(pos) == pos);
  const Tensor g = relu_backward(Tensor({1, 1, 1, 3}, 1.0), x);
  CHECK(g.vec() == std::vector<double>{0.0, 0.0, 1.0});

  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor in = random_tensor({1, 2, 3, 3}, rng);
    for (double& v : in.data())
      if (std::abs(v) < 1e-3) v = 0.5;
    const Tensor go = random_tensor(in.shape(), rng);
    const auto loss = [&] { return dot(go.data(), relu(in).data()); };
    CHECK(rel_error(relu_backward(go, in).data(), numeric_grad(in.data(), loss)) < 1e-6);
  }
}

TEST_CASE("global average pooling") {
  CHECK(global_avg_pool(Tensor({1, 1, 3, 3}, 7.0)).vec() == std::vector<double>{7.0});
  CHECK(global_avg_pool(Tensor({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0})).vec() == std::vector<double>{2.5});
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = random_tensor({2, 3, 4, 5}, rng);
    const Tensor y = global_avg_pool(x);
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (int i = 0; i < 4; ++i)
          for (int j = 0; j < 5; ++j) s += x.at(n, c, i, j);
        CHECK(std::abs(y.at(n, c, 0, 0) - s / 20.0) < 1e-12);
      }
    const Tensor go = random_tensor(y.shape(), rng);
    const auto loss = [&] { return dot(go.data(), global_avg_pool(x).data()); };
    CHECK(rel_error(global_avg_pool_backward(go, x.shape()).data(), numeric_grad(x.data(), loss)) < 1e-6);
  }
}

TEST_CASE("fully connected") {
  Matrix eye(3, 3);
  for (int i = 0; i < 3; ++i) eye(i, i) = 1.0;
  const std::vector<double> x{1.0, -2.0, 3.0}, zero(3, 0.0), b{4.0, 5.0, 6.0};
  CHECK(fully_connected(x, eye, zero) == x);
  CHECK(fully_connected(x, Matrix(3, 3), b) == b);
  CHECK_THROWS_AS(fully_connected(std::vector<double>{1.0}, eye, zero), std::invalid_argument);

  std::mt19937_64 rng(10);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix w(4, 5);
    for (double& v : w.data()) v = n(rng);
    std::vector<double> xin(5), bias(4), go(4);
    for (double& v : xin) v = n(rng);
    for (double& v : bias) v = n(rng);
    for (double& v : go) v = n(rng);
    const auto loss = [&] { return dot(go, fully_connected(xin, w, bias)); };
    const auto g = fully_connected_backward(go, xin, w);
    CHECK(rel_error(g.grad_x, numeric_grad(xin, loss)) < 1e-6);
    CHECK(rel_error(g.grad_weights.data(), numeric_grad(w.data(), loss)) < 1e-6);
    CHECK(rel_error(g.grad_bias, numeric_grad(bias, loss)) < 1e-6);
  }
}

TEST_CASE("softmax") {
  const auto half = softmax(std::vector<double>{0.0, 0.0});
  CHECK(half[0] == 0.5);
  CHECK(half[1] == 0.5);
  for (double v : softmax(std::vector<double>{4.0, 4.0, 4.0})) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  // Extended-precision oracle.
  const auto y = softmax(std::vector<double>{1.0, 2.0});
  const long double e1 = std::exp(1.0L), e2 = std::exp(2.0L);
  CHECK(std::abs(static_cast<long double>(y[0]) - e1 / (e1 + e2)) < 1e-15L);
  CHECK(std::abs(static_cast<long double>(y[1]) - e2 / (e1 + e2)) < 1e-15L);

  const auto big = softmax(std::vector<double>{1000.0, 1001.0});
  CHECK(std::isfinite(big[0]));
  CHECK(std::abs(big[0] + big[1] - 1.0) < 1e-12);

  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> x(4), go(4);
    for (double& v : x) v = u(rng);
    for (double& v : go) v = u(rng);
    const auto s = softmax(x);
    double sum = 0.0;
    for (double v : s) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
    const auto loss = [&] { return dot(go, softmax(x)); };
    CHECK(rel_error(softmax_backward(go, s), numeric_grad(x, loss)) < 1e-6);
  }
}

TEST_CASE("max pooling") {
  const auto c = maxpool2d(Tensor({1, 1, 4, 4}, 3.0), 2, 2);
  for (double v : c.output.data()) CHECK(v == 3.0);
  CHECK(maxpool2d(Tensor({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0}), 2, 2).output.vec() == std::vector<double>{4.0});
  CHECK_THROWS_AS(maxpool2d(Tensor({1, 1, 2, 2}), 3, 1), std::invalid_argument);

  // Ties go to the first maximum in scan order.
  const auto tie = maxpool2d(Tensor({1, 1, 2, 2}, 1.0), 2, 2);
  CHECK(tie.argmax.front() == 0);

  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = random_tensor({1, 2, 7, 7}, rng);
    const auto r = maxpool2d(x, 3, 2);
    for (int ch = 0; ch < 2; ++ch)
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          double m = -1e300;
          for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) m = std::max(m, x.at(0, ch, 2 * i + a, 2 * j + b));
          CHECK(r.output.at(0, ch, i, j) == m);
        }
    const Tensor go = random_tensor(r.output.shape(), rng);
    const auto loss = [&] { return dot(go.data(), maxpool2d(x, 3, 2).output.data()); };
    CHECK(rel_error(maxpool2d_backward(go, r, x.shape()).data(), numeric_grad(x.data(), loss)) < 1e-6);
  }
}

TEST_CASE("center crop, concat and slice") {
  std::mt19937_64 rng(14);
  Tensor x = random_tensor({1, 2, 5, 5}, rng);
  const Tensor c = center_crop(x, 3, 3);
  CHECK(c.at(0, 1, 0, 0) == x.at(0, 1, 1, 1));
  const Tensor go = random_tensor(c.shape(), rng);
  const auto loss = [&] { return dot(go.data(), center_crop(x, 3, 3).data()); };
  CHECK(rel_error(center_crop_backward(go, x.shape()).data(), numeric_grad(x.data(), loss)) < 1e-9);

  const Tensor y = random_tensor({1, 3, 5, 5}, rng);
  const Tensor cat = concat_channels(x, y);
  CHECK(cat.dim(1) == 5);
  CHECK(slice_channels(cat, 0, 2) == x);
  CHECK(slice_channels(cat, 2, 5) == y);
  CHECK_THROWS_AS(concat_channels(x, Tensor({1, 1, 4, 4})), std::invalid_argument);
  CHECK_THROWS_AS(add(x, y), std::invalid_argument);
}

TEST_CASE("every op keeps finite inputs finite") {
  std::mt19937_64 rng(15);
  const Tensor x = random_tensor({1, 2, 6, 6}, rng, -1e3, 1e3);
  CHECK(all_finite(conv2d_forward(x, random_kernel({2, 2, 3, 3}, rng), 1).data()));
  CHECK(all_finite(relu(x).data()));
  CHECK(all_finite(global_avg_pool(x).data()));
  CHECK(all_finite(maxpool2d(x, 2, 2).output.data()));
  CHECK(all_finite(softmax(x.data())));
}

TEST_CASE("parallel_for is deterministic and rethrows") {
  std::vector<double> a(1000), b(1000);
  parallel_for(a.size(), 1, [&](std::size_t i) { a[i] = std::sin(static_cast<double>(i)); });
  parallel_for(b.size(), 4, [&](std::size_t i) { b[i] = std::sin(static_cast<double>(i)); });
  CHECK(a == b);
  CHECK_THROWS_AS(parallel_for(10, 3, [](std::size_t i) { if (i == 7) throw std::runtime_error("x"); }),
                  std::runtime_error);
}

TEST_CASE("batch-parallel convolution is bit-identical to sequential") {
  std::mt19937_64 rng(16);
  const Tensor x = random_tensor({4, 2, 6, 6}, rng);
  const Kernel4D k = random_kernel({3, 2, 3, 3}, rng);
  const Tensor whole = conv2d_forward(x, k, 1);
  std::vector<Tensor> parts(4);
  parallel_for(4, 4, [&](std::size_t n) {
    Tensor one({1, 2, 6, 6});
    std::copy(x.data().begin() + static_cast<long>(n * 72), x.data().begin() + static_cast<long>((n + 1) * 72),
              one.data().begin());
    parts[n] = conv2d_forward(one, k, 1);
  });
  for (int n = 0; n < 4; ++n)
    for (int o = 0; o < 3; ++o)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) CHECK(parts[static_cast<std::size_t>(n)].at(0, o, i, j) == whole.at(n, o, i, j));
}

TEST_CASE("relu and max pooling propagate NaN") {
  Tensor x({1, 1, 2, 2}, 1.0);
  x.at(0, 0, 0, 1) = std::nan("");
  const auto r = relu(x);
  CHECK(std::isnan(r.at(0, 0, 0, 1)));
  CHECK(r.at(0, 0, 0, 0) == 1.0);
  CHECK(std::isnan(maxpool2d(x, 2, 2).output.at(0, 0, 0, 0)));
}

}  // TEST_SUITE
