#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "fbn/autodiff.hpp"

using namespace fbn;

namespace {

Tensor random_tensor(const std::vector<size_t>& shape, std::mt19937_64& rng,
                     double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor t(shape);
  for (size_t i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

std::vector<int> random_labels(size_t n, size_t k, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, int(k) - 1);
  std::vector<int> l(n);
  for (auto& v : l) v = d(rng);
  return l;
}

}  // namespace

TEST_CASE("sum and square have exact analytic gradients") {
  Tensor x({2, 3}, {1, -2, 3, 0.5, -0.25, 4});
  Tape tape;
  int xi = tape.input(x, true);
  int sq = tape.square_op(xi);
  int loss = tape.sum(sq);
  CHECK(tape.value(loss)[0] == doctest::Approx(1 + 4 + 9 + 0.25 + 0.0625 + 16));
  tape.backward(loss);
  const Tensor& g = tape.grad(xi);
  for (size_t i = 0; i < x.size(); ++i) CHECK(g[i] == doctest::Approx(2 * x[i]));
}

TEST_CASE("backward is linear in the upstream seed via add_op") {
  // loss = sum(x^2) + sum(x^2) doubles every gradient entry exactly.
  Tensor x({4}, {1.5, -0.5, 2.0, -3.0});
  Tape tape;
  int xi = tape.input(x, true);
  int a = tape.sum(tape.square_op(xi));
  int b = tape.sum(tape.square_op(xi));
  int loss = tape.add_op(a, b);
  tape.backward(loss);
  const Tensor& g = tape.grad(xi);
  for (size_t i = 0; i < x.size(); ++i) CHECK(g[i] == 4.0 * x[i]);
}

TEST_CASE("linear layer matches finite differences") {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({4, 5}, rng);
  Parameter W(random_tensor({3, 5}, rng));
  Parameter b(random_tensor({3}, rng));
  std::vector<int> labels = random_labels(4, 3, rng);

  auto loss_of = [&](const Tensor& xin) {
    Tape t;
    int xi = t.input(xin);
    int y = t.linear(xi, W, b);
    return t.value(t.softmax_cross_entropy(y, labels))[0];
  };

  Tape tape;
  int xi = tape.input(x, true);
  int y = tape.linear(xi, W, b);
  int loss = tape.softmax_cross_entropy(y, labels);
  W.zero_grad();
  b.zero_grad();
  tape.backward(loss);

  auto rep = finite_difference_check(loss_of, tape.grad(xi), x, 1e-6, 1e-6);
  CHECK(rep.passed);

  // weight gradient, via perturbing W in the closure
  auto loss_of_w = [&](const Tensor& w) {
    Parameter Wp(w);
    Tape t;
    int xi2 = t.input(x);
    int y2 = t.linear(xi2, Wp, b);
    return t.value(t.softmax_cross_entropy(y2, labels))[0];
  };
  rep = finite_difference_check(loss_of_w, W.grad, W.value, 1e-6, 1e-6);
  CHECK(rep.passed);

  auto loss_of_b = [&](const Tensor& bv) {
    Parameter bp(bv);
    Tape t;
    int xi2 = t.input(x);
    int y2 = t.linear(xi2, W, bp);
    return t.value(t.softmax_cross_entropy(y2, labels))[0];
  };
  rep = finite_difference_check(loss_of_b, b.grad, b.value, 1e-6, 1e-6);
  CHECK(rep.passed);
}

TEST_CASE("conv2d matches finite differences") {
  std::mt19937_64 rng(12);
  Tensor x = random_tensor({2, 2, 5, 5}, rng);
  Parameter K(random_tensor({3, 2, 3, 3}, rng));
  Parameter b(random_tensor({3}, rng));
  std::vector<int> labels = {1, 0};

  auto net = [&](Tape& t, int xi, Parameter& Kp, Parameter& bp) {
    int y = t.conv2d(xi, Kp, bp, 1, 1);
    y = t.flatten(y);
    // project to 3 logits by summing channels apart: reuse sum-of-squares loss
    return t.sum(t.square_op(y));
  };

  auto loss_of = [&](const Tensor& xin) {
    Tape t;
    return t.value(net(t, t.input(xin), K, b))[0];
  };

  Tape tape;
  int xi = tape.input(x, true);
  int loss = net(tape, xi, K, b);
  K.zero_grad();
  b.zero_grad();
  tape.backward(loss);

  auto rep = finite_difference_check(loss_of, tape.grad(xi), x, 1e-5, 1e-5);
  CHECK(rep.passed);

  auto loss_of_k = [&](const Tensor& k) {
    Parameter Kp(k);
    Tape t;
    return t.value(net(t, t.input(x), Kp, b))[0];
  };
  rep = finite_difference_check(loss_of_k, K.grad, K.value, 1e-5, 1e-5);
  CHECK(rep.passed);

  auto loss_of_b = [&](const Tensor& bv) {
    Parameter bp(bv);
    Tape t;
    return t.value(net(t, t.input(x), K, bp))[0];
  };
  rep = finite_difference_check(loss_of_b, b.grad, b.value, 1e-5, 1e-5);
  CHECK(rep.passed);
  (void)labels;
}

TEST_CASE("conv2d constant-input oracle") {
  // All-ones 3x3 kernel over a constant image, no padding: every output
  // element is C*9*v + bias.
  Tensor x = Tensor::full({1, 2, 6, 6}, 0.5);
  Parameter K(Tensor::ones({1, 2, 3, 3}));
  Parameter b(Tensor({1}, {0.25}));
  Tape tape;
  int y = tape.conv2d(tape.input(x), K, b, 1, 0);
  const Tensor& yv = tape.value(y);
  CHECK(yv.shape() == std::vector<size_t>{1, 1, 4, 4});
  for (size_t i = 0; i < yv.size(); ++i)
    CHECK(yv[i] == doctest::Approx(2 * 9 * 0.5 + 0.25));
}

TEST_CASE("relu forward and gradient routing") {
  Tensor x({5}, {-2.0, -0.5, 0.0, 0.5, 2.0});
  Tape tape;
  int xi = tape.input(x, true);
  int y = tape.relu(xi);
  const Tensor& yv = tape.value(y);
  CHECK(yv[0] == 0.0);
  CHECK(yv[3] == 0.5);
  int loss = tape.sum(y);
  tape.backward(loss);
  const Tensor& g = tape.grad(xi);
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 0.0);
  CHECK(g[3] == 1.0);
  CHECK(g[4] == 1.0);
}

TEST_CASE("relu matches finite differences away from zero") {
  std::mt19937_64 rng(13);
  Tensor x = random_tensor({3, 7}, rng);
  auto loss_of = [&](const Tensor& xin) {
    Tape t;
    return t.value(t.sum(t.square_op(t.relu(t.input(xin)))))[0];
  };
  Tape tape;
  int xi = tape.input(x, true);
  int loss = tape.sum(tape.square_op(tape.relu(xi)));
  tape.backward(loss);
  auto rep = finite_difference_check(loss_of, tape.grad(xi), x, 1e-6, 1e-6,
                                     [&](size_t i) { return std::abs(x[i]) < 1e-3; });
  CHECK(rep.passed);
  CHECK(rep.checked > 0);
}

TEST_CASE("max pool forward, ties routed to the lowest flat index") {
  Tensor x({1, 1, 2, 2}, {3.0, 3.0, 1.0, 3.0});
  Tape tape;
  int xi = tape.input(x, true);
  int y = tape.max_pool2d(xi, 2, 2);
  CHECK(tape.value(y).size() == 1);
  CHECK(tape.value(y)[0] == 3.0);
  tape.backward(tape.sum(y));
  const Tensor& g = tape.grad(xi);
  CHECK(g[0] == 1.0);  // first of the tied maxima wins
  CHECK(g[1] == 0.0);
  CHECK(g[3] == 0.0);
}

TEST_CASE("max pool matches finite differences on distinct values") {
  std::mt19937_64 rng(14);
  Tensor x = random_tensor({2, 3, 4, 4}, rng);
  auto loss_of = [&](const Tensor& xin) {
    Tape t;
    return t.value(t.sum(t.square_op(t.max_pool2d(t.input(xin), 2, 2))))[0];
  };
  Tape tape;
  int xi = tape.input(x, true);
  int loss = tape.sum(tape.square_op(tape.max_pool2d(xi, 2, 2)));
  tape.backward(loss);
  auto rep = finite_difference_check(loss_of, tape.grad(xi), x, 1e-6, 1e-6);
  CHECK(rep.passed);
}

TEST_CASE("softmax cross entropy on uniform logits equals ln K") {
  Tensor logits = Tensor::zeros({4, 10});
  std::vector<int> labels = {0, 3, 7, 9};
  Tape tape;
  int li = tape.input(logits, true);
  int loss = tape.softmax_cross_entropy(li, labels);
  CHECK(tape.value(loss)[0] == doctest::Approx(std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("softmax cross entropy is shift invariant and stable") {
  Tensor a({2, 3}, {1, 2, 3, -1, 0, 1});
  Tensor b = a;
  for (size_t i = 0; i < 3; ++i) b[i] += 1000.0;  // shift first row only
  std::vector<int> labels = {2, 0};
  Tape t1, t2;
  double l1 = t1.value(t1.softmax_cross_entropy(t1.input(a), labels))[0];
  double l2 = t2.value(t2.softmax_cross_entropy(t2.input(b), labels))[0];
  CHECK(std::isfinite(l2));
  CHECK(l1 == doctest::Approx(l2).epsilon(1e-9));
}

TEST_CASE("softmax cross entropy gradient matches finite differences") {
  std::mt19937_64 rng(15);
  Tensor logits = random_tensor({5, 4}, rng, 2.0);
  std::vector<int> labels = random_labels(5, 4, rng);
  auto loss_of = [&](const Tensor& l) {
    Tape t;
    return t.value(t.softmax_cross_entropy(t.input(l), labels))[0];
  };
  Tape tape;
  int li = tape.input(logits, true);
  int loss = tape.softmax_cross_entropy(li, labels);
  tape.backward(loss);
  auto rep = finite_difference_check(loss_of, tape.grad(li), logits, 1e-6, 1e-6);
  CHECK(rep.passed);

  // gradient rows sum to zero (softmax simplex property)
  const Tensor& g = tape.grad(li);
  for (size_t n = 0; n < 5; ++n) {
    double s = 0;
    for (size_t k = 0; k < 4; ++k) s += g[n * 4 + k];
    CHECK(s == doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("flatten is a pure reshape with pass-through gradient") {
  std::mt19937_64 rng(16);
  Tensor x = random_tensor({2, 3, 2, 2}, rng);
  Tape tape;
  int xi = tape.input(x, true);
  int f = tape.flatten(xi);
  CHECK(tape.value(f).shape() == std::vector<size_t>{2, 12});
  CHECK(tape.value(f).vec() == x.vec());
  tape.backward(tape.sum(tape.square_op(f)));
  const Tensor& g = tape.grad(xi);
  for (size_t i = 0; i < x.size(); ++i) CHECK(g[i] == doctest::Approx(2 * x[i]));
}

TEST_CASE("replaying the same graph produces bitwise identical gradients") {
  std::mt19937_64 rng(17);
  Tensor x = random_tensor({3, 1, 8, 8}, rng);
  Parameter K(random_tensor({2, 1, 3, 3}, rng));
  Parameter b(random_tensor({2}, rng));
  std::vector<int> labels = {0, 1, 1};

  auto run = [&]() {
    K.zero_grad();
    b.zero_grad();
    Tape t;
    int h = t.conv2d(t.input(x), K, b, 1, 1);
    h = t.relu(h);
    h = t.max_pool2d(h, 2, 2);
    h = t.flatten(h);
    int loss = t.sum(t.square_op(h));
    t.backward(loss);
    return std::make_pair(t.value(loss)[0], K.grad.vec());
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  CHECK(g1 == g2);
  (void)labels;
}

TEST_CASE("parameter gradients accumulate across backward calls") {
  Parameter w(Tensor({2}, {1.0, 2.0}));
  Tensor x({1, 2}, {1.0, 1.0});
  Parameter b(Tensor::zeros({1}));
  Parameter W(Tensor({1, 2}, {3.0, 4.0}));
  for (int rep = 0; rep < 2; ++rep) {
    Tape t;
    int y = t.linear(t.input(x), W, b);
    t.backward(t.sum(y));
  }
  CHECK(W.grad[0] == 2.0);  // two backward passes, dL/dW = x each time
  CHECK(W.grad[1] == 2.0);
  CHECK(b.grad[0] == 2.0);
  (void)w;
}

TEST_CASE("gradient queries on untracked leaves are rejected") {
  Tape tape;
  int xi = tape.input(Tensor({2}, {1.0, 2.0}), false);
  int loss = tape.sum(xi);
  tape.backward(loss);
  CHECK_THROWS_AS((void)tape.grad(xi), std::logic_error);
}

TEST_CASE("backward requires a scalar loss") {
  Tape tape;
  int xi = tape.input(Tensor({3}, {1.0, 2.0, 3.0}), true);
  int y = tape.square_op(xi);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}
