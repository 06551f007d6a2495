#include <doctest.h>

#include "darcot/ops.hpp"

using darcot::ContractViolation;
using darcot::Shape;
using darcot::Tape;
using darcot::Tensor;
namespace ops = darcot::ops;

using T = Tensor<double>;

TEST_CASE("tensor basics: shape/data coupling") {
  T t = T::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK_THROWS_AS(T::from({2, 2}, {1, 2, 3}), ContractViolation);
  T s = T::scalar(4.0);
  CHECK(s.is_scalar());
  CHECK(s.item() == 4.0);
}

TEST_CASE("backward: sum gradient is ones") {
  T x = T::from({3}, {5, -2, 7});
  x.set_requires_grad(true);
  Tape<double> tape;
  T loss = ops::sum(x);
  tape.backward(loss);
  auto g = x.grad();
  CHECK(g == std::vector<double>{1, 1, 1});
}

TEST_CASE("backward: l1 subgradient uses sign, 0 at 0") {
  T x = T::from({3}, {2, -3, 0});
  x.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(ops::l1_norm(x));
  auto g = x.grad();
  CHECK(g == std::vector<double>{1, -1, 0});
}

TEST_CASE("backward: l2 gradient matches x/|x|") {
  T x = T::from({2}, {3, 4});
  x.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(ops::l2_norm(x));
  auto g = x.grad();
  CHECK(g[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(g[1] == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("backward contract: loss must be scalar") {
  T x = T::from({2}, {1, 2});
  x.set_requires_grad(true);
  Tape<double> tape;
  T y = ops::mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), ContractViolation);
}

TEST_CASE("backward contract: tape cannot be consumed twice") {
  T x = T::from({2}, {1, 2});
  x.set_requires_grad(true);
  Tape<double> tape;
  T loss = ops::sum(x);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), ContractViolation);
  tape.reset();  // explicit reset allows reuse of the object
}

TEST_CASE("shared subexpressions accumulate additively") {
  // Oracle: evaluate the same function with the shared node duplicated, so
  // each path owns a private copy; gradients must match the shared version.
  std::vector<double> vals = {0.3, -1.2, 2.5, 0.9};

  T xs = T::from({4}, vals);
  xs.set_requires_grad(true);
  std::vector<double> g_shared;
  {
    Tape<double> tape;
    T h = ops::mul(xs, xs);          // shared node
    T a = ops::sum(ops::mul(h, xs)); // path 1: x^3
    T b = ops::sum(h);               // path 2: x^2
    tape.backward(ops::add(a, b));
    g_shared = xs.grad();
  }

  T x1 = T::from({4}, vals);
  x1.set_requires_grad(true);
  std::vector<double> g_dup;
  {
    Tape<double> tape;
    T h1 = ops::mul(x1, x1);
    T h2 = ops::mul(x1, x1);  // duplicated subgraph
    T a = ops::sum(ops::mul(h1, x1));
    T b = ops::sum(h2);
    tape.backward(ops::add(a, b));
    g_dup = x1.grad();
  }
  for (int i = 0; i < 4; ++i) CHECK(g_shared[i] == doctest::Approx(g_dup[i]).epsilon(1e-14));
}

TEST_CASE("unreachable leaves keep zero gradients") {
  T x = T::from({2}, {1, 2});
  T y = T::from({2}, {3, 4});
  x.set_requires_grad(true);
  y.set_requires_grad(true);
  Tape<double> tape;
  T used = ops::sum(x);
  T unused = ops::sum(y);  // recorded but not part of the loss
  (void)unused;
  tape.backward(used);
  CHECK(y.grad() == std::vector<double>{0, 0});
  CHECK(x.grad() == std::vector<double>{1, 1});
}

TEST_CASE("ops without an active tape do not record or require grad") {
  T x = T::from({2}, {1, 2});
  x.set_requires_grad(true);
  T y = ops::mul(x, x);  // no tape in scope
  CHECK(!y.requires_grad());
}

TEST_CASE("Tape::Suspend disables recording") {
  T x = T::from({2}, {1, 2});
  x.set_requires_grad(true);
  Tape<double> tape;
  T a = ops::mul(x, x);
  {
    Tape<double>::Suspend guard;
    T b = ops::mul(x, x);
    CHECK(!b.requires_grad());
  }
  CHECK(a.requires_grad());
  tape.backward(ops::sum(a));
  CHECK(x.grad() == std::vector<double>{2, 4});
}

TEST_CASE("scalar broadcast works on both sides; other mismatch throws") {
  T x = T::from({2}, {1, 2});
  T c = T::scalar(3.0);
  auto y1 = ops::mul(x, c);
  auto y2 = ops::mul(c, x);
  CHECK(y1.data()[1] == 6.0);
  CHECK(y2.data()[0] == 3.0);
  T bad = T::from({3}, {1, 2, 3});
  CHECK_THROWS_AS(ops::add(x, bad), ContractViolation);
}

TEST_CASE("forward_op dispatcher: contract and numeric errors") {
  T x = T::from({2}, {1, 2});
  CHECK_THROWS_AS(ops::forward_op<double>("nonsense", {x}), ContractViolation);
  T nan = T::from({2}, {1, std::nan("")});
  CHECK_THROWS_AS(ops::forward_op<double>("relu", {nan}), darcot::NumericError);
  auto r = ops::forward_op<double>("relu", {T::from({1, 2}, {-1, 2})});
  CHECK(r.data()[0] == 0.0);
  CHECK(r.data()[1] == 2.0);
}

TEST_CASE("relu example") {
  auto r = ops::relu(T::from({1, 2}, {-1, 2}));
  CHECK(r.data()[0] == 0.0);
  CHECK(r.data()[1] == 2.0);
}

TEST_CASE("conv2d identity: 1x1 kernel, zero bias") {
  T x = T::from({1, 1, 2, 2}, {1, 2, 3, 4});
  T w = T::from({1, 1, 1, 1}, {1});
  T b = T::from({1}, {0});
  auto y = ops::conv2d(x, w, b, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == x.data()[i]);
}
