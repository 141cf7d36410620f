#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "augfpn/ops.hpp"
#include "augfpn/rng.hpp"
#include "augfpn/tensor.hpp"

using namespace augfpn;

int main(int argc, char** argv) {
  set_finite_checks(true);
  return doctest::Context(argc, argv).run();
}

TEST_CASE("tensor shape and storage invariants") {
  auto t = make_tensor<double>({2, 3, 4});
  CHECK(t->numel() == 24);
  CHECK(t->data.size() == 24);
  CHECK(t->grad.empty());

  auto g = make_tensor<float>({5}, true);
  CHECK(g->grad.size() == 5);

  CHECK_THROWS_AS(make_tensor<double>({2, 0, 3}), ShapeError);
  CHECK_THROWS_AS(make_tensor<double>({-1}), ShapeError);
  CHECK_THROWS_AS(make_tensor<double>({}), ShapeError);
  CHECK_THROWS_AS(make_tensor<double>({2, 2}, std::vector<double>{1.0, 2.0}), ShapeError);
}

TEST_CASE("backward of sum gives all-ones gradient") {
  auto x = make_tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tape<double> tape;
  auto s = sum_all(&tape, x);
  backward(tape, s);
  for (double g : x->grad) CHECK(g == 1.0);
}

TEST_CASE("backward of sum(x*x) gives 2x") {
  auto x = make_tensor<double>({4}, {1.5, -2.0, 0.25, 3.0}, true);
  Tape<double> tape;
  auto s = sum_all(&tape, mul(&tape, x, x));
  backward(tape, s);
  for (std::size_t i = 0; i < 4; ++i) CHECK(x->grad[i] == doctest::Approx(2.0 * x->data[i]));
}

TEST_CASE("repeated backward accumulates") {
  auto x = make_tensor<double>({3}, {1, 2, 3}, true);
  Tape<double> tape;
  auto s = sum_all(&tape, x);
  backward(tape, s);
  backward(tape, s);
  for (double g : x->grad) CHECK(g == 2.0);
}

TEST_CASE("backward rejects non-scalar roots") {
  auto x = make_tensor<double>({2, 2}, true);
  Tape<double> tape;
  auto y = relu(&tape, x);
  CHECK_THROWS_AS(backward(tape, y), UsageError);
}

TEST_CASE("scaling the loss by a power of two scales gradients exactly") {
  Xoshiro256 rng(11);
  auto x = make_tensor<double>({3, 4}, true);
  fill_uniform(*x, -1.0, 1.0, rng);
  auto w = make_tensor<double>({4, 2}, true);
  fill_uniform(*w, -1.0, 1.0, rng);

  auto loss_of = [&](Tape<double>* t, double c) {
    auto y = sigmoid(t, fully_connected<double>(t, x, w, nullptr));
    auto l = sum_all(t, y);
    return c == 1.0 ? l : scale(t, l, c);
  };

  Tape<double> t1;
  backward(t1, loss_of(&t1, 1.0));
  std::vector<double> base = x->grad;
  x->zero_grad();
  w->zero_grad();

  Tape<double> t2;
  backward(t2, loss_of(&t2, 2.0));
  for (std::size_t i = 0; i < base.size(); ++i) CHECK(x->grad[i] == 2.0 * base[i]);
}

TEST_CASE("finite checks catch non-finite op outputs") {
  auto a = full<double>({2}, 1e308);
  CHECK_THROWS_AS(add<double>(nullptr, a, a), UsageError);
}

TEST_CASE("kernel counter tracks forward invocations") {
  KernelCounter::enable();
  KernelCounter::reset();
  auto x = make_tensor<double>({1, 2, 3, 3});
  auto y = relu<double>(nullptr, x);
  auto z = add<double>(nullptr, y, y);
  auto counts = KernelCounter::snapshot();
  KernelCounter::disable();
  CHECK(counts["relu"] == 1);
  CHECK(counts["add"] == 1);
}

TEST_CASE("xoshiro stream is platform independent and seeded") {
  Xoshiro256 a(123), b(123), c(124);
  CHECK(a.next_u64() == b.next_u64());
  CHECK(a.next_u64() == b.next_u64());
  Xoshiro256 d(123);
  (void)c.next_u64();
  double v = d.next_double();
  CHECK(v >= 0.0);
  CHECK(v < 1.0);
}
