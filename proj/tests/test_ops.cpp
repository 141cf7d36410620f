#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <cmath>

#include "augfpn/ops.hpp"
#include "augfpn/rng.hpp"
#include "oracles.hpp"

using namespace augfpn;

int main(int argc, char** argv) {
  set_finite_checks(true);
  return doctest::Context(argc, argv).run();
}

namespace {
TensorPtr<double> rand_t(std::vector<std::int64_t> dims, Xoshiro256& rng) {
  auto t = make_tensor<double>(std::move(dims));
  fill_uniform(*t, -1.0, 1.0, rng);
  return t;
}
}  // namespace

TEST_CASE("conv2d: 1x1 channel-identity weights reproduce the input bitwise") {
  Xoshiro256 rng(3);
  auto x = rand_t({1, 4, 5, 5}, rng);
  auto w = make_tensor<double>({4, 4, 1, 1});
  for (int k = 0; k < 4; ++k) w->data[static_cast<std::size_t>(k * 4 + k)] = 1.0;
  auto y = conv2d<double>(nullptr, x, w, nullptr, 1, 0);
  for (std::int64_t i = 0; i < x->numel(); ++i) CHECK(y->data[i] == x->data[i]);
}

TEST_CASE("conv2d: zero input broadcasts the bias") {
  auto x = make_tensor<float>({2, 3, 4, 4});
  auto w = make_tensor<float>({2, 3, 3, 3});
  auto b = make_tensor<float>({2}, {0.5f, -1.25f});
  auto y = conv2d<float>(nullptr, x, w, b, 1, 1);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t k = 0; k < 2; ++k)
      for (std::int64_t s = 0; s < 16; ++s) {
        CHECK(y->data[(n * 2 + k) * 16 + s] == b->data[static_cast<std::size_t>(k)]);
      }
}

TEST_CASE("conv2d: all-ones 3x3 kernel on the 1..9 ramp (sliding-window oracle values)") {
  auto x = make_tensor<double>({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto w = full<double>({1, 1, 3, 3}, 1.0);
  auto y = conv2d<double>(nullptr, x, w, nullptr, 1, 1);
  const std::vector<double> want = {12, 21, 16, 27, 45, 33, 24, 39, 28};
  for (std::size_t i = 0; i < 9; ++i) CHECK(y->data[i] == want[i]);
  // same map from the independent oracle
  auto z = oracle::conv2d(*x, *w, nullptr, 1, 1);
  CHECK(oracle::max_abs_diff(*y, *z) == 0.0);
}

TEST_CASE("conv2d matches the sliding-window oracle on random instances") {
  Xoshiro256 rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const int stride = 1 + static_cast<int>(rng.next_below(2));
    const int pad = static_cast<int>(rng.next_below(2));
    auto x = rand_t({2, 3, 7, 7}, rng);
    auto w = rand_t({4, 3, 3, 3}, rng);
    auto b = rand_t({4}, rng);
    if ((7 + 2 * pad - 3) % stride != 0) continue;
    auto y = conv2d<double>(nullptr, x, w, b, stride, pad);
    auto z = oracle::conv2d(*x, *w, b.get(), stride, pad);
    CHECK(oracle::max_abs_diff(*y, *z) < 1e-12);
  }
}

TEST_CASE("conv2d error paths") {
  auto x = make_tensor<double>({1, 3, 5, 5});
  auto w_bad_c = make_tensor<double>({2, 4, 3, 3});
  CHECK_THROWS_AS(conv2d<double>(nullptr, x, w_bad_c, nullptr, 1, 1), ShapeError);
  auto w_even = make_tensor<double>({2, 3, 2, 2});
  CHECK_THROWS_AS(conv2d<double>(nullptr, x, w_even, nullptr, 1, 0), ConfigError);
  auto w = make_tensor<double>({2, 3, 3, 3});
  // (5 - 3) % 3 != 0 -> non-integral output extent
  CHECK_THROWS_AS(conv2d<double>(nullptr, x, w, nullptr, 3, 0), ConfigError);
  CHECK_THROWS_AS(conv2d<double>(nullptr, x, w, nullptr, 4, 0), ConfigError);
}

TEST_CASE("bilinear_resize: identity and constant cases") {
  Xoshiro256 rng(5);
  auto x = rand_t({1, 2, 4, 6}, rng);
  auto same = bilinear_resize<double>(nullptr, x, 4, 6);
  for (std::int64_t i = 0; i < x->numel(); ++i) CHECK(same->data[i] == x->data[i]);

  auto c = full<double>({1, 1, 3, 3}, 2.75);
  auto up = bilinear_resize<double>(nullptr, c, 9, 5);
  for (double v : up->data) CHECK(v == doctest::Approx(2.75).epsilon(1e-12));

  CHECK_THROWS_AS(bilinear_resize<double>(nullptr, x, 0, 3), ConfigError);
}

TEST_CASE("bilinear_resize: 2x2 -> 4x4 frozen map from the scalar formula") {
  auto x = make_tensor<double>({1, 1, 2, 2}, {0, 1, 2, 3});
  auto y = bilinear_resize<double>(nullptr, x, 4, 4);
  const std::vector<double> want = {0,   0.25, 0.75, 1,    0.5, 0.75, 1.25, 1.5,
                                    1.5, 1.75, 2.25, 2.5,  2,   2.25, 2.75, 3};
  REQUIRE(y->numel() == 16);
  for (std::size_t i = 0; i < 16; ++i) CHECK(y->data[i] == doctest::Approx(want[i]).epsilon(1e-14));
  auto z = oracle::bilinear_resize(*x, 4, 4);
  CHECK(oracle::max_abs_diff(*y, *z) < 1e-15);
}

TEST_CASE("bilinear_resize reproduces affine maps at interior points") {
  // f(x,y) = a*x + b*y + c stays exact under bilinear interpolation away from
  // the clamped border.
  Xoshiro256 rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2), c = rng.uniform(-2, 2);
    auto x = make_tensor<double>({1, 1, 8, 8});
    for (std::int64_t yy = 0; yy < 8; ++yy)
      for (std::int64_t xx = 0; xx < 8; ++xx) x->data[yy * 8 + xx] = a * xx + b * yy + c;
    const int oh = 16, ow = 16;
    auto y = bilinear_resize<double>(nullptr, x, oh, ow);
    for (std::int64_t oy = 2; oy < oh - 2; ++oy)
      for (std::int64_t ox = 2; ox < ow - 2; ++ox) {
        const double sx = (ox + 0.5) * 0.5 - 0.5, sy = (oy + 0.5) * 0.5 - 0.5;
        CHECK(y->data[oy * ow + ox] == doctest::Approx(a * sx + b * sy + c).epsilon(1e-12));
      }
  }
}

TEST_CASE("adaptive_avg_pool2d: identity, global mean, frozen 4x4->2x2") {
  Xoshiro256 rng(9);
  auto x = rand_t({1, 3, 5, 4}, rng);
  auto same = adaptive_avg_pool2d<double>(nullptr, x, 5, 4);
  for (std::int64_t i = 0; i < x->numel(); ++i) CHECK(same->data[i] == x->data[i]);

  std::vector<double> ramp(16);
  for (int i = 0; i < 16; ++i) ramp[static_cast<std::size_t>(i)] = i + 1;
  auto r = make_tensor<double>({1, 1, 4, 4}, std::move(ramp));
  auto g = adaptive_avg_pool2d<double>(nullptr, r, 1, 1);
  CHECK(g->data[0] == doctest::Approx(8.5));
  auto q = adaptive_avg_pool2d<double>(nullptr, r, 2, 2);
  CHECK(q->data[0] == doctest::Approx(3.5));
  CHECK(q->data[1] == doctest::Approx(5.5));
  CHECK(q->data[2] == doctest::Approx(11.5));
  CHECK(q->data[3] == doctest::Approx(13.5));

  CHECK_THROWS_AS(adaptive_avg_pool2d<double>(nullptr, r, 5, 2), ConfigError);
}

TEST_CASE("adaptive_avg_pool2d preserves the global mean when sizes divide") {
  Xoshiro256 rng(21);
  auto x = rand_t({1, 2, 12, 8}, rng);
  auto p = adaptive_avg_pool2d<double>(nullptr, x, 3, 4);
  for (int c = 0; c < 2; ++c) {
    double in_mean = 0, out_mean = 0;
    for (int s = 0; s < 96; ++s) in_mean += x->data[c * 96 + s] / 96.0;
    for (int s = 0; s < 12; ++s) out_mean += p->data[c * 12 + s] / 12.0;
    CHECK(in_mean == doctest::Approx(out_mean).epsilon(1e-12));
  }
  auto z = oracle::adaptive_avg_pool2d(*x, 5, 3);
  auto y = adaptive_avg_pool2d<double>(nullptr, x, 5, 3);
  CHECK(oracle::max_abs_diff(*y, *z) < 1e-12);
}

TEST_CASE("global_max_pool: values and the row-major tie rule") {
  auto c = full<double>({2, 3, 2, 2}, -1.5);
  auto m = global_max_pool<double>(nullptr, c);
  for (double v : m->data) CHECK(v == -1.5);

  std::vector<double> ramp(16);
  for (int i = 0; i < 16; ++i) ramp[static_cast<std::size_t>(i)] = i + 1;
  auto r = make_tensor<double>({1, 1, 4, 4}, std::move(ramp));
  CHECK(global_max_pool<double>(nullptr, r)->data[0] == 16.0);

  // two equal maxima: gradient goes to the first in row-major order
  auto t = make_tensor<double>({1, 1, 2, 2}, {1.0, 7.0, 7.0, 0.0}, true);
  Tape<double> tape;
  auto y = global_max_pool(&tape, t);
  backward(tape, sum_all(&tape, y));
  CHECK(t->grad[1] == 1.0);
  CHECK(t->grad[2] == 0.0);
}

TEST_CASE("softmax_over_group: degenerate, symmetric and frozen cases") {
  auto a = make_tensor<double>({1, 1, 2, 2}, {0.3, -1, 2, 5});
  auto one = softmax_over_group<double>(nullptr, {a});
  for (double v : one[0]->data) CHECK(v == doctest::Approx(1.0));

  auto b = make_tensor<double>({1, 1, 2, 2}, {0.3, -1, 2, 5});
  auto thirds = softmax_over_group<double>(nullptr, {a, b, a});
  for (const auto& m : thirds)
    for (double v : m->data) CHECK(v == doctest::Approx(1.0 / 3.0));

  auto zero = make_tensor<double>({1, 1, 1, 1}, std::vector<double>{0.0});
  auto ln3 = make_tensor<double>({1, 1, 1, 1}, std::vector<double>{std::log(3.0)});
  auto w = softmax_over_group<double>(nullptr, {zero, ln3});
  CHECK(w[0]->data[0] == doctest::Approx(0.25));
  CHECK(w[1]->data[0] == doctest::Approx(0.75));

  auto bad = make_tensor<double>({1, 1, 2, 3});
  CHECK_THROWS_AS(softmax_over_group<double>(nullptr, {a, bad}), ShapeError);
}

TEST_CASE("softmax_over_group outputs are a distribution at every position") {
  Xoshiro256 rng(13);
  std::vector<TensorPtr<double>> maps;
  for (int k = 0; k < 4; ++k) maps.push_back(rand_t({2, 1, 3, 5}, rng));
  auto w = softmax_over_group<double>(nullptr, maps);
  for (std::int64_t s = 0; s < maps[0]->numel(); ++s) {
    double total = 0;
    for (const auto& m : w) {
      CHECK(m->data[s] > 0.0);
      CHECK(m->data[s] < 1.0);
      total += m->data[s];
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("elementwise suite basics") {
  Xoshiro256 rng(31);
  auto x = rand_t({2, 2}, rng);
  auto zeros = make_tensor<double>({2, 2});
  auto same = add<double>(nullptr, x, zeros);
  for (std::int64_t i = 0; i < 4; ++i) CHECK(same->data[i] == x->data[i]);

  auto zero = make_tensor<double>({1}, std::vector<double>{0.0});
  CHECK(sigmoid<double>(nullptr, zero)->data[0] == doctest::Approx(0.5));

  auto a = rand_t({1, 3, 2, 2}, rng);
  auto b = rand_t({1, 5, 2, 2}, rng);
  auto cat = concat_channels<double>(nullptr, {a, b});
  CHECK(cat->dims == std::vector<std::int64_t>{1, 8, 2, 2});
  for (std::int64_t i = 0; i < a->numel(); ++i) CHECK(cat->data[i] == a->data[i]);
  for (std::int64_t i = 0; i < b->numel(); ++i) CHECK(cat->data[a->numel() + i] == b->data[i]);

  auto neg = make_tensor<double>({3}, {-1, 0.5, -0.25});
  auto r = relu<double>(nullptr, neg);
  CHECK(r->data[0] == 0.0);
  CHECK(r->data[1] == 0.5);
  CHECK(r->data[2] == 0.0);

  CHECK_THROWS_AS(add<double>(nullptr, a, b), ShapeError);
  CHECK_THROWS_AS(mul<double>(nullptr, a, b), ShapeError);
}

TEST_CASE("elementwise_max ties go to the earliest input") {
  auto a = make_tensor<double>({2}, {3.0, 1.0}, true);
  auto b = make_tensor<double>({2}, {3.0, 2.0}, true);
  Tape<double> tape;
  auto m = elementwise_max(&tape, {a, b});
  CHECK(m->data[0] == 3.0);
  CHECK(m->data[1] == 2.0);
  backward(tape, sum_all(&tape, m));
  CHECK(a->grad[0] == 1.0);
  CHECK(b->grad[0] == 0.0);
  CHECK(b->grad[1] == 1.0);
}

TEST_CASE("fully_connected matches the dense oracle") {
  Xoshiro256 rng(41);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = rand_t({3, 11}, rng);
    auto w = rand_t({11, 6}, rng);
    auto b = rand_t({6}, rng);
    auto y = fully_connected<double>(nullptr, x, w, b);
    auto z = oracle::dense(*x, *w, b.get());
    CHECK(oracle::max_abs_diff(*y, *z) < 1e-12);
  }
  auto x = rand_t({2, 4}, rng);
  auto w = rand_t({4, 3}, rng);
  auto y = fully_connected<double>(nullptr, x, w, nullptr);
  auto z = oracle::dense(*x, *w, nullptr);
  CHECK(oracle::max_abs_diff(*y, *z) < 1e-12);
}

TEST_CASE("softmax cross-entropy: frozen and limiting cases") {
  auto uniform = make_tensor<double>({1, 2}, {0.4, 0.4});
  CHECK(softmax_cross_entropy<double>(nullptr, uniform, {0})->data[0] ==
        doctest::Approx(std::log(2.0)));

  auto margin = make_tensor<double>({1, 3}, {0.0, 30.0, 0.0});
  CHECK(softmax_cross_entropy<double>(nullptr, margin, {1})->data[0] < 1e-9);

  auto logits = make_tensor<double>({1, 3}, {1, 2, 3});
  const double want = oracle::softmax_ce({1, 2, 3}, 2);
  CHECK(want == doctest::Approx(0.40760596444438079));
  CHECK(softmax_cross_entropy<double>(nullptr, logits, {2})->data[0] == doctest::Approx(want));

  CHECK_THROWS_AS(softmax_cross_entropy<double>(nullptr, logits, {3}), UsageError);
  CHECK_THROWS_AS(softmax_cross_entropy<double>(nullptr, logits, {-1}), UsageError);
}

TEST_CASE("smooth_l1: indicator, perfect fit and the 0.5-error value") {
  auto pred = make_tensor<double>({1, 4}, {1, 2, 3, 4});
  // inactive row -> exactly zero
  CHECK(smooth_l1<double>(nullptr, pred, {0, 0, 0, 0}, {false})->data[0] == 0.0);
  // perfect regression -> zero
  CHECK(smooth_l1<double>(nullptr, pred, {1, 2, 3, 4}, {true})->data[0] == 0.0);
  // 0.5 error on each coordinate -> 4 * (0.5^2 / 2) = 0.5
  CHECK(smooth_l1<double>(nullptr, pred, {1.5, 2.5, 3.5, 4.5}, {true})->data[0] ==
        doctest::Approx(0.5));
  // linear branch: |d| = 2 -> 2 - 0.5 per coordinate
  CHECK(smooth_l1<double>(nullptr, pred, {3, 4, 5, 6}, {true})->data[0] ==
        doctest::Approx(4 * 1.5));
}

TEST_CASE("shape errors on the remaining op surfaces") {
  auto x = make_tensor<double>({1, 4, 3, 3});
  CHECK_THROWS_AS(split_channels<double>(nullptr, x, 3), ShapeError);
  CHECK_THROWS_AS(sum_channel_groups<double>(nullptr, x, 3), ShapeError);
  CHECK_THROWS_AS(reshape<double>(nullptr, x, {5, 5}), ShapeError);
  auto map = make_tensor<double>({1, 2, 3, 3});
  CHECK_THROWS_AS(channel_scale<double>(nullptr, x, map), ShapeError);
  auto gates = make_tensor<double>({1, 3});
  CHECK_THROWS_AS(channel_gate<double>(nullptr, x, gates), ShapeError);
  auto w = make_tensor<double>({5, 4});
  CHECK_THROWS_AS(fully_connected<double>(nullptr, reshape<double>(nullptr, x, {4, 9}), w, nullptr),
                  ShapeError);
  CHECK_THROWS_AS(stack_flatten<double>(nullptr, {x, map}), ShapeError);
}

TEST_CASE("channel_scale and channel_gate broadcast correctly") {
  Xoshiro256 rng(51);
  auto f = rand_t({2, 3, 2, 2}, rng);
  auto m = rand_t({2, 1, 2, 2}, rng);
  auto y = channel_scale<double>(nullptr, f, m);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t s = 0; s < 4; ++s) {
        CHECK(y->data[(n * 3 + c) * 4 + s] ==
              doctest::Approx(f->data[(n * 3 + c) * 4 + s] * m->data[n * 4 + s]));
      }

  auto gates = rand_t({2, 3}, rng);
  auto g = channel_gate<double>(nullptr, f, gates);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t s = 0; s < 4; ++s) {
        CHECK(g->data[(n * 3 + c) * 4 + s] ==
              doctest::Approx(f->data[(n * 3 + c) * 4 + s] * gates->data[n * 3 + c]));
      }

  auto sum = sum_channel_groups<double>(nullptr, f, 3);
  CHECK(sum->dims == std::vector<std::int64_t>{2, 1, 2, 2});
}
