#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <cmath>

#include "augfpn/fpn_reference.hpp"
#include "augfpn/pyramid.hpp"
#include "oracles.hpp"

using namespace augfpn;

int main(int argc, char** argv) {
  set_finite_checks(true);
  return doctest::Context(argc, argv).run();
}

namespace {

FeatureHierarchy<double> random_hierarchy(const std::array<std::int64_t, 4>& channels, int image,
                                          Xoshiro256& rng) {
  FeatureHierarchy<double> h;
  for (int l = 0; l < 4; ++l) {
    auto t = make_tensor<double>({1, channels[static_cast<std::size_t>(l)],
                                  image / kPyramidStrides[static_cast<std::size_t>(l)],
                                  image / kPyramidStrides[static_cast<std::size_t>(l)]});
    fill_uniform(*t, -1.0, 1.0, rng);
    h.c[static_cast<std::size_t>(l)] = t;
  }
  return h;
}

}  // namespace

TEST_CASE("hierarchy validation enforces the halving chain") {
  Xoshiro256 rng(2);
  auto good = random_hierarchy({3, 4, 5, 6}, 64, rng);
  CHECK_NOTHROW(good.validate());

  auto bad = good;
  bad.c[2] = make_tensor<double>({1, 5, 3, 4});
  CHECK_THROWS_AS(bad.validate(), ShapeError);
}

TEST_CASE("rfa pooled sizes follow max(1, floor(alpha*dim))") {
  CHECK(rfa_pooled_size(0.2, 25, 38) == std::pair<int, int>{5, 7});
  CHECK(rfa_pooled_size(0.1, 25, 38) == std::pair<int, int>{2, 3});
  CHECK(rfa_pooled_size(0.1, 4, 4) == std::pair<int, int>{1, 1});
  CHECK(rfa_pooled_size(1.0, 9, 9) == std::pair<int, int>{9, 9});
}

TEST_CASE("rfa config validation") {
  RfaConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.alphas = {0.3, 0.2};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.alphas = {0.0, 0.5};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.alphas = {0.5, 1.5};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = RfaConfig{};
  cfg.pooling_kind = PoolingKind::fixed_psp;
  cfg.psp_sizes = {};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("lateral_connect matches the per-pixel matmul oracle") {
  Xoshiro256 rng(19);
  auto h = random_hierarchy({3, 4, 5, 6}, 32, rng);
  auto params = make_pyramid_params<double>({3, 4, 5, 6}, RfaConfig{}, rng);
  auto m = lateral_connect<double>(nullptr, h, params.lateral);
  for (int l = 0; l < 4; ++l) {
    CHECK(m[static_cast<std::size_t>(l)]->dim(1) == kPyramidChannels);
    auto want = oracle::conv2d(*h.c[static_cast<std::size_t>(l)],
                               *params.lateral[static_cast<std::size_t>(l)].w,
                               params.lateral[static_cast<std::size_t>(l)].b.get(), 1, 0);
    CHECK(oracle::max_abs_diff(*m[static_cast<std::size_t>(l)], *want) < 1e-12);
  }

  // zero weights give zero maps
  for (auto& conv : params.lateral) {
    std::fill(conv.w->data.begin(), conv.w->data.end(), 0.0);
    std::fill(conv.b->data.begin(), conv.b->data.end(), 0.0);
  }
  auto z = lateral_connect<double>(nullptr, h, params.lateral);
  for (const auto& t : z)
    for (double v : t->data) CHECK(v == 0.0);
}

TEST_CASE("asf: single input degenerates to identity with a unit weight map") {
  Xoshiro256 rng(23);
  auto asf = make_asf_params<double>(1, 8, rng);
  auto f = make_tensor<double>({1, 8, 4, 4});
  fill_uniform(*f, -1.0, 1.0, rng);
  auto r = adaptive_spatial_fusion<double>(nullptr, {f}, asf);
  for (std::int64_t i = 0; i < f->numel(); ++i) CHECK(r.fused->data[i] == f->data[i]);
  for (double v : r.weight_maps[0]->data) CHECK(v == 1.0);
}

TEST_CASE("asf: identical inputs are reproduced by any convex weighting") {
  Xoshiro256 rng(29);
  auto asf = make_asf_params<double>(3, 8, rng);
  auto f = make_tensor<double>({1, 8, 5, 5});
  fill_uniform(*f, -1.0, 1.0, rng);
  auto r = adaptive_spatial_fusion<double>(nullptr, {f, f, f}, asf);
  for (std::int64_t i = 0; i < f->numel(); ++i) {
    CHECK(r.fused->data[i] == doctest::Approx(f->data[i]).epsilon(1e-9));
  }
}

TEST_CASE("asf: zero logit conv gives uniform weights and the mean of inputs") {
  Xoshiro256 rng(37);
  auto asf = make_asf_params<double>(4, 8, rng);
  std::fill(asf.logits.w->data.begin(), asf.logits.w->data.end(), 0.0);
  std::fill(asf.logits.b->data.begin(), asf.logits.b->data.end(), 0.0);
  std::vector<TensorPtr<double>> fs;
  for (int k = 0; k < 4; ++k) {
    auto f = make_tensor<double>({1, 8, 3, 3});
    fill_uniform(*f, -1.0, 1.0, rng);
    fs.push_back(f);
  }
  auto r = adaptive_spatial_fusion<double>(nullptr, fs, asf);
  for (const auto& m : r.weight_maps)
    for (double v : m->data) CHECK(v == doctest::Approx(0.25));
  for (std::int64_t i = 0; i < fs[0]->numel(); ++i) {
    const double mean =
        (fs[0]->data[i] + fs[1]->data[i] + fs[2]->data[i] + fs[3]->data[i]) / 4.0;
    CHECK(r.fused->data[i] == doctest::Approx(mean).epsilon(1e-9));
  }
}

TEST_CASE("asf: weights normalize and the fusion is convex per position") {
  Xoshiro256 rng(43);
  auto asf = make_asf_params<double>(3, 16, rng);
  std::vector<TensorPtr<double>> fs;
  for (int k = 0; k < 3; ++k) {
    auto f = make_tensor<double>({2, 16, 4, 4});
    fill_uniform(*f, -2.0, 2.0, rng);
    fs.push_back(f);
  }
  auto r = adaptive_spatial_fusion<double>(nullptr, fs, asf);
  const std::int64_t plane = r.weight_maps[0]->numel();
  for (std::int64_t s = 0; s < plane; ++s) {
    double total = 0;
    for (const auto& m : r.weight_maps) total += m->data[s];
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
  // fused value stays inside the [min, max] envelope of its inputs
  const auto& f0 = *fs[0];
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 16; ++c)
      for (std::int64_t s = 0; s < 16; ++s) {
        const auto idx = (n * 16 + c) * 16 + s;
        double lo = f0.data[idx], hi = f0.data[idx];
        for (const auto& f : fs) {
          lo = std::min(lo, f->data[idx]);
          hi = std::max(hi, f->data[idx]);
        }
        CHECK(r.fused->data[idx] >= lo - 1e-9);
        CHECK(r.fused->data[idx] <= hi + 1e-9);
      }
}

TEST_CASE("asf: experimental sigmoid gate is unnormalized but bounded") {
  Xoshiro256 rng(47);
  auto asf = make_asf_params<double>(2, 8, rng);
  std::vector<TensorPtr<double>> fs;
  for (int k = 0; k < 2; ++k) {
    auto f = make_tensor<double>({1, 8, 3, 3});
    fill_uniform(*f, -1.0, 1.0, rng);
    fs.push_back(f);
  }
  auto r = adaptive_spatial_fusion<double>(nullptr, fs, asf, AsfNorm::sigmoid);
  for (const auto& m : r.weight_maps)
    for (double v : m->data) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
}

TEST_CASE("rfa: constant c5 produces an interior-constant m6") {
  // With distinct branch convs the fusion weights vary near the border (the
  // padded 3x3 logit conv sees the zero frame there), so constancy is an
  // interior property.
  Xoshiro256 rng(53);
  RfaConfig cfg;
  auto params = make_pyramid_params<double>({3, 4, 5, 6}, cfg, rng);
  auto c5 = full<double>({1, 6, 8, 8}, 0.7);
  auto m6 = residual_feature_augmentation<double>(nullptr, c5, cfg, params.rfa_reduce,
                                                  params.rfa_asf);
  CHECK(m6->dims == std::vector<std::int64_t>{1, kPyramidChannels, 8, 8});
  for (std::int64_t c = 0; c < kPyramidChannels; ++c) {
    const double first = m6->data[c * 64 + 1 * 8 + 1];
    for (std::int64_t y = 1; y < 7; ++y) {
      for (std::int64_t x = 1; x < 7; ++x) {
        CHECK(m6->data[c * 64 + y * 8 + x] == doctest::Approx(first).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("rfa: identical branch convs reduce to the conv image of the constant") {
  Xoshiro256 rng(59);
  RfaConfig cfg;
  auto params = make_pyramid_params<double>({3, 4, 5, 6}, cfg, rng);
  // all three branches share weights -> convex fusion of identical features
  for (std::size_t k = 1; k < params.rfa_reduce.size(); ++k) {
    params.rfa_reduce[k].w->data = params.rfa_reduce[0].w->data;
    params.rfa_reduce[k].b->data = params.rfa_reduce[0].b->data;
  }
  auto c5 = full<double>({1, 6, 8, 8}, -0.4);
  auto m6 = residual_feature_augmentation<double>(nullptr, c5, cfg, params.rfa_reduce,
                                                  params.rfa_asf);
  auto conv_image = oracle::conv2d(*c5, *params.rfa_reduce[0].w, params.rfa_reduce[0].b.get(), 1, 0);
  for (std::int64_t c = 0; c < kPyramidChannels; ++c) {
    CHECK(m6->data[c * 64] == doctest::Approx(conv_image->data[c * 64]).epsilon(1e-9));
  }
}

TEST_CASE("rfa: pooling variants and sum fusion run with correct shapes") {
  Xoshiro256 rng(61);
  for (auto kind : {PoolingKind::ratio_invariant_avg, PoolingKind::global_avg,
                    PoolingKind::global_max, PoolingKind::fixed_psp}) {
    for (auto fusion : {FusionKind::asf, FusionKind::sum}) {
      RfaConfig cfg;
      cfg.pooling_kind = kind;
      cfg.fusion_kind = fusion;
      auto params = make_pyramid_params<double>({3, 4, 5, 6}, cfg, rng);
      auto c5 = make_tensor<double>({1, 6, 8, 8});
      fill_uniform(*c5, -1.0, 1.0, rng);
      auto m6 = residual_feature_augmentation<double>(nullptr, c5, cfg, params.rfa_reduce,
                                                      params.rfa_asf);
      CHECK(m6->dims == std::vector<std::int64_t>{1, kPyramidChannels, 8, 8});
    }
  }
  // psp pool larger than the input is rejected
  RfaConfig cfg;
  cfg.pooling_kind = PoolingKind::fixed_psp;
  cfg.psp_sizes = {{9, 9}};
  auto params = make_pyramid_params<double>({3, 4, 5, 6}, cfg, rng);
  auto c5 = make_tensor<double>({1, 6, 4, 4});
  CHECK_THROWS_AS(residual_feature_augmentation<double>(nullptr, c5, cfg, params.rfa_reduce,
                                                        params.rfa_asf),
                  ConfigError);
}

TEST_CASE("topdown shape contract: P levels mirror C spatial dims at 256 channels") {
  Xoshiro256 rng(67);
  auto h = random_hierarchy({3, 4, 5, 6}, 64, rng);
  auto params = make_pyramid_params<double>({3, 4, 5, 6}, RfaConfig{}, rng);
  auto pyr = build_pyramid<double>(nullptr, h, params, RfaConfig{}, true);
  for (int l = 0; l < 4; ++l) {
    CHECK(pyr.p[static_cast<std::size_t>(l)]->dim(1) == kPyramidChannels);
    CHECK(pyr.p[static_cast<std::size_t>(l)]->dim(2) == h.c[static_cast<std::size_t>(l)]->dim(2));
    CHECK(pyr.p[static_cast<std::size_t>(l)]->dim(3) == h.c[static_cast<std::size_t>(l)]->dim(3));
  }
}

TEST_CASE("topdown with zero laterals propagates m6 alone") {
  Xoshiro256 rng(71);
  auto params = make_pyramid_params<double>({3, 4, 5, 6}, RfaConfig{}, rng);
  std::array<TensorPtr<double>, 4> m = {
      make_tensor<double>({1, kPyramidChannels, 8, 8}),
      make_tensor<double>({1, kPyramidChannels, 4, 4}),
      make_tensor<double>({1, kPyramidChannels, 2, 2}),
      make_tensor<double>({1, kPyramidChannels, 1, 1}),
  };
  auto z = make_tensor<double>({1, kPyramidChannels, 1, 1});
  fill_uniform(*z, -1.0, 1.0, rng);
  auto p = topdown_fuse<double>(nullptr, m, z, params.output);

  auto p5_want = oracle::conv2d(*z, *params.output[3].w, params.output[3].b.get(), 1, 1);
  CHECK(oracle::max_abs_diff(*p[3], *p5_want) < 1e-12);

  auto z4 = oracle::bilinear_resize(*z, 2, 2);
  auto p4_want = oracle::conv2d(*z4, *params.output[2].w, params.output[2].b.get(), 1, 1);
  CHECK(oracle::max_abs_diff(*p[2], *p4_want) < 1e-12);
}

TEST_CASE("pyramid without the residual branch equals the straight-line reference") {
  Xoshiro256 rng(73);
  auto h = random_hierarchy({3, 4, 5, 6}, 32, rng);
  auto params = make_pyramid_params<double>({3, 4, 5, 6}, RfaConfig{}, rng);
  auto pyr = build_pyramid<double>(nullptr, h, params, RfaConfig{}, false);
  auto ref = fpn_reference_forward<double>(h, params.lateral, params.output);
  for (int l = 0; l < 4; ++l) {
    const auto& a = pyr.p[static_cast<std::size_t>(l)];
    const auto& b = ref[static_cast<std::size_t>(l)];
    REQUIRE(a->dims == b->dims);
    for (std::int64_t i = 0; i < a->numel(); ++i) CHECK(a->data[i] == b->data[i]);
  }
}

TEST_CASE("ratio-invariant pooling stays within a unit step of the input aspect ratio") {
  Xoshiro256 rng(79);
  for (int trial = 0; trial < 50; ++trial) {
    const auto h = 20 + static_cast<std::int64_t>(rng.next_below(60));
    const auto w = 20 + static_cast<std::int64_t>(rng.next_below(60));
    const double alpha = rng.uniform(0.1, 0.9);
    auto [ph, pw] = rfa_pooled_size(alpha, h, w);
    if (pw < 2) continue;
    const double lo = (alpha * h - 1.0) / (alpha * w);
    const double hi = (alpha * h) / (alpha * w - 1.0);
    const double got = static_cast<double>(ph) / static_cast<double>(pw);
    CHECK(got >= lo - 1e-12);
    CHECK(got <= hi + 1e-12);
  }
}
