#include "augfpn/pyramid.hpp"

#include <cmath>

namespace augfpn {

template <typename T>
void FeatureHierarchy<T>::validate() const {
  for (int l = 0; l < 4; ++l) {
    const auto& t = c[static_cast<std::size_t>(l)];
    if (!t || t->ndim() != 4) throw ShapeError("hierarchy: C levels must be 4-d NCHW tensors");
    if (t->dim(0) != c[0]->dim(0)) throw ShapeError("hierarchy: batch sizes differ across levels");
    if (l > 0) {
      const auto& prev = c[static_cast<std::size_t>(l - 1)];
      const std::int64_t want_h = (prev->dim(2) + 1) / 2;
      const std::int64_t want_w = (prev->dim(3) + 1) / 2;
      if (t->dim(2) != want_h || t->dim(3) != want_w) {
        throw ShapeError("hierarchy: level C" + std::to_string(l + 2) + " is " +
                         shape_string(t->dims) + ", expected spatial " + std::to_string(want_h) +
                         "x" + std::to_string(want_w));
      }
    }
  }
}

void RfaConfig::validate() const {
  if (pooling_kind == PoolingKind::ratio_invariant_avg) {
    if (alphas.empty()) throw ConfigError("rfa: at least one alpha required");
    double prev = 0.0;
    for (double a : alphas) {
      if (!(a > 0.0 && a <= 1.0)) throw ConfigError("rfa: alphas must lie in (0,1]");
      if (!(a > prev)) throw ConfigError("rfa: alphas must be strictly increasing");
      prev = a;
    }
  }
  if (pooling_kind == PoolingKind::fixed_psp) {
    if (psp_sizes.empty()) throw ConfigError("rfa: psp_sizes required for fixed_psp pooling");
    for (auto [h, w] : psp_sizes) {
      if (h < 1 || w < 1) throw ConfigError("rfa: psp sizes must be positive");
    }
  }
}

int RfaConfig::branch_count() const {
  switch (pooling_kind) {
    case PoolingKind::ratio_invariant_avg:
      return static_cast<int>(alphas.size());
    case PoolingKind::fixed_psp:
      return static_cast<int>(psp_sizes.size());
    case PoolingKind::global_avg:
    case PoolingKind::global_max:
      return 1;
  }
  return 0;
}

std::pair<int, int> rfa_pooled_size(double alpha, std::int64_t h, std::int64_t w) {
  const int ph = std::max<int>(1, static_cast<int>(std::floor(alpha * static_cast<double>(h))));
  const int pw = std::max<int>(1, static_cast<int>(std::floor(alpha * static_cast<double>(w))));
  return {ph, pw};
}

namespace {

template <typename T>
Conv2dParams<T> make_conv_params(std::int64_t out_c, std::int64_t in_c, std::int64_t k,
                                 Xoshiro256& rng, bool feeds_relu) {
  Conv2dParams<T> p;
  p.w = make_tensor<T>({out_c, in_c, k, k}, true);
  p.b = make_tensor<T>({out_c}, true);
  if (feeds_relu) {
    fill_kaiming_uniform(*p.w, in_c * k * k, rng);
  } else {
    fill_linear_uniform(*p.w, in_c * k * k, rng);
  }
  return p;
}

}  // namespace

template <typename T>
AsfParams<T> make_asf_params(int k_inputs, int channels, Xoshiro256& rng) {
  if (k_inputs < 1) throw ConfigError("asf: needs at least one input");
  AsfParams<T> p;
  const std::int64_t cat = static_cast<std::int64_t>(k_inputs) * channels;
  const std::int64_t hidden = cat / 4;
  p.reduce = make_conv_params<T>(hidden, cat, 1, rng, /*feeds_relu=*/true);
  p.logits = make_conv_params<T>(k_inputs, hidden, 3, rng, /*feeds_relu=*/false);
  p.fan_in_count = k_inputs;
  return p;
}

template <typename T>
PyramidParams<T> make_pyramid_params(const std::array<std::int64_t, 4>& in_channels,
                                     const RfaConfig& cfg, Xoshiro256& rng) {
  cfg.validate();
  PyramidParams<T> p;
  for (int l = 0; l < 4; ++l) {
    p.lateral[static_cast<std::size_t>(l)] = make_conv_params<T>(
        kPyramidChannels, in_channels[static_cast<std::size_t>(l)], 1, rng, /*feeds_relu=*/false);
  }
  for (int l = 0; l < 4; ++l) {
    p.output[static_cast<std::size_t>(l)] = make_conv_params<T>(
        kPyramidChannels, kPyramidChannels, 3, rng, /*feeds_relu=*/false);
  }
  const int branches = cfg.branch_count();
  for (int k = 0; k < branches; ++k) {
    p.rfa_reduce.push_back(
        make_conv_params<T>(kPyramidChannels, in_channels[3], 1, rng, /*feeds_relu=*/false));
  }
  p.rfa_asf = make_asf_params<T>(branches, kPyramidChannels, rng);
  return p;
}

template <typename T>
std::array<TensorPtr<T>, 4> lateral_connect(Tape<T>* tape, const FeatureHierarchy<T>& hierarchy,
                                            const std::array<Conv2dParams<T>, 4>& lateral) {
  hierarchy.validate();
  std::array<TensorPtr<T>, 4> m;
  for (std::size_t l = 0; l < 4; ++l) {
    m[l] = conv2d(tape, hierarchy.c[l], lateral[l].w, lateral[l].b, 1, 0);
  }
  return m;
}

template <typename T>
AsfResult<T> adaptive_spatial_fusion(Tape<T>* tape, const std::vector<TensorPtr<T>>& features,
                                     const AsfParams<T>& params, AsfNorm norm) {
  if (features.empty()) throw ShapeError("asf: empty feature list");
  const int k = static_cast<int>(features.size());
  if (params.fan_in_count != k) {
    throw ConfigError("asf: params built for " + std::to_string(params.fan_in_count) +
                      " inputs, got " + std::to_string(k));
  }
  auto cat = concat_channels(tape, features);
  auto hidden = relu(tape, conv2d(tape, cat, params.reduce.w, params.reduce.b, 1, 0));
  auto logit_maps = conv2d(tape, hidden, params.logits.w, params.logits.b, 1, 1);
  auto split = split_channels(tape, logit_maps, k);

  AsfResult<T> result;
  if (norm == AsfNorm::softmax) {
    result.weight_maps = softmax_over_group(tape, split);
  } else {
    result.weight_maps.reserve(split.size());
    for (const auto& s : split) result.weight_maps.push_back(sigmoid(tape, s));
  }
  result.fused = channel_scale(tape, features[0], result.weight_maps[0]);
  for (int i = 1; i < k; ++i) {
    result.fused =
        add(tape, result.fused,
            channel_scale(tape, features[static_cast<std::size_t>(i)],
                          result.weight_maps[static_cast<std::size_t>(i)]));
  }
  return result;
}

template <typename T>
TensorPtr<T> residual_feature_augmentation(Tape<T>* tape, const TensorPtr<T>& c5,
                                           const RfaConfig& cfg,
                                           const std::vector<Conv2dParams<T>>& reduce,
                                           const AsfParams<T>& asf) {
  cfg.validate();
  const std::int64_t h5 = c5->dim(2), w5 = c5->dim(3);
  const int branches = cfg.branch_count();
  if (static_cast<int>(reduce.size()) != branches) {
    throw ConfigError("rfa: expected " + std::to_string(branches) + " reduction convs, got " +
                      std::to_string(reduce.size()));
  }

  std::vector<TensorPtr<T>> upsampled;
  upsampled.reserve(static_cast<std::size_t>(branches));
  for (int k = 0; k < branches; ++k) {
    TensorPtr<T> pooled;
    switch (cfg.pooling_kind) {
      case PoolingKind::ratio_invariant_avg: {
        auto [ph, pw] = rfa_pooled_size(cfg.alphas[static_cast<std::size_t>(k)], h5, w5);
        pooled = adaptive_avg_pool2d(tape, c5, ph, pw);
        break;
      }
      case PoolingKind::global_avg:
        pooled = adaptive_avg_pool2d(tape, c5, 1, 1);
        break;
      case PoolingKind::global_max:
        pooled = global_max_pool(tape, c5);
        break;
      case PoolingKind::fixed_psp: {
        auto [ph, pw] = cfg.psp_sizes[static_cast<std::size_t>(k)];
        if (ph > h5 || pw > w5) {
          throw ConfigError("rfa: psp size " + std::to_string(ph) + "x" + std::to_string(pw) +
                            " exceeds C5 extent " + std::to_string(h5) + "x" + std::to_string(w5));
        }
        pooled = adaptive_avg_pool2d(tape, c5, ph, pw);
        break;
      }
    }
    const auto& r = reduce[static_cast<std::size_t>(k)];
    auto ctx = conv2d(tape, pooled, r.w, r.b, 1, 0);
    upsampled.push_back(bilinear_resize(tape, ctx, static_cast<int>(h5), static_cast<int>(w5)));
  }

  if (cfg.fusion_kind == FusionKind::asf) {
    return adaptive_spatial_fusion(tape, upsampled, asf, cfg.asf_norm).fused;
  }
  auto m6 = upsampled[0];
  for (std::size_t k = 1; k < upsampled.size(); ++k) m6 = add(tape, m6, upsampled[k]);
  return m6;
}

template <typename T>
std::array<TensorPtr<T>, 4> topdown_fuse(Tape<T>* tape, const std::array<TensorPtr<T>, 4>& m,
                                         const TensorPtr<T>& m6,
                                         const std::array<Conv2dParams<T>, 4>& output) {
  std::array<TensorPtr<T>, 4> merged;
  merged[3] = m6 ? add(tape, m[3], m6) : m[3];
  for (int l = 2; l >= 0; --l) {
    auto up = bilinear_resize(tape, merged[static_cast<std::size_t>(l + 1)],
                              static_cast<int>(m[static_cast<std::size_t>(l)]->dim(2)),
                              static_cast<int>(m[static_cast<std::size_t>(l)]->dim(3)));
    merged[static_cast<std::size_t>(l)] = add(tape, m[static_cast<std::size_t>(l)], up);
  }
  std::array<TensorPtr<T>, 4> p;
  for (std::size_t l = 0; l < 4; ++l) {
    p[l] = conv2d(tape, merged[l], output[l].w, output[l].b, 1, 1);
  }
  return p;
}

template <typename T>
Pyramid<T> build_pyramid(Tape<T>* tape, const FeatureHierarchy<T>& hierarchy,
                         const PyramidParams<T>& params, const RfaConfig& cfg, bool rfa_enabled) {
  Pyramid<T> pyr;
  pyr.m = lateral_connect(tape, hierarchy, params.lateral);
  if (rfa_enabled) {
    pyr.m6 = residual_feature_augmentation(tape, hierarchy.c[3], cfg, params.rfa_reduce,
                                           params.rfa_asf);
  }
  pyr.p = topdown_fuse(tape, pyr.m, pyr.m6, params.output);
  return pyr;
}

#define AUGFPN_INSTANTIATE_PYRAMID(T)                                                         \
  template struct FeatureHierarchy<T>;                                                        \
  template AsfParams<T> make_asf_params<T>(int, int, Xoshiro256&);                            \
  template PyramidParams<T> make_pyramid_params<T>(const std::array<std::int64_t, 4>&,        \
                                                   const RfaConfig&, Xoshiro256&);            \
  template std::array<TensorPtr<T>, 4> lateral_connect<T>(                                    \
      Tape<T>*, const FeatureHierarchy<T>&, const std::array<Conv2dParams<T>, 4>&);           \
  template AsfResult<T> adaptive_spatial_fusion<T>(Tape<T>*, const std::vector<TensorPtr<T>>&,\
                                                   const AsfParams<T>&, AsfNorm);             \
  template TensorPtr<T> residual_feature_augmentation<T>(                                     \
      Tape<T>*, const TensorPtr<T>&, const RfaConfig&, const std::vector<Conv2dParams<T>>&,   \
      const AsfParams<T>&);                                                                   \
  template std::array<TensorPtr<T>, 4> topdown_fuse<T>(Tape<T>*,                              \
                                                       const std::array<TensorPtr<T>, 4>&,    \
                                                       const TensorPtr<T>&,                   \
                                                       const std::array<Conv2dParams<T>, 4>&);\
  template Pyramid<T> build_pyramid<T>(Tape<T>*, const FeatureHierarchy<T>&,                  \
                                       const PyramidParams<T>&, const RfaConfig&, bool);

AUGFPN_INSTANTIATE_PYRAMID(float)
AUGFPN_INSTANTIATE_PYRAMID(double)
#undef AUGFPN_INSTANTIATE_PYRAMID

}  // namespace augfpn
