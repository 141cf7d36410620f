#ifndef AUGFPN_PYRAMID_HPP
#define AUGFPN_PYRAMID_HPP

#include <array>
#include <utility>
#include <vector>

#include "augfpn/ops.hpp"
#include "augfpn/rng.hpp"
#include "augfpn/tensor.hpp"

namespace augfpn {

inline constexpr int kPyramidChannels = 256;
inline constexpr std::array<int, 4> kPyramidStrides = {4, 8, 16, 32};

/// Backbone-style inputs C2..C5 at strides {4,8,16,32}. Each level's spatial
/// dims are exactly half (rounded up) the previous level's.
template <typename T>
struct FeatureHierarchy {
  std::array<TensorPtr<T>, 4> c;  // c[0]=C2 .. c[3]=C5

  void validate() const;
  const TensorPtr<T>& level(int l) const { return c[static_cast<std::size_t>(l - 2)]; }
};

/// Laterally reduced M2..M5, the residual context feature M6 (null when the
/// residual branch is off), and the final P2..P5 maps. All 256 channels.
template <typename T>
struct Pyramid {
  std::array<TensorPtr<T>, 4> m;
  TensorPtr<T> m6;
  std::array<TensorPtr<T>, 4> p;

  const TensorPtr<T>& m_level(int l) const { return m[static_cast<std::size_t>(l - 2)]; }
  const TensorPtr<T>& p_level(int l) const { return p[static_cast<std::size_t>(l - 2)]; }
};

enum class PoolingKind { ratio_invariant_avg, global_avg, global_max, fixed_psp };
enum class FusionKind { asf, sum };
enum class AsfNorm { softmax, sigmoid };  // sigmoid is the experimental escape hatch

/// Residual-branch configuration. Alphas must be strictly increasing, each in
/// (0,1]. psp_sizes are used only by the fixed_psp pooling variant.
struct RfaConfig {
  std::vector<double> alphas = {0.1, 0.2, 0.3};
  PoolingKind pooling_kind = PoolingKind::ratio_invariant_avg;
  FusionKind fusion_kind = FusionKind::asf;
  std::vector<std::pair<int, int>> psp_sizes = {{1, 1}, {2, 2}, {3, 3}};
  AsfNorm asf_norm = AsfNorm::softmax;

  void validate() const;
  /// Number of pooled context branches this config produces.
  int branch_count() const;
};

/// Pooled target size for one alpha: max(1, floor(alpha * dim)).
std::pair<int, int> rfa_pooled_size(double alpha, std::int64_t h, std::int64_t w);

template <typename T>
struct Conv2dParams {
  TensorPtr<T> w;
  TensorPtr<T> b;
};

/// Adaptive Spatial Fusion weights: a 1x1 reduction conv (K*256 -> 64*K) and a
/// 3x3 conv emitting one logit map per fused input.
template <typename T>
struct AsfParams {
  Conv2dParams<T> reduce;
  Conv2dParams<T> logits;
  int fan_in_count = 0;  // K the params were built for
};

template <typename T>
AsfParams<T> make_asf_params(int k_inputs, int channels, Xoshiro256& rng);

template <typename T>
struct PyramidParams {
  std::array<Conv2dParams<T>, 4> lateral;   // 1x1, C_l -> 256
  std::array<Conv2dParams<T>, 4> output;    // 3x3 pad 1, 256 -> 256, per level
  std::vector<Conv2dParams<T>> rfa_reduce;  // 1x1, C5 -> 256, one per branch
  AsfParams<T> rfa_asf;
};

template <typename T>
PyramidParams<T> make_pyramid_params(const std::array<std::int64_t, 4>& in_channels,
                                     const RfaConfig& cfg, Xoshiro256& rng);

/// M_l = conv1x1(C_l) for every level.
template <typename T>
std::array<TensorPtr<T>, 4> lateral_connect(Tape<T>* tape, const FeatureHierarchy<T>& hierarchy,
                                            const std::array<Conv2dParams<T>, 4>& lateral);

/// Fused output plus the per-input spatial weight maps (kept for analysis).
template <typename T>
struct AsfResult {
  TensorPtr<T> fused;
  std::vector<TensorPtr<T>> weight_maps;
};

template <typename T>
AsfResult<T> adaptive_spatial_fusion(Tape<T>* tape, const std::vector<TensorPtr<T>>& features,
                                     const AsfParams<T>& params,
                                     AsfNorm norm = AsfNorm::softmax);

/// Multi-ratio pooled context from C5, reduced to 256 channels, upsampled back
/// to C5's size and fused into the residual feature M6.
template <typename T>
TensorPtr<T> residual_feature_augmentation(Tape<T>* tape, const TensorPtr<T>& c5,
                                           const RfaConfig& cfg,
                                           const std::vector<Conv2dParams<T>>& reduce,
                                           const AsfParams<T>& asf);

/// Top-down pathway: t5 = m5 (+ m6 when present), t_l = m_l + resize(t_{l+1}),
/// then a per-level 3x3 output conv produces P2..P5.
template <typename T>
std::array<TensorPtr<T>, 4> topdown_fuse(Tape<T>* tape, const std::array<TensorPtr<T>, 4>& m,
                                         const TensorPtr<T>& m6,
                                         const std::array<Conv2dParams<T>, 4>& output);

/// Full pyramid per the configuration. With rfa_enabled=false no residual
/// branch runs and the result is the plain FPN path.
template <typename T>
Pyramid<T> build_pyramid(Tape<T>* tape, const FeatureHierarchy<T>& hierarchy,
                         const PyramidParams<T>& params, const RfaConfig& cfg, bool rfa_enabled);

}  // namespace augfpn

#endif  // AUGFPN_PYRAMID_HPP
