#ifndef AUGFPN_ROI_HPP
#define AUGFPN_ROI_HPP

#include <array>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "augfpn/pyramid.hpp"
#include "augfpn/tensor.hpp"

namespace augfpn {

/// One region proposal in image coordinates, with its assigned targets.
/// t* (class_target) 0 means background; the regression target is ignored by
/// every loss in that case.
struct RoIBox {
  int batch_index = 0;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  int class_target = 0;
  std::array<double, 4> regression_target{0, 0, 0, 0};

  RoIBox(int batch, double bx1, double by1, double bx2, double by2, int t_star = 0,
         std::array<double, 4> b_star = {0, 0, 0, 0});

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
};

enum class RoiFusionMode { heuristic_single_level, sum, max, acf, asf };

struct RoiFusionConfig {
  RoiFusionMode mode = RoiFusionMode::asf;
  int output_h = 7;
  int output_w = 7;
  int sampling_ratio = 2;
  int acf_reduction = 4;

  void validate() const;
};

/// FPN heuristic: level = clamp(floor(k0 + log2(sqrt(w*h) / 224)), 2, 5).
int assign_level(const RoIBox& roi, int k0 = 4);

/// Quantization-free RoI feature extraction. The box is scaled into feature
/// coordinates by 1/stride (no rounding) and each output bin averages
/// sampling_ratio^2 bilinear samples at regular sub-bin centers.
/// Throws UsageError if the scaled box lies fully outside the feature.
template <typename T>
TensorPtr<T> roi_align(Tape<T>* tape, const TensorPtr<T>& feature, const RoIBox& roi, int stride,
                       int out_h = 7, int out_w = 7, int sampling_ratio = 2);

/// SE-style channel gates over the concatenated RoI features.
template <typename T>
struct AcfParams {
  TensorPtr<T> fc1_w, fc1_b;  // [K*C, (K*C)/reduction]
  TensorPtr<T> fc2_w, fc2_b;  // [(K*C)/reduction, K*C]
  int fan_in_count = 0;
};

template <typename T>
AcfParams<T> make_acf_params(int k_inputs, int channels, int reduction, Xoshiro256& rng);

/// concat -> global average pool -> FC bottleneck -> sigmoid gates -> gated
/// features summed across the K inputs. Inputs are [C,H,W] per level.
template <typename T>
TensorPtr<T> adaptive_channel_fusion(Tape<T>* tape, const std::vector<TensorPtr<T>>& features,
                                     const AcfParams<T>& params);

/// Learned fusion parameters for Soft RoI Selection. The ASF instance is
/// distinct from the one inside the residual branch (same design, own weights).
template <typename T>
struct SrsParams {
  AsfParams<T> asf;
  AcfParams<T> acf;
};

template <typename T>
SrsParams<T> make_srs_params(const RoiFusionConfig& cfg, Xoshiro256& rng);

/// Per-RoI feature from the pyramid under the configured fusion mode. All
/// non-heuristic modes pool from every level in fixed order P2,P3,P4,P5.
template <typename T>
TensorPtr<T> soft_roi_select(Tape<T>* tape, const Pyramid<T>& pyramid, const RoIBox& roi,
                             const RoiFusionConfig& cfg, const SrsParams<T>& params);

/// Mean ASF weight per source level for one RoI (averages each weight map over
/// all output positions). Sums to 1.
template <typename T>
std::array<double, 4> asf_weight_fractions(const Pyramid<T>& pyramid, const RoIBox& roi,
                                           const RoiFusionConfig& cfg, const AsfParams<T>& asf);

/// 4x4 matrix of mean ASF weight fractions, rows indexed by the level the RoI
/// would be heuristically assigned to, columns by source level. Rows with no
/// RoIs are left absent rather than fabricated.
struct RatioMatrix {
  std::array<std::optional<std::array<double, 4>>, 4> rows;
  std::array<int, 4> counts{0, 0, 0, 0};
};

template <typename T>
RatioMatrix weight_ratio_stats(const std::vector<RoIBox>& rois, const Pyramid<T>& pyramid,
                               const RoiFusionConfig& cfg, const AsfParams<T>& asf);

/// Text interchange: one RoI per line,
///   batch_index x1 y1 x2 y2 [t* b0 b1 b2 b3]
/// whitespace-separated with '#' comments.
std::vector<RoIBox> parse_roi_lines(std::istream& in);
std::vector<RoIBox> load_roi_file(const std::string& path);
void save_roi_file(const std::vector<RoIBox>& rois, const std::string& path);

}  // namespace augfpn

#endif  // AUGFPN_ROI_HPP
