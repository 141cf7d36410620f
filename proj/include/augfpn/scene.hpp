#ifndef AUGFPN_SCENE_HPP
#define AUGFPN_SCENE_HPP

#include <vector>

#include "augfpn/config.hpp"
#include "augfpn/pyramid.hpp"
#include "augfpn/roi.hpp"

namespace augfpn {

/// A backbone/RPN stand-in. Objects stamp class-specific patterns into C2..C5
/// at the correct strides; proposals are jittered ground-truth boxes plus
/// random negatives, labeled by IoU (>= 0.5 positive, else background).
template <typename T>
struct SyntheticScene {
  FeatureHierarchy<T> hierarchy;
  std::vector<RoIBox> ground_truth;
  std::vector<RoIBox> proposals;
};

double iou(const RoIBox& a, const RoIBox& b);

/// Standard (dx, dy, dw, dh) center-offset / log-size encoding of `gt`
/// relative to `proposal`.
std::array<double, 4> encode_box_deltas(const RoIBox& gt, const RoIBox& proposal);

/// Deterministic function of (cfg.seed, scene_index).
template <typename T>
SyntheticScene<T> make_scene(const RunConfig& cfg, int scene_index);

template <typename T>
std::vector<SyntheticScene<T>> make_scenes(const RunConfig& cfg);

/// Checks: every ground-truth box has a proposal with IoU >= 0.5, and every
/// proposal's label obeys the IoU rule. Throws UsageError on violation.
template <typename T>
void validate_scene(const SyntheticScene<T>& scene);

}  // namespace augfpn

#endif  // AUGFPN_SCENE_HPP
