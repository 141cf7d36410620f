#ifndef AUGFPN_SUPERVISION_HPP
#define AUGFPN_SUPERVISION_HPP

#include <vector>

#include "augfpn/roi.hpp"

namespace augfpn {

/// Two-FC detection head with a (K+1)-way classifier and a class-agnostic
/// 4-d regressor. The auxiliary branch shares ONE instance across all M
/// levels; the final branch has its own.
template <typename T>
struct HeadParams {
  TensorPtr<T> fc1_w, fc1_b;
  TensorPtr<T> fc2_w, fc2_b;
  TensorPtr<T> cls_w, cls_b;
  TensorPtr<T> reg_w, reg_b;
  std::int64_t in_features = 0;
  std::int64_t num_classes = 0;  // including background
};

template <typename T>
HeadParams<T> make_head_params(std::int64_t in_features, std::int64_t hidden,
                               std::int64_t num_classes, Xoshiro256& rng);

template <typename T>
struct HeadOutput {
  TensorPtr<T> class_logits;  // [R, K+1]
  TensorPtr<T> box_deltas;    // [R, 4]
};

/// flatten -> FC -> ReLU -> FC -> ReLU -> parallel classifier/regressor.
template <typename T>
HeadOutput<T> head_forward(Tape<T>* tape, const TensorPtr<T>& roi_features,
                           const HeadParams<T>& params);

/// Mean softmax cross-entropy over the RoI batch.
template <typename T>
TensorPtr<T> classification_loss(Tape<T>* tape, const TensorPtr<T>& logits,
                                 const std::vector<RoIBox>& rois);

/// Smooth-L1 over the 4 coordinates, averaged over positive RoIs and exactly
/// zero when there are none (the [t*>0] indicator).
template <typename T>
TensorPtr<T> localization_loss(Tape<T>* tape, const TensorPtr<T>& deltas,
                               const std::vector<RoIBox>& rois);

enum class CsMode { none, single_level, all_level };

/// All loss terms, already indicator-masked, plus the composed total:
/// total = lambda*(l_cls_m + beta*l_loc_m) + l_cls_p + beta*l_loc_p.
struct LossBreakdown {
  double l_cls_m = 0, l_loc_m = 0, l_cls_p = 0, l_loc_p = 0;
  double total = 0;
  double lambda = 0, beta = 0;
  bool empty = false;  // set when the RoI list was empty

  double recompose() const { return lambda * (l_cls_m + beta * l_loc_m) + l_cls_p + beta * l_loc_p; }
};

template <typename T>
struct LossResult {
  LossBreakdown breakdown;
  TensorPtr<T> total;  // scalar on the tape; backward() through this
};

/// Final-branch loss on the fused P features plus the auxiliary branch on the
/// M levels (all_level: every RoI on every M level, losses averaged across the
/// 4 levels; single_level: each RoI only on its heuristically assigned level;
/// none: lambda treated as zero and the auxiliary head never runs).
template <typename T>
LossResult<T> consistent_supervision_loss(Tape<T>* tape, const Pyramid<T>& pyramid,
                                          const std::vector<RoIBox>& rois, CsMode mode,
                                          double lambda, double beta, const HeadParams<T>& aux,
                                          const HeadParams<T>& final_head,
                                          const RoiFusionConfig& srs_cfg,
                                          const SrsParams<T>& srs_params);

/// Inference path: final branch only. Auxiliary parameters are not an input,
/// so outputs cannot depend on them.
template <typename T>
HeadOutput<T> inference_forward(const Pyramid<T>& pyramid, const std::vector<RoIBox>& rois,
                                const HeadParams<T>& final_head, const RoiFusionConfig& srs_cfg,
                                const SrsParams<T>& srs_params);

/// The classic FPN head path (heuristic level assignment, no fusion),
/// composed independently for kernel-count comparisons.
template <typename T>
HeadOutput<T> baseline_head_forward(const Pyramid<T>& pyramid, const std::vector<RoIBox>& rois,
                                    const HeadParams<T>& head, const RoiFusionConfig& cfg);

}  // namespace augfpn

#endif  // AUGFPN_SUPERVISION_HPP
