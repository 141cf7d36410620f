#include "augfpn/supervision.hpp"

#include <algorithm>

#include "augfpn/ops.hpp"

namespace augfpn {

template <typename T>
HeadParams<T> make_head_params(std::int64_t in_features, std::int64_t hidden,
                               std::int64_t num_classes, Xoshiro256& rng) {
  if (in_features < 1 || hidden < 1 || num_classes < 2) {
    throw ConfigError("head: need in_features, hidden >= 1 and num_classes >= 2");
  }
  HeadParams<T> p;
  p.in_features = in_features;
  p.num_classes = num_classes;
  p.fc1_w = make_tensor<T>({in_features, hidden}, true);
  p.fc1_b = make_tensor<T>({hidden}, true);
  p.fc2_w = make_tensor<T>({hidden, hidden}, true);
  p.fc2_b = make_tensor<T>({hidden}, true);
  p.cls_w = make_tensor<T>({hidden, num_classes}, true);
  p.cls_b = make_tensor<T>({num_classes}, true);
  p.reg_w = make_tensor<T>({hidden, 4}, true);
  p.reg_b = make_tensor<T>({4}, true);
  fill_kaiming_uniform(*p.fc1_w, in_features, rng);
  fill_kaiming_uniform(*p.fc2_w, hidden, rng);
  fill_kaiming_uniform(*p.cls_w, hidden, rng);
  fill_kaiming_uniform(*p.reg_w, hidden, rng);
  // Damped predictor layers: near-zero initial logits/deltas keep early SGD
  // steps stable (detection-head convention).
  for (auto& v : p.cls_w->data) v *= T(0.01);
  for (auto& v : p.reg_w->data) v *= T(0.001);
  return p;
}

template <typename T>
HeadOutput<T> head_forward(Tape<T>* tape, const TensorPtr<T>& roi_features,
                           const HeadParams<T>& params) {
  if (roi_features->ndim() != 2 || roi_features->dim(1) != params.in_features) {
    throw ShapeError("head_forward: expected [R," + std::to_string(params.in_features) +
                     "] features, got " + shape_string(roi_features->dims));
  }
  auto h1 = relu(tape, fully_connected(tape, roi_features, params.fc1_w, params.fc1_b));
  auto h2 = relu(tape, fully_connected(tape, h1, params.fc2_w, params.fc2_b));
  HeadOutput<T> out;
  out.class_logits = fully_connected(tape, h2, params.cls_w, params.cls_b);
  out.box_deltas = fully_connected(tape, h2, params.reg_w, params.reg_b);
  return out;
}

template <typename T>
TensorPtr<T> classification_loss(Tape<T>* tape, const TensorPtr<T>& logits,
                                 const std::vector<RoIBox>& rois) {
  std::vector<int> labels;
  labels.reserve(rois.size());
  for (const auto& r : rois) labels.push_back(r.class_target);
  return softmax_cross_entropy(tape, logits, labels);
}

template <typename T>
TensorPtr<T> localization_loss(Tape<T>* tape, const TensorPtr<T>& deltas,
                               const std::vector<RoIBox>& rois) {
  std::vector<T> targets;
  std::vector<bool> active;
  targets.reserve(rois.size() * 4);
  active.reserve(rois.size());
  for (const auto& r : rois) {
    for (double v : r.regression_target) targets.push_back(static_cast<T>(v));
    active.push_back(r.class_target > 0);
  }
  return smooth_l1(tape, deltas, targets, active);
}

namespace {

// Stack per-RoI features as flattened rows for a batched head pass.
template <typename T>
TensorPtr<T> stack_roi_features(Tape<T>* tape, const std::vector<TensorPtr<T>>& feats) {
  return stack_flatten(tape, feats);
}

template <typename T>
TensorPtr<T> zero_scalar() {
  return make_tensor<T>({1});
}

}  // namespace

template <typename T>
LossResult<T> consistent_supervision_loss(Tape<T>* tape, const Pyramid<T>& pyramid,
                                          const std::vector<RoIBox>& rois, CsMode mode,
                                          double lambda, double beta, const HeadParams<T>& aux,
                                          const HeadParams<T>& final_head,
                                          const RoiFusionConfig& srs_cfg,
                                          const SrsParams<T>& srs_params) {
  LossResult<T> result;
  result.breakdown.lambda = lambda;
  result.breakdown.beta = beta;
  if (rois.empty()) {
    result.breakdown.empty = true;
    result.total = zero_scalar<T>();
    return result;
  }

  // Final branch on the fused P features.
  std::vector<TensorPtr<T>> p_feats;
  p_feats.reserve(rois.size());
  for (const auto& roi : rois) {
    p_feats.push_back(soft_roi_select(tape, pyramid, roi, srs_cfg, srs_params));
  }
  auto p_out = head_forward(tape, stack_roi_features(tape, p_feats), final_head);
  auto l_cls_p = classification_loss(tape, p_out.class_logits, rois);
  auto l_loc_p = localization_loss(tape, p_out.box_deltas, rois);

  // Auxiliary branch on the M levels with the shared head.
  TensorPtr<T> l_cls_m, l_loc_m;
  const bool run_aux = mode != CsMode::none && lambda != 0.0;
  if (run_aux && mode == CsMode::all_level) {
    for (int l = 2; l <= 5; ++l) {
      std::vector<TensorPtr<T>> feats;
      feats.reserve(rois.size());
      for (const auto& roi : rois) {
        feats.push_back(roi_align(tape, pyramid.m_level(l), roi,
                                  kPyramidStrides[static_cast<std::size_t>(l - 2)],
                                  srs_cfg.output_h, srs_cfg.output_w, srs_cfg.sampling_ratio));
      }
      auto out = head_forward(tape, stack_roi_features(tape, feats), aux);
      auto cls = classification_loss(tape, out.class_logits, rois);
      auto loc = localization_loss(tape, out.box_deltas, rois);
      l_cls_m = l_cls_m ? add(tape, l_cls_m, cls) : cls;
      l_loc_m = l_loc_m ? add(tape, l_loc_m, loc) : loc;
    }
    // One loss term in the objective; the four levels enter as their mean.
    l_cls_m = scale(tape, l_cls_m, T(0.25));
    l_loc_m = scale(tape, l_loc_m, T(0.25));
  } else if (run_aux && mode == CsMode::single_level) {
    std::int64_t total_pos = 0;
    for (const auto& r : rois) total_pos += r.class_target > 0 ? 1 : 0;
    for (int l = 2; l <= 5; ++l) {
      std::vector<RoIBox> group;
      for (const auto& roi : rois) {
        if (assign_level(roi) == l) group.push_back(roi);
      }
      if (group.empty()) continue;
      std::vector<TensorPtr<T>> feats;
      feats.reserve(group.size());
      for (const auto& roi : group) {
        feats.push_back(roi_align(tape, pyramid.m_level(l), roi,
                                  kPyramidStrides[static_cast<std::size_t>(l - 2)],
                                  srs_cfg.output_h, srs_cfg.output_w, srs_cfg.sampling_ratio));
      }
      auto out = head_forward(tape, stack_roi_features(tape, feats), aux);
      auto cls = classification_loss(tape, out.class_logits, group);
      auto loc = localization_loss(tape, out.box_deltas, group);
      // Group means recombine into means over all RoIs / all positives.
      std::int64_t group_pos = 0;
      for (const auto& r : group) group_pos += r.class_target > 0 ? 1 : 0;
      cls = scale(tape, cls, static_cast<T>(static_cast<double>(group.size()) /
                                            static_cast<double>(rois.size())));
      if (group_pos > 0 && total_pos > 0) {
        loc = scale(tape, loc, static_cast<T>(static_cast<double>(group_pos) /
                                              static_cast<double>(total_pos)));
      }
      l_cls_m = l_cls_m ? add(tape, l_cls_m, cls) : cls;
      l_loc_m = l_loc_m ? add(tape, l_loc_m, loc) : loc;
    }
  }
  if (!l_cls_m) l_cls_m = zero_scalar<T>();
  if (!l_loc_m) l_loc_m = zero_scalar<T>();

  auto final_terms = add(tape, l_cls_p, scale(tape, l_loc_p, static_cast<T>(beta)));
  TensorPtr<T> total;
  if (run_aux) {
    auto aux_terms = add(tape, l_cls_m, scale(tape, l_loc_m, static_cast<T>(beta)));
    total = add(tape, scale(tape, aux_terms, static_cast<T>(lambda)), final_terms);
  } else {
    total = final_terms;
  }

  result.breakdown.l_cls_m = static_cast<double>(l_cls_m->data[0]);
  result.breakdown.l_loc_m = static_cast<double>(l_loc_m->data[0]);
  result.breakdown.l_cls_p = static_cast<double>(l_cls_p->data[0]);
  result.breakdown.l_loc_p = static_cast<double>(l_loc_p->data[0]);
  result.breakdown.total = static_cast<double>(total->data[0]);
  result.total = total;
  return result;
}

template <typename T>
HeadOutput<T> inference_forward(const Pyramid<T>& pyramid, const std::vector<RoIBox>& rois,
                                const HeadParams<T>& final_head, const RoiFusionConfig& srs_cfg,
                                const SrsParams<T>& srs_params) {
  if (rois.empty()) throw UsageError("inference_forward: empty RoI list");
  std::vector<TensorPtr<T>> feats;
  feats.reserve(rois.size());
  for (const auto& roi : rois) {
    feats.push_back(soft_roi_select<T>(nullptr, pyramid, roi, srs_cfg, srs_params));
  }
  return head_forward<T>(nullptr, stack_roi_features<T>(nullptr, feats), final_head);
}

template <typename T>
HeadOutput<T> baseline_head_forward(const Pyramid<T>& pyramid, const std::vector<RoIBox>& rois,
                                    const HeadParams<T>& head, const RoiFusionConfig& cfg) {
  if (rois.empty()) throw UsageError("baseline_head_forward: empty RoI list");
  std::vector<TensorPtr<T>> feats;
  feats.reserve(rois.size());
  for (const auto& roi : rois) {
    const int l = assign_level(roi);
    feats.push_back(roi_align<T>(nullptr, pyramid.p_level(l), roi,
                                 kPyramidStrides[static_cast<std::size_t>(l - 2)], cfg.output_h,
                                 cfg.output_w, cfg.sampling_ratio));
  }
  return head_forward<T>(nullptr, stack_flatten<T>(nullptr, feats), head);
}

#define AUGFPN_INSTANTIATE_SUPERVISION(T)                                                      \
  template HeadParams<T> make_head_params<T>(std::int64_t, std::int64_t, std::int64_t,         \
                                             Xoshiro256&);                                     \
  template HeadOutput<T> head_forward<T>(Tape<T>*, const TensorPtr<T>&, const HeadParams<T>&); \
  template TensorPtr<T> classification_loss<T>(Tape<T>*, const TensorPtr<T>&,                  \
                                               const std::vector<RoIBox>&);                    \
  template TensorPtr<T> localization_loss<T>(Tape<T>*, const TensorPtr<T>&,                    \
                                             const std::vector<RoIBox>&);                      \
  template LossResult<T> consistent_supervision_loss<T>(                                       \
      Tape<T>*, const Pyramid<T>&, const std::vector<RoIBox>&, CsMode, double, double,         \
      const HeadParams<T>&, const HeadParams<T>&, const RoiFusionConfig&, const SrsParams<T>&);\
  template HeadOutput<T> inference_forward<T>(const Pyramid<T>&, const std::vector<RoIBox>&,   \
                                              const HeadParams<T>&, const RoiFusionConfig&,    \
                                              const SrsParams<T>&);                            \
  template HeadOutput<T> baseline_head_forward<T>(const Pyramid<T>&, const std::vector<RoIBox>&,\
                                                  const HeadParams<T>&, const RoiFusionConfig&);

AUGFPN_INSTANTIATE_SUPERVISION(float)
AUGFPN_INSTANTIATE_SUPERVISION(double)
#undef AUGFPN_INSTANTIATE_SUPERVISION

}  // namespace augfpn
