#include "augfpn/parity.hpp"

#include <cstring>
#include <sstream>

#include "augfpn/fpn_reference.hpp"
#include "augfpn/model.hpp"
#include "augfpn/scene.hpp"

namespace augfpn {

namespace {

using DTensor = TensorPtr<double>;

// Bitwise comparison; reports the first divergent element.
bool bitwise_equal(const DTensor& a, const DTensor& b, const std::string& label,
                   std::string* detail) {
  if (a->dims != b->dims) {
    *detail = label + ": shape mismatch " + shape_string(a->dims) + " vs " + shape_string(b->dims);
    return false;
  }
  for (std::int64_t i = 0; i < a->numel(); ++i) {
    if (std::memcmp(&a->data[i], &b->data[i], sizeof(double)) != 0) {
      std::ostringstream os;
      os.precision(17);
      os << label << "[" << i << "]: " << a->data[i] << " vs " << b->data[i];
      *detail = os.str();
      return false;
    }
  }
  return true;
}

void zero_conv(Conv2dParams<double>& conv) {
  std::fill(conv.w->data.begin(), conv.w->data.end(), 0.0);
  std::fill(conv.b->data.begin(), conv.b->data.end(), 0.0);
}

void randomize_head(HeadParams<double>& head, std::uint64_t seed) {
  Xoshiro256 rng(seed);
  for (const auto& t : {head.fc1_w, head.fc1_b, head.fc2_w, head.fc2_b, head.cls_w, head.cls_b,
                        head.reg_w, head.reg_b}) {
    fill_uniform(*t, -1.0, 1.0, rng);
  }
}

}  // namespace

ParityReport parity_check(std::uint64_t seed) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.image_h = cfg.image_w = 32;
  cfg.channels = {6, 8, 10, 12};
  cfg.classes = 2;
  cfg.scenes = 1;
  cfg.objects_per_scene = 2;
  cfg.negatives_per_positive = 2;
  cfg.head_hidden = 32;
  cfg.precision = 64;

  auto model = make_model<double>(cfg);
  auto scene = make_scene<double>(cfg, 0);
  const RfaConfig rfa = cfg.rfa_config();

  ParityReport report;
  auto push = [&report](std::string name, bool pass, std::string detail) {
    report.all_pass = report.all_pass && pass;
    report.checks.push_back({std::move(name), pass, std::move(detail)});
  };

  {
    // (a) residual branch zeroed: tape pyramid == straight-line FPN, bitwise.
    // Param structs share tensors, so zeroing mutates the model; the random
    // weights are restored right after for the divergence check.
    std::vector<std::vector<double>> saved;
    for (auto& conv : model.pyramid.rfa_reduce) {
      saved.push_back(conv.w->data);
      saved.push_back(conv.b->data);
      zero_conv(conv);
    }
    auto pyr = build_pyramid<double>(nullptr, scene.hierarchy, model.pyramid, rfa, true);
    auto ref = fpn_reference_forward<double>(scene.hierarchy, model.pyramid.lateral,
                                             model.pyramid.output);
    bool pass = true;
    std::string detail;
    for (int l = 0; l < 4 && pass; ++l) {
      pass = bitwise_equal(pyr.p[static_cast<std::size_t>(l)], ref[static_cast<std::size_t>(l)],
                           "p" + std::to_string(l + 2), &detail);
    }
    push("rfa_zeroed_equals_plain_fpn", pass, detail);
    std::size_t i = 0;
    for (auto& conv : model.pyramid.rfa_reduce) {
      conv.w->data = saved[i++];
      conv.b->data = saved[i++];
    }
  }
  {
    // (b) with the residual branch active the pyramid must diverge.
    auto pyr = build_pyramid<double>(nullptr, scene.hierarchy, model.pyramid, rfa, true);
    auto ref = fpn_reference_forward<double>(scene.hierarchy, model.pyramid.lateral,
                                             model.pyramid.output);
    bool diverged = false;
    std::string unused;
    for (int l = 0; l < 4 && !diverged; ++l) {
      diverged = !bitwise_equal(pyr.p[static_cast<std::size_t>(l)],
                                ref[static_cast<std::size_t>(l)], "p", &unused);
    }
    push("rfa_enabled_diverges (expected divergence)", diverged,
         diverged ? "" : "residual branch had no effect");
  }
  {
    // (c) heuristic RoI selection == baseline assign+align path, bitwise.
    auto pyr = build_pyramid<double>(nullptr, scene.hierarchy, model.pyramid, rfa, true);
    RoiFusionConfig heuristic = cfg.srs_config();
    heuristic.mode = RoiFusionMode::heuristic_single_level;
    bool pass = true;
    std::string detail;
    for (std::size_t i = 0; i < scene.proposals.size() && pass; ++i) {
      const auto& roi = scene.proposals[i];
      auto fused = soft_roi_select<double>(nullptr, pyr, roi, heuristic, model.srs);
      const int l = assign_level(roi);
      auto direct = roi_align<double>(nullptr, pyr.p_level(l), roi,
                                      kPyramidStrides[static_cast<std::size_t>(l - 2)]);
      pass = bitwise_equal(fused, direct, "roi" + std::to_string(i), &detail);
    }
    push("heuristic_srs_equals_baseline_roi_path", pass, detail);
  }
  {
    // (d) inference ignores auxiliary-head state entirely.
    auto pyr = build_pyramid<double>(nullptr, scene.hierarchy, model.pyramid, rfa, true);
    const RoiFusionConfig srs_cfg = cfg.srs_config();
    auto out1 = inference_forward(pyr, scene.proposals, model.final_head, srs_cfg, model.srs);
    randomize_head(model.aux_head, seed ^ 0xabcdef12345ULL);
    auto out2 = inference_forward(pyr, scene.proposals, model.final_head, srs_cfg, model.srs);
    randomize_head(model.aux_head, seed ^ 0x9182736450ULL);
    auto out3 = inference_forward(pyr, scene.proposals, model.final_head, srs_cfg, model.srs);
    std::string detail;
    bool pass = bitwise_equal(out1.class_logits, out2.class_logits, "logits", &detail) &&
                bitwise_equal(out1.box_deltas, out2.box_deltas, "deltas", &detail) &&
                bitwise_equal(out1.class_logits, out3.class_logits, "logits", &detail) &&
                bitwise_equal(out1.box_deltas, out3.box_deltas, "deltas", &detail);
    push("inference_invariant_to_aux_heads", pass, detail);
  }
  {
    // (e) heuristic-mode inference does exactly the baseline head's kernels.
    auto pyr = build_pyramid<double>(nullptr, scene.hierarchy, model.pyramid, rfa, true);
    RoiFusionConfig heuristic = cfg.srs_config();
    heuristic.mode = RoiFusionMode::heuristic_single_level;
    KernelCounter::enable();
    KernelCounter::reset();
    (void)inference_forward(pyr, scene.proposals, model.final_head, heuristic, model.srs);
    const auto counts_inference = KernelCounter::snapshot();
    KernelCounter::reset();
    (void)baseline_head_forward(pyr, scene.proposals, model.final_head, heuristic);
    const auto counts_baseline = KernelCounter::snapshot();
    KernelCounter::disable();
    std::string detail;
    bool pass = counts_inference == counts_baseline;
    if (!pass) {
      std::ostringstream os;
      os << "kernel counts differ:";
      for (const auto& [k, v] : counts_inference) os << " " << k << "=" << v;
      os << " vs";
      for (const auto& [k, v] : counts_baseline) os << " " << k << "=" << v;
      detail = os.str();
    }
    push("inference_kernel_counts_match_baseline_head", pass, detail);
  }
  return report;
}

}  // namespace augfpn
