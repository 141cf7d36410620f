#include "augfpn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "augfpn/model.hpp"
#include "augfpn/ops.hpp"
#include "augfpn/scene.hpp"

namespace augfpn {

double fd_relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

namespace {

constexpr double kFdStep = 1e-5;

using DTensor = TensorPtr<double>;
using Forward = std::function<DTensor(Tape<double>*)>;

struct CaseSpec {
  std::string name;
  std::vector<DTensor> leaves;
  Forward forward;
  double tolerance = 1e-4;
  int samples_per_leaf = 0;  // 0 = check every element
};

double run_case(const CaseSpec& spec, Xoshiro256& sample_rng) {
  for (const auto& leaf : spec.leaves) leaf->zero_grad();
  Tape<double> tape;
  auto root = spec.forward(&tape);
  if (root->numel() != 1) throw UsageError("gradcheck: case must produce a scalar");
  backward(tape, root);

  double worst = 0.0;
  for (const auto& leaf : spec.leaves) {
    const std::int64_t n = leaf->numel();
    std::vector<std::int64_t> indices;
    if (spec.samples_per_leaf <= 0 || n <= spec.samples_per_leaf) {
      indices.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) indices[static_cast<std::size_t>(i)] = i;
    } else {
      for (int s = 0; s < spec.samples_per_leaf; ++s) {
        indices.push_back(static_cast<std::int64_t>(
            sample_rng.next_below(static_cast<std::uint64_t>(n))));
      }
    }
    for (std::int64_t idx : indices) {
      const double orig = leaf->data[static_cast<std::size_t>(idx)];
      leaf->data[static_cast<std::size_t>(idx)] = orig + kFdStep;
      const double up = spec.forward(nullptr)->data[0];
      leaf->data[static_cast<std::size_t>(idx)] = orig - kFdStep;
      const double down = spec.forward(nullptr)->data[0];
      leaf->data[static_cast<std::size_t>(idx)] = orig;
      const double fd = (up - down) / (2.0 * kFdStep);
      worst = std::max(worst, fd_relative_error(fd, leaf->grad[static_cast<std::size_t>(idx)]));
    }
  }
  return worst;
}

DTensor rand_tensor(std::vector<std::int64_t> dims, Xoshiro256& rng, bool requires_grad = true) {
  auto t = make_tensor<double>(std::move(dims), requires_grad);
  fill_uniform(*t, -1.0, 1.0, rng);
  return t;
}

// Pushes values out of a margin around `point` so finite differences never
// straddle a kink (relu at 0, smooth-L1 at |d| = 1, max ties).
void nudge_away(const DTensor& t, double point, double margin) {
  for (auto& v : t->data) {
    if (std::abs(v - point) < margin) v = point + (v >= point ? margin : -margin);
  }
}

// loss = sum(out * r) with fixed random projection weights r.
DTensor project(Tape<double>* tape, const DTensor& out, const DTensor& r) {
  return sum_all(tape, mul(tape, out, r));
}

}  // namespace

GradCheckReport gradcheck_all(std::uint64_t seed) {
  Xoshiro256 rng(seed ^ 0x6b79ddc0a9a2a317ULL);
  Xoshiro256 sample_rng(seed ^ 0x1f123bb5159a55e5ULL);
  std::vector<CaseSpec> cases;

  {
    auto x = rand_tensor({2, 3, 5, 5}, rng);
    auto w = rand_tensor({4, 3, 3, 3}, rng);
    auto b = rand_tensor({4}, rng);
    auto r = rand_tensor({2, 4, 3, 3}, rng, false);
    cases.push_back({"conv2d_s1p0", {x, w, b}, [=](Tape<double>* t) {
                       return project(t, conv2d(t, x, w, b, 1, 0), r);
                     }});
  }
  {
    auto x = rand_tensor({1, 2, 5, 5}, rng);
    auto w = rand_tensor({3, 2, 3, 3}, rng);
    auto b = rand_tensor({3}, rng);
    auto r = rand_tensor({1, 3, 5, 5}, rng, false);
    cases.push_back({"conv2d_s1p1", {x, w, b}, [=](Tape<double>* t) {
                       return project(t, conv2d(t, x, w, b, 1, 1), r);
                     }});
  }
  {
    auto x = rand_tensor({1, 2, 5, 5}, rng);
    auto w = rand_tensor({2, 2, 3, 3}, rng);
    auto b = rand_tensor({2}, rng);
    auto r = rand_tensor({1, 2, 3, 3}, rng, false);
    cases.push_back({"conv2d_s2p1", {x, w, b}, [=](Tape<double>* t) {
                       return project(t, conv2d(t, x, w, b, 2, 1), r);
                     }});
  }
  {
    auto x = rand_tensor({1, 3, 4, 4}, rng);
    auto w = rand_tensor({5, 3, 1, 1}, rng);
    auto b = rand_tensor({5}, rng);
    auto r = rand_tensor({1, 5, 4, 4}, rng, false);
    cases.push_back({"conv2d_1x1", {x, w, b}, [=](Tape<double>* t) {
                       return project(t, conv2d(t, x, w, b, 1, 0), r);
                     }});
  }
  {
    auto x = rand_tensor({1, 2, 3, 4}, rng);
    auto r = rand_tensor({1, 2, 7, 6}, rng, false);
    cases.push_back({"bilinear_resize_up", {x}, [=](Tape<double>* t) {
                       return project(t, bilinear_resize(t, x, 7, 6), r);
                     }});
  }
  {
    auto x = rand_tensor({1, 2, 6, 8}, rng);
    auto r = rand_tensor({1, 2, 3, 5}, rng, false);
    cases.push_back({"bilinear_resize_down", {x}, [=](Tape<double>* t) {
                       return project(t, bilinear_resize(t, x, 3, 5), r);
                     }});
  }
  {
    auto x = rand_tensor({1, 3, 7, 5}, rng);
    auto r = rand_tensor({1, 3, 3, 2}, rng, false);
    cases.push_back({"adaptive_avg_pool2d", {x}, [=](Tape<double>* t) {
                       return project(t, adaptive_avg_pool2d(t, x, 3, 2), r);
                     }});
  }
  {
    auto x = rand_tensor({1, 3, 4, 4}, rng);
    auto r = rand_tensor({1, 3, 1, 1}, rng, false);
    cases.push_back({"global_max_pool", {x}, [=](Tape<double>* t) {
                       return project(t, global_max_pool(t, x), r);
                     }});
  }
  {
    std::vector<DTensor> maps = {rand_tensor({2, 1, 3, 3}, rng), rand_tensor({2, 1, 3, 3}, rng),
                                 rand_tensor({2, 1, 3, 3}, rng)};
    std::vector<DTensor> rs = {rand_tensor({2, 1, 3, 3}, rng, false),
                               rand_tensor({2, 1, 3, 3}, rng, false),
                               rand_tensor({2, 1, 3, 3}, rng, false)};
    cases.push_back({"softmax_over_group", maps, [=](Tape<double>* t) {
                       auto y = softmax_over_group(t, maps);
                       auto total = project(t, y[0], rs[0]);
                       total = add(t, total, project(t, y[1], rs[1]));
                       return add(t, total, project(t, y[2], rs[2]));
                     }});
  }
  {
    auto a = rand_tensor({2, 3, 2, 2}, rng);
    auto b = rand_tensor({2, 3, 2, 2}, rng);
    auto r = rand_tensor({2, 3, 2, 2}, rng, false);
    cases.push_back({"add", {a, b}, [=](Tape<double>* t) { return project(t, add(t, a, b), r); }});
    auto c = rand_tensor({2, 3, 2, 2}, rng);
    auto d = rand_tensor({2, 3, 2, 2}, rng);
    cases.push_back({"mul", {c, d}, [=](Tape<double>* t) { return project(t, mul(t, c, d), r); }});
  }
  {
    auto x = rand_tensor({3, 8}, rng);
    nudge_away(x, 0.0, 1e-3);
    auto r = rand_tensor({3, 8}, rng, false);
    cases.push_back({"relu", {x}, [=](Tape<double>* t) { return project(t, relu(t, x), r); }});
    auto y = rand_tensor({3, 8}, rng);
    cases.push_back(
        {"sigmoid", {y}, [=](Tape<double>* t) { return project(t, sigmoid(t, y), r); }});
  }
  {
    std::vector<DTensor> xs = {rand_tensor({1, 2, 3, 3}, rng), rand_tensor({1, 3, 3, 3}, rng)};
    auto r = rand_tensor({1, 5, 3, 3}, rng, false);
    cases.push_back({"concat_channels", xs, [=](Tape<double>* t) {
                       return project(t, concat_channels(t, xs), r);
                     }});
  }
  {
    auto x = rand_tensor({1, 4, 3, 3}, rng);
    auto r0 = rand_tensor({1, 2, 3, 3}, rng, false);
    auto r1 = rand_tensor({1, 2, 3, 3}, rng, false);
    cases.push_back({"split_channels", {x}, [=](Tape<double>* t) {
                       auto parts = split_channels(t, x, 2);
                       return add(t, project(t, parts[0], r0), project(t, parts[1], r1));
                     }});
  }
  {
    auto x = rand_tensor({3, 7}, rng);
    auto w = rand_tensor({7, 5}, rng);
    auto b = rand_tensor({5}, rng);
    auto r = rand_tensor({3, 5}, rng, false);
    cases.push_back({"fully_connected", {x, w, b}, [=](Tape<double>* t) {
                       return project(t, fully_connected(t, x, w, b), r);
                     }});
  }
  {
    auto f = rand_tensor({2, 3, 4, 4}, rng);
    auto m = rand_tensor({2, 1, 4, 4}, rng);
    auto r = rand_tensor({2, 3, 4, 4}, rng, false);
    cases.push_back({"channel_scale", {f, m}, [=](Tape<double>* t) {
                       return project(t, channel_scale(t, f, m), r);
                     }});
  }
  {
    auto f = rand_tensor({2, 3, 4, 4}, rng);
    auto g = rand_tensor({2, 3}, rng);
    auto r = rand_tensor({2, 3, 4, 4}, rng, false);
    cases.push_back({"channel_gate", {f, g}, [=](Tape<double>* t) {
                       return project(t, channel_gate(t, f, g), r);
                     }});
  }
  {
    auto x = rand_tensor({1, 6, 3, 3}, rng);
    auto r = rand_tensor({1, 2, 3, 3}, rng, false);
    cases.push_back({"sum_channel_groups", {x}, [=](Tape<double>* t) {
                       return project(t, sum_channel_groups(t, x, 3), r);
                     }});
  }
  {
    std::vector<DTensor> xs = {rand_tensor({2, 2, 3, 3}, rng), rand_tensor({2, 2, 3, 3}, rng),
                               rand_tensor({2, 2, 3, 3}, rng)};
    auto r = rand_tensor({2, 2, 3, 3}, rng, false);
    cases.push_back({"elementwise_max", xs, [=](Tape<double>* t) {
                       return project(t, elementwise_max(t, xs), r);
                     }});
  }
  {
    auto x = rand_tensor({2, 3}, rng);
    auto r = rand_tensor({2, 3}, rng, false);
    cases.push_back({"scale", {x}, [=](Tape<double>* t) {
                       return project(t, scale(t, x, -1.7), r);
                     }});
    auto y = rand_tensor({2, 3, 2, 2}, rng);
    cases.push_back({"sum_all", {y}, [=](Tape<double>* t) { return sum_all(t, y); }});
  }
  {
    std::vector<DTensor> rows = {rand_tensor({2, 3, 2}, rng), rand_tensor({2, 3, 2}, rng),
                                 rand_tensor({2, 3, 2}, rng)};
    auto r = rand_tensor({3, 12}, rng, false);
    cases.push_back({"stack_flatten", rows, [=](Tape<double>* t) {
                       return project(t, stack_flatten(t, rows), r);
                     }});
    auto x = rand_tensor({2, 6}, rng);
    auto r2 = rand_tensor({3, 4}, rng, false);
    cases.push_back({"reshape", {x}, [=](Tape<double>* t) {
                       return project(t, reshape(t, x, {3, 4}), r2);
                     }});
  }
  {
    auto logits = rand_tensor({4, 3}, rng);
    std::vector<int> labels = {0, 2, 1, 2};
    cases.push_back({"softmax_cross_entropy", {logits}, [=](Tape<double>* t) {
                       return softmax_cross_entropy(t, logits, labels);
                     }});
  }
  {
    auto pred = rand_tensor({4, 4}, rng);
    std::vector<double> target(16);
    for (std::size_t i = 0; i < 16; ++i) {
      // Half the diffs inside the quadratic zone, half in the linear zone,
      // all away from the |d| = 1 kink.
      const double d = (i % 2 == 0) ? rng.uniform(-0.8, 0.8) : rng.uniform(1.2, 2.0);
      target[i] = pred->data[i] - d;
    }
    std::vector<bool> active = {true, false, true, true};
    cases.push_back({"smooth_l1", {pred}, [=](Tape<double>* t) {
                       return smooth_l1(t, pred, target, active);
                     }});
  }
  {
    auto feat = rand_tensor({1, 3, 16, 16}, rng);
    RoIBox roi(0, 12.5, 16.25, 51.0, 57.75);
    auto r = rand_tensor({3, 7, 7}, rng, false);
    cases.push_back({"roi_align", {feat}, [=](Tape<double>* t) {
                       return project(t, roi_align(t, feat, roi, 4), r);
                     }});
  }
  {
    Xoshiro256 prng(seed ^ 0x243f6a8885a308d3ULL);
    auto acf = make_acf_params<double>(4, 8, 4, prng);
    std::vector<DTensor> feats = {rand_tensor({8, 3, 3}, rng), rand_tensor({8, 3, 3}, rng),
                                  rand_tensor({8, 3, 3}, rng), rand_tensor({8, 3, 3}, rng)};
    auto r = rand_tensor({8, 3, 3}, rng, false);
    std::vector<DTensor> leaves = feats;
    leaves.insert(leaves.end(), {acf.fc1_w, acf.fc1_b, acf.fc2_w, acf.fc2_b});
    cases.push_back({"adaptive_channel_fusion", leaves, [=](Tape<double>* t) {
                       return project(t, adaptive_channel_fusion(t, feats, acf), r);
                     }});
  }
  {
    Xoshiro256 prng(seed ^ 0x452821e638d01377ULL);
    auto asf = make_asf_params<double>(3, 8, prng);
    std::vector<DTensor> feats = {rand_tensor({1, 8, 4, 4}, rng), rand_tensor({1, 8, 4, 4}, rng),
                                  rand_tensor({1, 8, 4, 4}, rng)};
    auto r = rand_tensor({1, 8, 4, 4}, rng, false);
    std::vector<DTensor> leaves = feats;
    leaves.insert(leaves.end(), {asf.reduce.w, asf.reduce.b, asf.logits.w, asf.logits.b});
    cases.push_back({"adaptive_spatial_fusion", leaves, [=](Tape<double>* t) {
                       return project(t, adaptive_spatial_fusion(t, feats, asf).fused, r);
                     }});
  }
  {
    Xoshiro256 prng(seed ^ 0x13198a2e03707344ULL);
    auto head = make_head_params<double>(16, 8, 3, prng);
    auto feats = rand_tensor({2, 16}, rng);
    auto rc = rand_tensor({2, 3}, rng, false);
    auto rr = rand_tensor({2, 4}, rng, false);
    std::vector<DTensor> leaves = {feats,       head.fc1_w, head.fc1_b, head.fc2_w, head.fc2_b,
                                   head.cls_w,  head.cls_b, head.reg_w, head.reg_b};
    cases.push_back({"head_forward", leaves, [=](Tape<double>* t) {
                       auto out = head_forward(t, feats, head);
                       return add(t, project(t, out.class_logits, rc),
                                  project(t, out.box_deltas, rr));
                     }});
  }
  {
    // Fully composed training loss on a tiny scene, gradients w.r.t. every
    // pyramid and head parameter (sampled elements per tensor).
    RunConfig cfg;
    cfg.seed = seed;
    cfg.image_h = cfg.image_w = 32;
    cfg.channels = {3, 4, 5, 6};
    cfg.classes = 2;
    cfg.scenes = 1;
    cfg.objects_per_scene = 1;
    cfg.negatives_per_positive = 1;
    cfg.head_hidden = 16;
    cfg.precision = 64;
    auto model = std::make_shared<Model<double>>(make_model<double>(cfg));
    auto scene = std::make_shared<SyntheticScene<double>>(make_scene<double>(cfg, 0));
    const RfaConfig rfa = cfg.rfa_config();
    const RoiFusionConfig srs = cfg.srs_config();
    std::vector<DTensor> leaves;
    for (auto& [name, tensor] : collect_params(*model)) leaves.push_back(tensor);
    CaseSpec spec;
    spec.name = "eq1_end_to_end";
    spec.leaves = leaves;
    spec.tolerance = 1e-3;
    spec.samples_per_leaf = 4;
    spec.forward = [model, scene, rfa, srs](Tape<double>* t) {
      auto pyr = build_pyramid(t, scene->hierarchy, model->pyramid, rfa, true);
      auto loss = consistent_supervision_loss(t, pyr, scene->proposals, CsMode::all_level, 0.25,
                                              1.0, model->aux_head, model->final_head, srs,
                                              model->srs);
      return loss.total;
    };
    cases.push_back(std::move(spec));
  }

  GradCheckReport report;
  for (auto& spec : cases) {
    GradCheckCase result;
    result.name = spec.name;
    result.tolerance = spec.tolerance;
    result.worst_rel_err = run_case(spec, sample_rng);
    result.pass = result.worst_rel_err < spec.tolerance;
    report.all_pass = report.all_pass && result.pass;
    report.cases.push_back(std::move(result));
  }
  return report;
}

}  // namespace augfpn
