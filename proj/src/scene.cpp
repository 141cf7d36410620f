#include "augfpn/scene.hpp"

#include <algorithm>
#include <cmath>

namespace augfpn {

double iou(const RoIBox& a, const RoIBox& b) {
  const double ix1 = std::max(a.x1, b.x1), iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2), iy2 = std::min(a.y2, b.y2);
  const double iw = std::max(0.0, ix2 - ix1), ih = std::max(0.0, iy2 - iy1);
  const double inter = iw * ih;
  const double uni = a.width() * a.height() + b.width() * b.height() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::array<double, 4> encode_box_deltas(const RoIBox& gt, const RoIBox& proposal) {
  const double pw = proposal.width(), ph = proposal.height();
  const double px = proposal.x1 + 0.5 * pw, py = proposal.y1 + 0.5 * ph;
  const double gw = gt.width(), gh = gt.height();
  const double gx = gt.x1 + 0.5 * gw, gy = gt.y1 + 0.5 * gh;
  return {(gx - px) / pw, (gy - py) / ph, std::log(gw / pw), std::log(gh / ph)};
}

namespace {

// Per-scene substream: scene k must not depend on how many draws earlier
// scenes consumed.
std::uint64_t scene_seed(std::uint64_t seed, int scene_index) {
  std::uint64_t s = seed ^ (0xa24baed4963ee407ULL * (static_cast<std::uint64_t>(scene_index) + 1));
  (void)splitmix64(s);
  (void)splitmix64(s);
  return s;
}

constexpr double kPositiveIou = 0.5;
constexpr double kJitterFraction = 0.2;

template <typename T>
void stamp_object(FeatureHierarchy<T>& hier, const RoIBox& gt, int classes) {
  for (int l = 0; l < 4; ++l) {
    auto& t = *hier.c[static_cast<std::size_t>(l)];
    const double stride = kPyramidStrides[static_cast<std::size_t>(l)];
    const std::int64_t c_in = t.dim(1), h = t.dim(2), w = t.dim(3);
    const std::int64_t y0 = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(std::floor(gt.y1 / stride)), 0, h - 1);
    const std::int64_t y1 = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(std::ceil(gt.y2 / stride)), y0 + 1, h);
    const std::int64_t x0 = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(std::floor(gt.x1 / stride)), 0, w - 1);
    const std::int64_t x1 = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(std::ceil(gt.x2 / stride)), x0 + 1, w);
    for (std::int64_t c = 0; c < c_in; ++c) {
      const bool class_channel = (c % classes) == gt.class_target - 1;
      const T amp = static_cast<T>(1.0 + 0.25 * static_cast<double>((c * 13) % 7) / 7.0);
      T* plane = t.data.data() + c * h * w;
      for (std::int64_t y = y0; y < y1; ++y) {
        for (std::int64_t x = x0; x < x1; ++x) {
          const bool border = y == y0 || y == y1 - 1 || x == x0 || x == x1 - 1;
          T v = T(0);
          if (class_channel) v += amp;
          if (border) v += T(0.5);
          plane[y * w + x] += v;
        }
      }
    }
  }
}

RoIBox clamp_box(double x1, double y1, double x2, double y2, double w, double h, int cls) {
  x1 = std::clamp(x1, 0.0, w - 2.0);
  y1 = std::clamp(y1, 0.0, h - 2.0);
  x2 = std::clamp(x2, x1 + 1.0, w);
  y2 = std::clamp(y2, y1 + 1.0, h);
  return RoIBox(0, x1, y1, x2, y2, cls);
}

}  // namespace

template <typename T>
SyntheticScene<T> make_scene(const RunConfig& cfg, int scene_index) {
  Xoshiro256 rng(scene_seed(cfg.seed, scene_index));
  SyntheticScene<T> scene;

  for (int l = 0; l < 4; ++l) {
    const int stride = kPyramidStrides[static_cast<std::size_t>(l)];
    auto t = make_tensor<T>({1, cfg.channels[static_cast<std::size_t>(l)], cfg.image_h / stride,
                             cfg.image_w / stride});
    fill_uniform(*t, -0.1, 0.1, rng);
    scene.hierarchy.c[static_cast<std::size_t>(l)] = t;
  }

  const double iw = cfg.image_w, ih = cfg.image_h;
  for (int i = 0; i < cfg.objects_per_scene; ++i) {
    const int cls = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(cfg.classes)));
    const double bw = rng.uniform(0.2, 0.6) * iw;
    const double bh = rng.uniform(0.2, 0.6) * ih;
    const double x1 = rng.uniform(0.0, iw - bw);
    const double y1 = rng.uniform(0.0, ih - bh);
    RoIBox gt(0, x1, y1, x1 + bw, y1 + bh, cls);
    stamp_object(scene.hierarchy, gt, cfg.classes);
    scene.ground_truth.push_back(gt);
  }

  // One guaranteed positive per object (resample jitter until IoU >= 0.5),
  // then uniform random negatives.
  for (const auto& gt : scene.ground_truth) {
    const double bw = gt.width(), bh = gt.height();
    RoIBox positive = gt;
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double jx1 = gt.x1 + rng.uniform(-kJitterFraction, kJitterFraction) * bw;
      const double jy1 = gt.y1 + rng.uniform(-kJitterFraction, kJitterFraction) * bh;
      const double jx2 = gt.x2 + rng.uniform(-kJitterFraction, kJitterFraction) * bw;
      const double jy2 = gt.y2 + rng.uniform(-kJitterFraction, kJitterFraction) * bh;
      if (!(jx2 > jx1 + 1.0 && jy2 > jy1 + 1.0)) continue;
      RoIBox cand = clamp_box(jx1, jy1, jx2, jy2, iw, ih, 0);
      if (iou(cand, gt) >= kPositiveIou) {
        positive = cand;
        break;
      }
    }
    scene.proposals.push_back(positive);

    for (int n = 0; n < cfg.negatives_per_positive; ++n) {
      for (int attempt = 0; attempt < 100; ++attempt) {
        const double nw = rng.uniform(4.0, iw / 2.0);
        const double nh = rng.uniform(4.0, ih / 2.0);
        const double nx1 = rng.uniform(0.0, iw - nw);
        const double ny1 = rng.uniform(0.0, ih - nh);
        RoIBox cand(0, nx1, ny1, nx1 + nw, ny1 + nh, 0);
        double best = 0.0;
        for (const auto& g : scene.ground_truth) best = std::max(best, iou(cand, g));
        if (best < kPositiveIou) {
          scene.proposals.push_back(cand);
          break;
        }
      }
    }
  }

  // Label every proposal by the IoU rule against its best-matching object.
  for (auto& p : scene.proposals) {
    double best = 0.0;
    const RoIBox* match = nullptr;
    for (const auto& g : scene.ground_truth) {
      const double v = iou(p, g);
      if (v > best) {
        best = v;
        match = &g;
      }
    }
    if (match && best >= kPositiveIou) {
      p.class_target = match->class_target;
      p.regression_target = encode_box_deltas(*match, p);
    } else {
      p.class_target = 0;
      p.regression_target = {0, 0, 0, 0};
    }
  }
  return scene;
}

template <typename T>
std::vector<SyntheticScene<T>> make_scenes(const RunConfig& cfg) {
  std::vector<SyntheticScene<T>> scenes;
  scenes.reserve(static_cast<std::size_t>(cfg.scenes));
  for (int i = 0; i < cfg.scenes; ++i) {
    scenes.push_back(make_scene<T>(cfg, i));
    validate_scene(scenes.back());
  }
  return scenes;
}

template <typename T>
void validate_scene(const SyntheticScene<T>& scene) {
  scene.hierarchy.validate();
  for (const auto& gt : scene.ground_truth) {
    bool covered = false;
    for (const auto& p : scene.proposals) {
      if (iou(p, gt) >= kPositiveIou) {
        covered = true;
        break;
      }
    }
    if (!covered) throw UsageError("scene: ground-truth box without a positive proposal");
  }
  for (const auto& p : scene.proposals) {
    double best = 0.0;
    int best_class = 0;
    for (const auto& g : scene.ground_truth) {
      const double v = iou(p, g);
      if (v > best) {
        best = v;
        best_class = g.class_target;
      }
    }
    const int want = best >= kPositiveIou ? best_class : 0;
    if (p.class_target != want) {
      throw UsageError("scene: proposal labeled " + std::to_string(p.class_target) +
                       ", IoU rule says " + std::to_string(want));
    }
  }
}

#define AUGFPN_INSTANTIATE_SCENE(T)                                           \
  template SyntheticScene<T> make_scene<T>(const RunConfig&, int);            \
  template std::vector<SyntheticScene<T>> make_scenes<T>(const RunConfig&);   \
  template void validate_scene<T>(const SyntheticScene<T>&);

AUGFPN_INSTANTIATE_SCENE(float)
AUGFPN_INSTANTIATE_SCENE(double)
#undef AUGFPN_INSTANTIATE_SCENE

}  // namespace augfpn
