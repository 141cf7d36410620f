#include "augfpn/roi.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "augfpn/ops.hpp"

namespace augfpn {

RoIBox::RoIBox(int batch, double bx1, double by1, double bx2, double by2, int t_star,
               std::array<double, 4> b_star)
    : batch_index(batch),
      x1(bx1),
      y1(by1),
      x2(bx2),
      y2(by2),
      class_target(t_star),
      regression_target(b_star) {
  if (!(x2 > x1) || !(y2 > y1)) {
    throw UsageError("RoIBox: degenerate box (" + std::to_string(x1) + "," + std::to_string(y1) +
                     ")-(" + std::to_string(x2) + "," + std::to_string(y2) + ")");
  }
  if (class_target < 0) throw UsageError("RoIBox: class target must be >= 0");
}

void RoiFusionConfig::validate() const {
  if (output_h < 1 || output_w < 1) throw ConfigError("roi fusion: output size must be positive");
  if (sampling_ratio < 1) throw ConfigError("roi fusion: sampling_ratio must be >= 1");
  if (acf_reduction < 1) throw ConfigError("roi fusion: acf_reduction must be >= 1");
}

int assign_level(const RoIBox& roi, int k0) {
  const double scale = std::sqrt(roi.width() * roi.height());
  const int k = static_cast<int>(std::floor(k0 + std::log2(scale / 224.0)));
  return std::min(5, std::max(2, k));
}

namespace {

// Standard RoI-Align boundary rule: samples past [-1, size] contribute
// nothing, samples in the margin clamp onto the border cell.
template <typename T>
struct BilinearTaps {
  bool skip = false;
  std::int64_t y0 = 0, y1 = 0, x0 = 0, x1 = 0;
  T w00 = 0, w01 = 0, w10 = 0, w11 = 0;
};

template <typename T>
BilinearTaps<T> bilinear_taps(T y, T x, std::int64_t h, std::int64_t w) {
  BilinearTaps<T> t;
  if (y < T(-1) || y > static_cast<T>(h) || x < T(-1) || x > static_cast<T>(w)) {
    t.skip = true;
    return t;
  }
  if (y < T(0)) y = T(0);
  if (x < T(0)) x = T(0);
  t.y0 = static_cast<std::int64_t>(y);
  t.x0 = static_cast<std::int64_t>(x);
  if (t.y0 >= h - 1) {
    t.y0 = t.y1 = h - 1;
    y = static_cast<T>(t.y0);
  } else {
    t.y1 = t.y0 + 1;
  }
  if (t.x0 >= w - 1) {
    t.x0 = t.x1 = w - 1;
    x = static_cast<T>(t.x0);
  } else {
    t.x1 = t.x0 + 1;
  }
  const T fy = y - static_cast<T>(t.y0);
  const T fx = x - static_cast<T>(t.x0);
  t.w00 = (T(1) - fy) * (T(1) - fx);
  t.w01 = (T(1) - fy) * fx;
  t.w10 = fy * (T(1) - fx);
  t.w11 = fy * fx;
  return t;
}

}  // namespace

template <typename T>
TensorPtr<T> roi_align(Tape<T>* tape, const TensorPtr<T>& feature, const RoIBox& roi, int stride,
                       int out_h, int out_w, int sampling_ratio) {
  if (!feature || feature->ndim() != 4) throw ShapeError("roi_align: expected NCHW feature");
  if (stride < 1) throw ConfigError("roi_align: stride must be positive");
  if (out_h < 1 || out_w < 1 || sampling_ratio < 1) {
    throw ConfigError("roi_align: bad output size or sampling ratio");
  }
  if (roi.batch_index < 0 || roi.batch_index >= feature->dim(0)) {
    throw UsageError("roi_align: batch index " + std::to_string(roi.batch_index) +
                     " out of range");
  }
  const std::int64_t c_in = feature->dim(1), h = feature->dim(2), w = feature->dim(3);
  const T inv = T(1) / static_cast<T>(stride);
  const T rx1 = static_cast<T>(roi.x1) * inv, ry1 = static_cast<T>(roi.y1) * inv;
  const T rx2 = static_cast<T>(roi.x2) * inv, ry2 = static_cast<T>(roi.y2) * inv;
  if (rx2 < T(-1) || ry2 < T(-1) || rx1 > static_cast<T>(w) || ry1 > static_cast<T>(h)) {
    throw UsageError("roi_align: box lies fully outside the feature extent");
  }

  KernelCounter::bump("roi_align");
  const bool req = tape != nullptr && feature->requires_grad;
  auto out = make_tensor<T>({c_in, out_h, out_w}, req);

  const T bin_h = (ry2 - ry1) / static_cast<T>(out_h);
  const T bin_w = (rx2 - rx1) / static_cast<T>(out_w);
  const T count = static_cast<T>(sampling_ratio * sampling_ratio);

  // Tap table shared by all channels (and reused by the backward pass).
  std::vector<BilinearTaps<T>> taps(
      static_cast<std::size_t>(out_h * out_w * sampling_ratio * sampling_ratio));
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      for (int sy = 0; sy < sampling_ratio; ++sy) {
        const T y = ry1 + static_cast<T>(oy) * bin_h +
                    (static_cast<T>(sy) + T(0.5)) * bin_h / static_cast<T>(sampling_ratio);
        for (int sx = 0; sx < sampling_ratio; ++sx) {
          const T x = rx1 + static_cast<T>(ox) * bin_w +
                      (static_cast<T>(sx) + T(0.5)) * bin_w / static_cast<T>(sampling_ratio);
          taps[static_cast<std::size_t>(((oy * out_w + ox) * sampling_ratio + sy) *
                                        sampling_ratio + sx)] = bilinear_taps<T>(y, x, h, w);
        }
      }
    }
  }

  const std::int64_t base = static_cast<std::int64_t>(roi.batch_index) * c_in * h * w;
  for (std::int64_t c = 0; c < c_in; ++c) {
    const T* plane = feature->data.data() + base + c * h * w;
    T* oplane = out->data.data() + c * out_h * out_w;
    for (int s = 0; s < out_h * out_w; ++s) {
      T acc = T(0);
      for (int q = 0; q < sampling_ratio * sampling_ratio; ++q) {
        const auto& t = taps[static_cast<std::size_t>(s * sampling_ratio * sampling_ratio + q)];
        if (t.skip) continue;
        acc += t.w00 * plane[t.y0 * w + t.x0] + t.w01 * plane[t.y0 * w + t.x1] +
               t.w10 * plane[t.y1 * w + t.x0] + t.w11 * plane[t.y1 * w + t.x1];
      }
      oplane[s] = acc / count;
    }
  }
  check_finite(*out, "roi_align");

  if (req) {
    tape->record(out, [feature, out, taps = std::move(taps), base, c_in, h, w, out_h, out_w,
                  sampling_ratio, count]() {
      for (std::int64_t c = 0; c < c_in; ++c) {
        T* dplane = feature->grad.data() + base + c * h * w;
        const T* gplane = out->grad.data() + c * out_h * out_w;
        for (int s = 0; s < out_h * out_w; ++s) {
          const T g = gplane[s] / count;
          for (int q = 0; q < sampling_ratio * sampling_ratio; ++q) {
            const auto& t =
                taps[static_cast<std::size_t>(s * sampling_ratio * sampling_ratio + q)];
            if (t.skip) continue;
            dplane[t.y0 * w + t.x0] += t.w00 * g;
            dplane[t.y0 * w + t.x1] += t.w01 * g;
            dplane[t.y1 * w + t.x0] += t.w10 * g;
            dplane[t.y1 * w + t.x1] += t.w11 * g;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
AcfParams<T> make_acf_params(int k_inputs, int channels, int reduction, Xoshiro256& rng) {
  if (k_inputs < 1 || reduction < 1) throw ConfigError("acf: bad parameters");
  const std::int64_t cat = static_cast<std::int64_t>(k_inputs) * channels;
  const std::int64_t mid = std::max<std::int64_t>(1, cat / reduction);
  AcfParams<T> p;
  p.fc1_w = make_tensor<T>({cat, mid}, true);
  p.fc1_b = make_tensor<T>({mid}, true);
  p.fc2_w = make_tensor<T>({mid, cat}, true);
  p.fc2_b = make_tensor<T>({cat}, true);
  fill_kaiming_uniform(*p.fc1_w, cat, rng);   // feeds the ReLU bottleneck
  fill_linear_uniform(*p.fc2_w, mid, rng);    // feeds the sigmoid gate
  p.fan_in_count = k_inputs;
  return p;
}

template <typename T>
TensorPtr<T> adaptive_channel_fusion(Tape<T>* tape, const std::vector<TensorPtr<T>>& features,
                                     const AcfParams<T>& params) {
  if (features.empty()) throw ShapeError("acf: empty feature list");
  const int k = static_cast<int>(features.size());
  if (params.fan_in_count != k) {
    throw ConfigError("acf: params built for " + std::to_string(params.fan_in_count) +
                      " inputs, got " + std::to_string(k));
  }
  for (const auto& f : features) {
    if (f->ndim() != 3) throw ShapeError("acf: features must be [C,H,W]");
    if (!same_shape(*f, *features[0])) throw ShapeError("acf: mismatched feature shapes");
  }
  const std::int64_t c = features[0]->dim(0), h = features[0]->dim(1), w = features[0]->dim(2);

  std::vector<TensorPtr<T>> as_nchw;
  as_nchw.reserve(features.size());
  for (const auto& f : features) as_nchw.push_back(reshape(tape, f, {1, c, h, w}));
  auto cat = concat_channels(tape, as_nchw);
  auto squeezed = reshape(tape, adaptive_avg_pool2d(tape, cat, 1, 1),
                          {1, static_cast<std::int64_t>(k) * c});
  auto mid = relu(tape, fully_connected(tape, squeezed, params.fc1_w, params.fc1_b));
  auto gates = sigmoid(tape, fully_connected(tape, mid, params.fc2_w, params.fc2_b));
  auto gated = channel_gate(tape, cat, gates);
  auto fused = sum_channel_groups(tape, gated, k);
  return reshape(tape, fused, {c, h, w});
}

template <typename T>
SrsParams<T> make_srs_params(const RoiFusionConfig& cfg, Xoshiro256& rng) {
  cfg.validate();
  SrsParams<T> p;
  p.asf = make_asf_params<T>(4, kPyramidChannels, rng);
  p.acf = make_acf_params<T>(4, kPyramidChannels, cfg.acf_reduction, rng);
  return p;
}

namespace {

template <typename T>
std::vector<TensorPtr<T>> align_all_levels(Tape<T>* tape, const Pyramid<T>& pyramid,
                                           const RoIBox& roi, const RoiFusionConfig& cfg) {
  std::vector<TensorPtr<T>> out;
  out.reserve(4);
  for (int l = 2; l <= 5; ++l) {
    out.push_back(roi_align(tape, pyramid.p_level(l), roi,
                            kPyramidStrides[static_cast<std::size_t>(l - 2)], cfg.output_h,
                            cfg.output_w, cfg.sampling_ratio));
  }
  return out;
}

}  // namespace

template <typename T>
TensorPtr<T> soft_roi_select(Tape<T>* tape, const Pyramid<T>& pyramid, const RoIBox& roi,
                             const RoiFusionConfig& cfg, const SrsParams<T>& params) {
  cfg.validate();
  if (cfg.mode == RoiFusionMode::heuristic_single_level) {
    const int l = assign_level(roi);
    return roi_align(tape, pyramid.p_level(l), roi, kPyramidStrides[static_cast<std::size_t>(l - 2)],
                     cfg.output_h, cfg.output_w, cfg.sampling_ratio);
  }
  auto aligned = align_all_levels(tape, pyramid, roi, cfg);
  switch (cfg.mode) {
    case RoiFusionMode::sum: {
      auto fused = aligned[0];
      for (std::size_t i = 1; i < aligned.size(); ++i) fused = add(tape, fused, aligned[i]);
      return fused;
    }
    case RoiFusionMode::max:
      return elementwise_max(tape, aligned);
    case RoiFusionMode::acf:
      return adaptive_channel_fusion(tape, aligned, params.acf);
    case RoiFusionMode::asf: {
      const std::int64_t c = aligned[0]->dim(0);
      std::vector<TensorPtr<T>> as_nchw;
      as_nchw.reserve(aligned.size());
      for (const auto& f : aligned) {
        as_nchw.push_back(reshape(tape, f, {1, c, cfg.output_h, cfg.output_w}));
      }
      auto fused = adaptive_spatial_fusion(tape, as_nchw, params.asf).fused;
      return reshape(tape, fused, {c, cfg.output_h, cfg.output_w});
    }
    case RoiFusionMode::heuristic_single_level:
      break;  // handled above
  }
  throw ConfigError("soft_roi_select: unknown fusion mode");
}

template <typename T>
std::array<double, 4> asf_weight_fractions(const Pyramid<T>& pyramid, const RoIBox& roi,
                                           const RoiFusionConfig& cfg, const AsfParams<T>& asf) {
  auto aligned = align_all_levels<T>(nullptr, pyramid, roi, cfg);
  const std::int64_t c = aligned[0]->dim(0);
  std::vector<TensorPtr<T>> as_nchw;
  as_nchw.reserve(aligned.size());
  for (const auto& f : aligned) {
    as_nchw.push_back(reshape<T>(nullptr, f, {1, c, cfg.output_h, cfg.output_w}));
  }
  auto maps = adaptive_spatial_fusion<T>(nullptr, as_nchw, asf).weight_maps;
  std::array<double, 4> fractions{};
  for (std::size_t k = 0; k < 4; ++k) {
    double acc = 0.0;
    for (T v : maps[k]->data) acc += static_cast<double>(v);
    fractions[k] = acc / static_cast<double>(maps[k]->numel());
  }
  return fractions;
}

template <typename T>
RatioMatrix weight_ratio_stats(const std::vector<RoIBox>& rois, const Pyramid<T>& pyramid,
                               const RoiFusionConfig& cfg, const AsfParams<T>& asf) {
  std::array<std::array<double, 4>, 4> sums{};
  RatioMatrix m;
  for (const auto& roi : rois) {
    const int row = assign_level(roi) - 2;
    const auto frac = asf_weight_fractions(pyramid, roi, cfg, asf);
    for (std::size_t k = 0; k < 4; ++k) sums[static_cast<std::size_t>(row)][k] += frac[k];
    ++m.counts[static_cast<std::size_t>(row)];
  }
  for (std::size_t r = 0; r < 4; ++r) {
    if (m.counts[r] == 0) continue;
    std::array<double, 4> row{};
    for (std::size_t k = 0; k < 4; ++k) row[k] = sums[r][k] / static_cast<double>(m.counts[r]);
    m.rows[r] = row;
  }
  return m;
}

std::vector<RoIBox> parse_roi_lines(std::istream& in) {
  std::vector<RoIBox> rois;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<double> fields;
    double v;
    while (ls >> v) fields.push_back(v);
    if (fields.empty()) continue;
    if (fields.size() != 5 && fields.size() != 10) {
      throw UsageError("roi file line " + std::to_string(line_no) + ": expected 5 or 10 fields, got " +
                       std::to_string(fields.size()));
    }
    try {
      if (fields.size() == 5) {
        rois.emplace_back(static_cast<int>(fields[0]), fields[1], fields[2], fields[3], fields[4]);
      } else {
        rois.emplace_back(static_cast<int>(fields[0]), fields[1], fields[2], fields[3], fields[4],
                          static_cast<int>(fields[5]),
                          std::array<double, 4>{fields[6], fields[7], fields[8], fields[9]});
      }
    } catch (const UsageError& e) {
      throw UsageError("roi file line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rois;
}

std::vector<RoIBox> load_roi_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open roi file: " + path);
  return parse_roi_lines(in);
}

void save_roi_file(const std::vector<RoIBox>& rois, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write roi file: " + path);
  out << "# batch_index x1 y1 x2 y2 t* b0 b1 b2 b3\n";
  char buf[256];
  for (const auto& r : rois) {
    std::snprintf(buf, sizeof(buf), "%d %.17g %.17g %.17g %.17g %d %.17g %.17g %.17g %.17g\n",
                  r.batch_index, r.x1, r.y1, r.x2, r.y2, r.class_target, r.regression_target[0],
                  r.regression_target[1], r.regression_target[2], r.regression_target[3]);
    out << buf;
  }
}

#define AUGFPN_INSTANTIATE_ROI(T)                                                              \
  template TensorPtr<T> roi_align<T>(Tape<T>*, const TensorPtr<T>&, const RoIBox&, int, int,   \
                                     int, int);                                                \
  template AcfParams<T> make_acf_params<T>(int, int, int, Xoshiro256&);                        \
  template TensorPtr<T> adaptive_channel_fusion<T>(Tape<T>*, const std::vector<TensorPtr<T>>&, \
                                                   const AcfParams<T>&);                       \
  template SrsParams<T> make_srs_params<T>(const RoiFusionConfig&, Xoshiro256&);               \
  template TensorPtr<T> soft_roi_select<T>(Tape<T>*, const Pyramid<T>&, const RoIBox&,         \
                                           const RoiFusionConfig&, const SrsParams<T>&);       \
  template std::array<double, 4> asf_weight_fractions<T>(const Pyramid<T>&, const RoIBox&,     \
                                                         const RoiFusionConfig&,               \
                                                         const AsfParams<T>&);                 \
  template RatioMatrix weight_ratio_stats<T>(const std::vector<RoIBox>&, const Pyramid<T>&,    \
                                             const RoiFusionConfig&, const AsfParams<T>&);

AUGFPN_INSTANTIATE_ROI(float)
AUGFPN_INSTANTIATE_ROI(double)
#undef AUGFPN_INSTANTIATE_ROI

}  // namespace augfpn
