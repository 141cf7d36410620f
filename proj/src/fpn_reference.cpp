#include "augfpn/fpn_reference.hpp"

#include <cmath>
#include <vector>

namespace augfpn {

namespace {

// Per-pixel 1x1 convolution: out channel k = bias_k + sum_c w[k,c] * x[c].
template <typename T>
TensorPtr<T> pointwise_conv(const TensorPtr<T>& x, const Conv2dParams<T>& conv) {
  const std::int64_t n_batch = x->dim(0), c_in = x->dim(1);
  const std::int64_t h = x->dim(2), w = x->dim(3);
  const std::int64_t k_out = conv.w->dim(0);
  auto out = make_tensor<T>({n_batch, k_out, h, w});
  for (std::int64_t n = 0; n < n_batch; ++n) {
    for (std::int64_t k = 0; k < k_out; ++k) {
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t xx = 0; xx < w; ++xx) {
          T acc = conv.b->data[static_cast<std::size_t>(k)];
          for (std::int64_t c = 0; c < c_in; ++c) {
            acc += conv.w->data[static_cast<std::size_t>(k * c_in + c)] *
                   x->data[static_cast<std::size_t>(((n * c_in + c) * h + y) * w + xx)];
          }
          out->data[static_cast<std::size_t>(((n * k_out + k) * h + y) * w + xx)] = acc;
        }
      }
    }
  }
  return out;
}

template <typename T>
TensorPtr<T> upsample_bilinear(const TensorPtr<T>& x, std::int64_t out_h, std::int64_t out_w) {
  const std::int64_t n_batch = x->dim(0), c_in = x->dim(1);
  const std::int64_t h = x->dim(2), w = x->dim(3);
  auto out = make_tensor<T>({n_batch, c_in, out_h, out_w});
  const T scale_y = static_cast<T>(h) / static_cast<T>(out_h);
  const T scale_x = static_cast<T>(w) / static_cast<T>(out_w);
  auto src = [](std::int64_t d, T scale, std::int64_t limit, std::int64_t& lo, std::int64_t& hi,
                T& frac) {
    T s = (static_cast<T>(d) + T(0.5)) * scale - T(0.5);
    if (s < T(0)) s = T(0);
    if (s > static_cast<T>(limit - 1)) s = static_cast<T>(limit - 1);
    lo = static_cast<std::int64_t>(std::floor(static_cast<double>(s)));
    if (lo > limit - 1) lo = limit - 1;
    hi = (lo < limit - 1) ? lo + 1 : limit - 1;
    frac = s - static_cast<T>(lo);
  };
  for (std::int64_t n = 0; n < n_batch; ++n) {
    for (std::int64_t c = 0; c < c_in; ++c) {
      const T* plane = x->data.data() + (n * c_in + c) * h * w;
      T* oplane = out->data.data() + (n * c_in + c) * out_h * out_w;
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        std::int64_t y0, y1;
        T fy;
        src(oy, scale_y, h, y0, y1, fy);
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          std::int64_t x0, x1;
          T fx;
          src(ox, scale_x, w, x0, x1, fx);
          const T w00 = (T(1) - fy) * (T(1) - fx);
          const T w01 = (T(1) - fy) * fx;
          const T w10 = fy * (T(1) - fx);
          const T w11 = fy * fx;
          oplane[oy * out_w + ox] = w00 * plane[y0 * w + x0] + w01 * plane[y0 * w + x1] +
                                    w10 * plane[y1 * w + x0] + w11 * plane[y1 * w + x1];
        }
      }
    }
  }
  return out;
}

template <typename T>
TensorPtr<T> elementwise_sum(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  auto out = make_tensor<T>(a->dims);
  for (std::int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
  return out;
}

template <typename T>
TensorPtr<T> conv3x3_pad1(const TensorPtr<T>& x, const Conv2dParams<T>& conv) {
  const std::int64_t n_batch = x->dim(0), c_in = x->dim(1);
  const std::int64_t h = x->dim(2), w = x->dim(3);
  const std::int64_t k_out = conv.w->dim(0);
  auto out = make_tensor<T>({n_batch, k_out, h, w});
  for (std::int64_t n = 0; n < n_batch; ++n) {
    for (std::int64_t k = 0; k < k_out; ++k) {
      const T* wk = conv.w->data.data() + k * c_in * 9;
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t xx = 0; xx < w; ++xx) {
          T acc = conv.b->data[static_cast<std::size_t>(k)];
          for (std::int64_t c = 0; c < c_in; ++c) {
            for (std::int64_t i = 0; i < 3; ++i) {
              const std::int64_t sy = y + i - 1;
              for (std::int64_t j = 0; j < 3; ++j) {
                const std::int64_t sx = xx + j - 1;
                // Out-of-range taps read the zero padding: add 0 to keep the
                // accumulation sequence identical to the padded-buffer kernel.
                const T v = (sy >= 0 && sy < h && sx >= 0 && sx < w)
                                ? x->data[static_cast<std::size_t>(((n * c_in + c) * h + sy) * w + sx)]
                                : T(0);
                acc += wk[(c * 3 + i) * 3 + j] * v;
              }
            }
          }
          out->data[static_cast<std::size_t>(((n * k_out + k) * h + y) * w + xx)] = acc;
        }
      }
    }
  }
  return out;
}

}  // namespace

template <typename T>
std::array<TensorPtr<T>, 4> fpn_reference_forward(
    const FeatureHierarchy<T>& hierarchy, const std::array<Conv2dParams<T>, 4>& lateral,
    const std::array<Conv2dParams<T>, 4>& output) {
  hierarchy.validate();
  std::array<TensorPtr<T>, 4> m;
  for (std::size_t l = 0; l < 4; ++l) m[l] = pointwise_conv(hierarchy.c[l], lateral[l]);

  std::array<TensorPtr<T>, 4> merged;
  merged[3] = m[3];
  for (int l = 2; l >= 0; --l) {
    auto up = upsample_bilinear(merged[static_cast<std::size_t>(l + 1)],
                                m[static_cast<std::size_t>(l)]->dim(2),
                                m[static_cast<std::size_t>(l)]->dim(3));
    merged[static_cast<std::size_t>(l)] = elementwise_sum(m[static_cast<std::size_t>(l)], up);
  }

  std::array<TensorPtr<T>, 4> p;
  for (std::size_t l = 0; l < 4; ++l) p[l] = conv3x3_pad1(merged[l], output[l]);
  return p;
}

template std::array<TensorPtr<float>, 4> fpn_reference_forward<float>(
    const FeatureHierarchy<float>&, const std::array<Conv2dParams<float>, 4>&,
    const std::array<Conv2dParams<float>, 4>&);
template std::array<TensorPtr<double>, 4> fpn_reference_forward<double>(
    const FeatureHierarchy<double>&, const std::array<Conv2dParams<double>, 4>&,
    const std::array<Conv2dParams<double>, 4>&);

}  // namespace augfpn
