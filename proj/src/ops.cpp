#include "augfpn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace augfpn {

namespace {

template <typename T>
bool want_grad(Tape<T>* tape, std::initializer_list<const TensorPtr<T>*> inputs) {
  if (!tape) return false;
  for (const auto* in : inputs) {
    if (*in && (*in)->requires_grad) return true;
  }
  return false;
}

template <typename T>
void require_nchw(const TensorPtr<T>& t, const char* op) {
  if (!t || t->ndim() != 4) {
    throw ShapeError(std::string(op) + ": expected a 4-d NCHW tensor" +
                     (t ? ", got " + shape_string(t->dims) : ""));
  }
}

// Fixed-split dot product: one SIMD register's worth of independent
// accumulators so the loop vectorizes without FP reassociation, then a fixed
// reduction order. The split depends only on T, so results are deterministic.
template <typename T>
T dot_lanes(const T* a, const T* b, std::int64_t n) {
  constexpr int kLanes = 64 / sizeof(T);  // 16 floats / 8 doubles per zmm
  T acc[kLanes] = {};
  std::int64_t k = 0;
  for (; k + kLanes <= n; k += kLanes) {
    for (int l = 0; l < kLanes; ++l) acc[l] += a[k + l] * b[k + l];
  }
  T tail = T(0);
  for (; k < n; ++k) tail += a[k] * b[k];
  for (int stride = kLanes / 2; stride > 0; stride /= 2) {
    for (int l = 0; l < stride; ++l) acc[l] += acc[l + stride];
  }
  return acc[0] + tail;
}

// Zero-padded copy of one image, [C, H+2p, W+2p].
template <typename T>
void pad_image(const T* x, std::int64_t c_in, std::int64_t h, std::int64_t w, std::int64_t pad,
               std::vector<T>& out) {
  const std::int64_t hp = h + 2 * pad;
  const std::int64_t wp = w + 2 * pad;
  out.assign(static_cast<std::size_t>(c_in * hp * wp), T(0));
  for (std::int64_t c = 0; c < c_in; ++c) {
    for (std::int64_t i = 0; i < h; ++i) {
      std::memcpy(out.data() + (c * hp + i + pad) * wp + pad, x + (c * h + i) * w,
                  static_cast<std::size_t>(w) * sizeof(T));
    }
  }
}

}  // namespace

template <typename T>
TensorPtr<T> conv2d(Tape<T>* tape, const TensorPtr<T>& input, const TensorPtr<T>& weight,
                    const TensorPtr<T>& bias, int stride, int padding) {
  require_nchw(input, "conv2d");
  require_nchw(weight, "conv2d");
  const std::int64_t n_batch = input->dim(0), c_in = input->dim(1);
  const std::int64_t h = input->dim(2), w = input->dim(3);
  const std::int64_t k_out = weight->dim(0), kh = weight->dim(2), kw = weight->dim(3);
  if (weight->dim(1) != c_in) {
    throw ShapeError("conv2d: weight expects " + std::to_string(weight->dim(1)) +
                     " input channels, input has " + std::to_string(c_in));
  }
  if (bias && (bias->ndim() != 1 || bias->dim(0) != k_out)) {
    throw ShapeError("conv2d: bias must have shape [" + std::to_string(k_out) + "]");
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw ConfigError("conv2d: kernel sides must be odd");
  if (stride < 1 || padding < 0) throw ConfigError("conv2d: bad stride/padding");
  if ((h + 2 * padding - kh) % stride != 0 || (w + 2 * padding - kw) % stride != 0) {
    throw ConfigError("conv2d: non-integral output size for input " + shape_string(input->dims));
  }
  const std::int64_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::int64_t wo = (w + 2 * padding - kw) / stride + 1;
  if (ho < 1 || wo < 1) throw ConfigError("conv2d: empty output");

  KernelCounter::bump("conv2d");
  const bool req = want_grad(tape, {&input, &weight, &bias});
  auto out = make_tensor<T>({n_batch, k_out, ho, wo}, req);

  const std::int64_t hp = h + 2 * padding, wp = w + 2 * padding;
  const std::int64_t s_out = ho * wo;
  const std::int64_t ckk = c_in * kh * kw;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;

  // Tap-major im2col: cols[q][s] with q = (c,i,j) and s = (oy,ox). The inner
  // loops then run over the full output extent, and every output element
  // still accumulates bias first and products in (c,i,j) order — the order
  // the plain-FPN reference path mirrors.
  auto build_cols = [=](const T* xn, std::vector<T>& colbuf) -> const T* {
    if (pointwise) return xn;  // already [C, H*W]
    colbuf.resize(static_cast<std::size_t>(ckk * s_out));
    for (std::int64_t c = 0; c < c_in; ++c) {
      for (std::int64_t i = 0; i < kh; ++i) {
        for (std::int64_t j = 0; j < kw; ++j) {
          T* row = colbuf.data() + ((c * kh + i) * kw + j) * s_out;
          for (std::int64_t oy = 0; oy < ho; ++oy) {
            const T* xr = xn + c * hp * wp + (oy * stride + i) * wp + j;
            if (stride == 1) {
              std::memcpy(row + oy * wo, xr, static_cast<std::size_t>(wo) * sizeof(T));
            } else {
              for (std::int64_t ox = 0; ox < wo; ++ox) row[oy * wo + ox] = xr[ox * stride];
            }
          }
        }
      }
    }
    return colbuf.data();
  };

  std::vector<T> xpad, colbuf;
  for (std::int64_t n = 0; n < n_batch; ++n) {
    const T* xn = input->data.data() + n * c_in * h * w;
    if (padding > 0) {
      pad_image(xn, c_in, h, w, padding, xpad);
      xn = xpad.data();
    }
    const T* cols = build_cols(xn, colbuf);
    for (std::int64_t k = 0; k < k_out; ++k) {
      T* orow = out->data.data() + (n * k_out + k) * s_out;
      const T bv = bias ? bias->data[static_cast<std::size_t>(k)] : T(0);
      std::fill(orow, orow + s_out, bv);
      const T* wk = weight->data.data() + k * ckk;
      for (std::int64_t q = 0; q < ckk; ++q) {
        const T wv = wk[q];
        const T* crow = cols + q * s_out;
        for (std::int64_t s = 0; s < s_out; ++s) orow[s] += wv * crow[s];
      }
    }
  }
  check_finite(*out, "conv2d");

  if (req) {
    tape->record(out, [input, weight, bias, out, stride, padding, n_batch, c_in, h, w, k_out, kh, kw,
                  ho, wo, hp, wp, s_out, ckk, pointwise, build_cols]() {
      const T* g = out->grad.data();
      if (bias && bias->requires_grad) {
        for (std::int64_t k = 0; k < k_out; ++k) {
          T acc = T(0);
          for (std::int64_t n = 0; n < n_batch; ++n) {
            const T* gr = g + (n * k_out + k) * s_out;
            for (std::int64_t s = 0; s < s_out; ++s) acc += gr[s];
          }
          bias->grad[static_cast<std::size_t>(k)] += acc;
        }
      }
      std::vector<T> xpad, colbuf, dcols;
      for (std::int64_t n = 0; n < n_batch; ++n) {
        const T* xn = input->data.data() + n * c_in * h * w;
        if (padding > 0) {
          pad_image(xn, c_in, h, w, padding, xpad);
          xn = xpad.data();
        }
        // Output channels are tiled so the cols/dcols rows stay hot in cache
        // while a block of gradient rows streams through.
        constexpr std::int64_t kBlock = 16;
        if (weight->requires_grad) {
          const T* cols = build_cols(xn, colbuf);
          for (std::int64_t k0 = 0; k0 < k_out; k0 += kBlock) {
            const std::int64_t k1 = std::min(k0 + kBlock, k_out);
            for (std::int64_t q = 0; q < ckk; ++q) {
              const T* crow = cols + q * s_out;
              for (std::int64_t k = k0; k < k1; ++k) {
                weight->grad[static_cast<std::size_t>(k * ckk + q)] +=
                    dot_lanes(g + (n * k_out + k) * s_out, crow, s_out);
              }
            }
          }
        }
        if (input->requires_grad) {
          // dcols[q][s] = sum_k w[k][q] * g[k][s], then fold back (col2im).
          dcols.assign(static_cast<std::size_t>(ckk * s_out), T(0));
          for (std::int64_t k0 = 0; k0 < k_out; k0 += kBlock) {
            const std::int64_t k1 = std::min(k0 + kBlock, k_out);
            for (std::int64_t q = 0; q < ckk; ++q) {
              T* drow = dcols.data() + q * s_out;
              for (std::int64_t k = k0; k < k1; ++k) {
                const T wv = weight->data[static_cast<std::size_t>(k * ckk + q)];
                if (wv == T(0)) continue;
                const T* gr = g + (n * k_out + k) * s_out;
                for (std::int64_t s = 0; s < s_out; ++s) drow[s] += wv * gr[s];
              }
            }
          }
          T* dx = input->grad.data() + n * c_in * h * w;
          if (pointwise) {
            for (std::int64_t i = 0; i < ckk * s_out; ++i) dx[i] += dcols[i];
          } else {
            std::vector<T> dxpad(static_cast<std::size_t>(c_in * hp * wp), T(0));
            for (std::int64_t c = 0; c < c_in; ++c) {
              for (std::int64_t i = 0; i < kh; ++i) {
                for (std::int64_t j = 0; j < kw; ++j) {
                  const T* drow = dcols.data() + ((c * kh + i) * kw + j) * s_out;
                  for (std::int64_t oy = 0; oy < ho; ++oy) {
                    T* dxr = dxpad.data() + c * hp * wp + (oy * stride + i) * wp + j;
                    if (stride == 1) {
                      for (std::int64_t ox = 0; ox < wo; ++ox) dxr[ox] += drow[oy * wo + ox];
                    } else {
                      for (std::int64_t ox = 0; ox < wo; ++ox) {
                        dxr[ox * stride] += drow[oy * wo + ox];
                      }
                    }
                  }
                }
              }
            }
            for (std::int64_t c = 0; c < c_in; ++c) {
              for (std::int64_t i = 0; i < h; ++i) {
                const T* src = dxpad.data() + (c * hp + i + padding) * wp + padding;
                T* dst = dx + (c * h + i) * w;
                for (std::int64_t j = 0; j < w; ++j) dst[j] += src[j];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> bilinear_resize(Tape<T>* tape, const TensorPtr<T>& input, int out_h, int out_w) {
  require_nchw(input, "bilinear_resize");
  if (out_h < 1 || out_w < 1) throw ConfigError("bilinear_resize: target size must be positive");
  const std::int64_t n_batch = input->dim(0), c_in = input->dim(1);
  const std::int64_t h = input->dim(2), w = input->dim(3);

  KernelCounter::bump("bilinear_resize");
  const bool req = want_grad(tape, {&input});
  auto out = make_tensor<T>({n_batch, c_in, out_h, out_w}, req);

  // Source coordinate tables, shared by forward and backward.
  struct Axis {
    std::vector<std::int64_t> lo, hi;
    std::vector<T> frac;
  };
  auto make_axis = [](std::int64_t in_n, std::int64_t out_n) {
    Axis ax;
    ax.lo.resize(static_cast<std::size_t>(out_n));
    ax.hi.resize(static_cast<std::size_t>(out_n));
    ax.frac.resize(static_cast<std::size_t>(out_n));
    const T scale = static_cast<T>(in_n) / static_cast<T>(out_n);
    for (std::int64_t d = 0; d < out_n; ++d) {
      T s = (static_cast<T>(d) + T(0.5)) * scale - T(0.5);
      if (s < T(0)) s = T(0);
      const T max_s = static_cast<T>(in_n - 1);
      if (s > max_s) s = max_s;
      std::int64_t lo = static_cast<std::int64_t>(std::floor(static_cast<double>(s)));
      if (lo > in_n - 1) lo = in_n - 1;
      const std::int64_t hi = (lo < in_n - 1) ? lo + 1 : in_n - 1;
      ax.lo[static_cast<std::size_t>(d)] = lo;
      ax.hi[static_cast<std::size_t>(d)] = hi;
      ax.frac[static_cast<std::size_t>(d)] = s - static_cast<T>(lo);
    }
    return ax;
  };
  const Axis ay = make_axis(h, out_h);
  const Axis ax = make_axis(w, out_w);

  for (std::int64_t n = 0; n < n_batch; ++n) {
    for (std::int64_t c = 0; c < c_in; ++c) {
      const T* plane = input->data.data() + (n * c_in + c) * h * w;
      T* oplane = out->data.data() + (n * c_in + c) * out_h * out_w;
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const std::int64_t y0 = ay.lo[oy], y1 = ay.hi[oy];
        const T fy = ay.frac[oy];
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const std::int64_t x0 = ax.lo[ox], x1 = ax.hi[ox];
          const T fx = ax.frac[ox];
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
  check_finite(*out, "bilinear_resize");

  if (req) {
    tape->record(out, [input, out, ay, ax, n_batch, c_in, h, w, out_h, out_w]() {
      for (std::int64_t n = 0; n < n_batch; ++n) {
        for (std::int64_t c = 0; c < c_in; ++c) {
          T* dplane = input->grad.data() + (n * c_in + c) * h * w;
          const T* gplane = out->grad.data() + (n * c_in + c) * out_h * out_w;
          for (std::int64_t oy = 0; oy < out_h; ++oy) {
            const std::int64_t y0 = ay.lo[oy], y1 = ay.hi[oy];
            const T fy = ay.frac[oy];
            for (std::int64_t ox = 0; ox < out_w; ++ox) {
              const std::int64_t x0 = ax.lo[ox], x1 = ax.hi[ox];
              const T fx = ax.frac[ox];
              const T g = gplane[oy * out_w + ox];
              dplane[y0 * w + x0] += (T(1) - fy) * (T(1) - fx) * g;
              dplane[y0 * w + x1] += (T(1) - fy) * fx * g;
              dplane[y1 * w + x0] += fy * (T(1) - fx) * g;
              dplane[y1 * w + x1] += fy * fx * g;
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> adaptive_avg_pool2d(Tape<T>* tape, const TensorPtr<T>& input, int out_h, int out_w) {
  require_nchw(input, "adaptive_avg_pool2d");
  const std::int64_t n_batch = input->dim(0), c_in = input->dim(1);
  const std::int64_t h = input->dim(2), w = input->dim(3);
  if (out_h < 1 || out_w < 1 || out_h > h || out_w > w) {
    throw ConfigError("adaptive_avg_pool2d: output " + std::to_string(out_h) + "x" +
                      std::to_string(out_w) + " invalid for input " + shape_string(input->dims));
  }

  KernelCounter::bump("adaptive_avg_pool2d");
  const bool req = want_grad(tape, {&input});
  auto out = make_tensor<T>({n_batch, c_in, out_h, out_w}, req);

  auto bin_lo = [](std::int64_t i, std::int64_t in_n, std::int64_t out_n) {
    return (i * in_n) / out_n;
  };
  auto bin_hi = [](std::int64_t i, std::int64_t in_n, std::int64_t out_n) {
    return ((i + 1) * in_n + out_n - 1) / out_n;
  };

  for (std::int64_t n = 0; n < n_batch; ++n) {
    for (std::int64_t c = 0; c < c_in; ++c) {
      const T* plane = input->data.data() + (n * c_in + c) * h * w;
      T* oplane = out->data.data() + (n * c_in + c) * out_h * out_w;
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const std::int64_t y0 = bin_lo(oy, h, out_h), y1 = bin_hi(oy, h, out_h);
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const std::int64_t x0 = bin_lo(ox, w, out_w), x1 = bin_hi(ox, w, out_w);
          T acc = T(0);
          for (std::int64_t iy = y0; iy < y1; ++iy) {
            for (std::int64_t ix = x0; ix < x1; ++ix) acc += plane[iy * w + ix];
          }
          oplane[oy * out_w + ox] = acc / static_cast<T>((y1 - y0) * (x1 - x0));
        }
      }
    }
  }
  check_finite(*out, "adaptive_avg_pool2d");

  if (req) {
    tape->record(out, [input, out, n_batch, c_in, h, w, out_h, out_w, bin_lo, bin_hi]() {
      for (std::int64_t n = 0; n < n_batch; ++n) {
        for (std::int64_t c = 0; c < c_in; ++c) {
          T* dplane = input->grad.data() + (n * c_in + c) * h * w;
          const T* gplane = out->grad.data() + (n * c_in + c) * out_h * out_w;
          for (std::int64_t oy = 0; oy < out_h; ++oy) {
            const std::int64_t y0 = bin_lo(oy, h, out_h), y1 = bin_hi(oy, h, out_h);
            for (std::int64_t ox = 0; ox < out_w; ++ox) {
              const std::int64_t x0 = bin_lo(ox, w, out_w), x1 = bin_hi(ox, w, out_w);
              const T g = gplane[oy * out_w + ox] / static_cast<T>((y1 - y0) * (x1 - x0));
              for (std::int64_t iy = y0; iy < y1; ++iy) {
                for (std::int64_t ix = x0; ix < x1; ++ix) dplane[iy * w + ix] += g;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> global_max_pool(Tape<T>* tape, const TensorPtr<T>& input) {
  require_nchw(input, "global_max_pool");
  const std::int64_t n_batch = input->dim(0), c_in = input->dim(1);
  const std::int64_t hw = input->dim(2) * input->dim(3);

  KernelCounter::bump("global_max_pool");
  const bool req = want_grad(tape, {&input});
  auto out = make_tensor<T>({n_batch, c_in, 1, 1}, req);

  // argmax per plane; strict > keeps the first (row-major) max on ties.
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(n_batch * c_in));
  for (std::int64_t p = 0; p < n_batch * c_in; ++p) {
    const T* plane = input->data.data() + p * hw;
    std::int64_t best = 0;
    T bv = plane[0];
    for (std::int64_t s = 1; s < hw; ++s) {
      if (plane[s] > bv) {
        bv = plane[s];
        best = s;
      }
    }
    out->data[static_cast<std::size_t>(p)] = bv;
    argmax[static_cast<std::size_t>(p)] = best;
  }
  check_finite(*out, "global_max_pool");

  if (req) {
    tape->record(out, [input, out, argmax = std::move(argmax), n_batch, c_in, hw]() {
      for (std::int64_t p = 0; p < n_batch * c_in; ++p) {
        input->grad[static_cast<std::size_t>(p * hw + argmax[static_cast<std::size_t>(p)])] +=
            out->grad[static_cast<std::size_t>(p)];
      }
    });
  }
  return out;
}

template <typename T>
std::vector<TensorPtr<T>> softmax_over_group(Tape<T>* tape,
                                             const std::vector<TensorPtr<T>>& logits) {
  if (logits.empty()) throw ShapeError("softmax_over_group: empty group");
  const std::size_t k_count = logits.size();
  for (const auto& l : logits) {
    require_nchw(l, "softmax_over_group");
    if (l->dim(1) != 1) throw ShapeError("softmax_over_group: maps must be single-channel");
    if (!same_shape(*l, *logits[0])) {
      throw ShapeError("softmax_over_group: mismatched shapes " + shape_string(l->dims) +
                       " vs " + shape_string(logits[0]->dims));
    }
  }
  const std::int64_t count = logits[0]->numel();

  KernelCounter::bump("softmax_over_group");
  bool req = false;
  for (const auto& l : logits) req = req || (tape && l->requires_grad);

  std::vector<TensorPtr<T>> out(k_count);
  for (std::size_t k = 0; k < k_count; ++k) out[k] = make_tensor<T>(logits[0]->dims, req);

  for (std::int64_t s = 0; s < count; ++s) {
    T m = logits[0]->data[static_cast<std::size_t>(s)];
    for (std::size_t k = 1; k < k_count; ++k) m = std::max(m, logits[k]->data[static_cast<std::size_t>(s)]);
    T z = T(0);
    for (std::size_t k = 0; k < k_count; ++k) {
      const T e = std::exp(logits[k]->data[static_cast<std::size_t>(s)] - m);
      out[k]->data[static_cast<std::size_t>(s)] = e;
      z += e;
    }
    for (std::size_t k = 0; k < k_count; ++k) out[k]->data[static_cast<std::size_t>(s)] /= z;
  }
  for (const auto& o : out) check_finite(*o, "softmax_over_group");

  if (req) {
    tape->record(out, [logits, out, count, k_count]() {
      // dL/dl_k = y_k * (g_k - sum_j g_j y_j)
      for (std::int64_t s = 0; s < count; ++s) {
        T dot = T(0);
        for (std::size_t k = 0; k < k_count; ++k) {
          dot += out[k]->grad[static_cast<std::size_t>(s)] * out[k]->data[static_cast<std::size_t>(s)];
        }
        for (std::size_t k = 0; k < k_count; ++k) {
          if (!logits[k]->requires_grad) continue;
          logits[k]->grad[static_cast<std::size_t>(s)] +=
              out[k]->data[static_cast<std::size_t>(s)] *
              (out[k]->grad[static_cast<std::size_t>(s)] - dot);
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> add(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (!same_shape(*a, *b)) {
    throw ShapeError("add: shape mismatch " + shape_string(a->dims) + " vs " +
                     shape_string(b->dims));
  }
  KernelCounter::bump("add");
  const bool req = want_grad(tape, {&a, &b});
  auto out = make_tensor<T>(a->dims, req);
  const std::int64_t n = a->numel();
  for (std::int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] + b->data[i];
  check_finite(*out, "add");
  if (req) {
    tape->record(out, [a, b, out, n]() {
      if (a->requires_grad) a->accumulate_grad(out->grad.data(), n);
      if (b->requires_grad) b->accumulate_grad(out->grad.data(), n);
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> mul(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (!same_shape(*a, *b)) {
    throw ShapeError("mul: shape mismatch " + shape_string(a->dims) + " vs " +
                     shape_string(b->dims));
  }
  KernelCounter::bump("mul");
  const bool req = want_grad(tape, {&a, &b});
  auto out = make_tensor<T>(a->dims, req);
  const std::int64_t n = a->numel();
  for (std::int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * b->data[i];
  check_finite(*out, "mul");
  if (req) {
    tape->record(out, [a, b, out, n]() {
      for (std::int64_t i = 0; i < n; ++i) {
        if (a->requires_grad) a->grad[i] += b->data[i] * out->grad[i];
        if (b->requires_grad) b->grad[i] += a->data[i] * out->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> relu(Tape<T>* tape, const TensorPtr<T>& x) {
  KernelCounter::bump("relu");
  const bool req = want_grad(tape, {&x});
  auto out = make_tensor<T>(x->dims, req);
  const std::int64_t n = x->numel();
  for (std::int64_t i = 0; i < n; ++i) out->data[i] = x->data[i] > T(0) ? x->data[i] : T(0);
  if (req) {
    tape->record(out, [x, out, n]() {
      for (std::int64_t i = 0; i < n; ++i) {
        if (x->data[i] > T(0)) x->grad[i] += out->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> sigmoid(Tape<T>* tape, const TensorPtr<T>& x) {
  KernelCounter::bump("sigmoid");
  const bool req = want_grad(tape, {&x});
  auto out = make_tensor<T>(x->dims, req);
  const std::int64_t n = x->numel();
  for (std::int64_t i = 0; i < n; ++i) out->data[i] = T(1) / (T(1) + std::exp(-x->data[i]));
  check_finite(*out, "sigmoid");
  if (req) {
    tape->record(out, [x, out, n]() {
      for (std::int64_t i = 0; i < n; ++i) {
        x->grad[i] += out->data[i] * (T(1) - out->data[i]) * out->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> concat_channels(Tape<T>* tape, const std::vector<TensorPtr<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: empty input list");
  std::int64_t c_total = 0;
  for (const auto& x : xs) {
    require_nchw(x, "concat_channels");
    if (x->dim(0) != xs[0]->dim(0) || x->dim(2) != xs[0]->dim(2) || x->dim(3) != xs[0]->dim(3)) {
      throw ShapeError("concat_channels: inputs must share N,H,W");
    }
    c_total += x->dim(1);
  }
  const std::int64_t n_batch = xs[0]->dim(0), hw = xs[0]->dim(2) * xs[0]->dim(3);

  KernelCounter::bump("concat_channels");
  bool req = false;
  for (const auto& x : xs) req = req || (tape && x->requires_grad);
  auto out = make_tensor<T>({n_batch, c_total, xs[0]->dim(2), xs[0]->dim(3)}, req);

  for (std::int64_t n = 0; n < n_batch; ++n) {
    std::int64_t c_off = 0;
    for (const auto& x : xs) {
      const std::int64_t c = x->dim(1);
      std::memcpy(out->data.data() + (n * c_total + c_off) * hw, x->data.data() + n * c * hw,
                  static_cast<std::size_t>(c * hw) * sizeof(T));
      c_off += c;
    }
  }
  if (req) {
    tape->record(out, [xs, out, n_batch, c_total, hw]() {
      for (std::int64_t n = 0; n < n_batch; ++n) {
        std::int64_t c_off = 0;
        for (const auto& x : xs) {
          const std::int64_t c = x->dim(1);
          if (x->requires_grad) {
            const T* g = out->grad.data() + (n * c_total + c_off) * hw;
            T* dst = x->grad.data() + n * c * hw;
            for (std::int64_t i = 0; i < c * hw; ++i) dst[i] += g[i];
          }
          c_off += c;
        }
      }
    });
  }
  return out;
}

template <typename T>
std::vector<TensorPtr<T>> split_channels(Tape<T>* tape, const TensorPtr<T>& x, int groups) {
  require_nchw(x, "split_channels");
  if (groups < 1 || x->dim(1) % groups != 0) {
    throw ShapeError("split_channels: " + std::to_string(x->dim(1)) +
                     " channels not divisible into " + std::to_string(groups) + " groups");
  }
  const std::int64_t n_batch = x->dim(0), c_all = x->dim(1);
  const std::int64_t c = c_all / groups, hw = x->dim(2) * x->dim(3);

  KernelCounter::bump("split_channels");
  const bool req = want_grad(tape, {&x});
  std::vector<TensorPtr<T>> out(static_cast<std::size_t>(groups));
  for (int k = 0; k < groups; ++k) {
    out[static_cast<std::size_t>(k)] = make_tensor<T>({n_batch, c, x->dim(2), x->dim(3)}, req);
    for (std::int64_t n = 0; n < n_batch; ++n) {
      std::memcpy(out[static_cast<std::size_t>(k)]->data.data() + n * c * hw,
                  x->data.data() + (n * c_all + k * c) * hw,
                  static_cast<std::size_t>(c * hw) * sizeof(T));
    }
  }
  if (req) {
    tape->record(out, [x, out, groups, n_batch, c_all, c, hw]() {
      for (int k = 0; k < groups; ++k) {
        for (std::int64_t n = 0; n < n_batch; ++n) {
          const T* g = out[static_cast<std::size_t>(k)]->grad.data() + n * c * hw;
          T* dst = x->grad.data() + (n * c_all + k * c) * hw;
          for (std::int64_t i = 0; i < c * hw; ++i) dst[i] += g[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> fully_connected(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& w,
                             const TensorPtr<T>& bias) {
  if (x->ndim() != 2 || w->ndim() != 2) {
    throw ShapeError("fully_connected: expected x[B,In], w[In,Out]");
  }
  const std::int64_t b_rows = x->dim(0), in_f = x->dim(1), out_f = w->dim(1);
  if (w->dim(0) != in_f) {
    throw ShapeError("fully_connected: w expects " + std::to_string(w->dim(0)) +
                     " inputs, x has " + std::to_string(in_f));
  }
  if (bias && (bias->ndim() != 1 || bias->dim(0) != out_f)) {
    throw ShapeError("fully_connected: bias must have shape [" + std::to_string(out_f) + "]");
  }

  KernelCounter::bump("fully_connected");
  const bool req = want_grad(tape, {&x, &w, &bias});
  auto out = make_tensor<T>({b_rows, out_f}, req);

  for (std::int64_t b = 0; b < b_rows; ++b) {
    T* orow = out->data.data() + b * out_f;
    if (bias) {
      std::memcpy(orow, bias->data.data(), static_cast<std::size_t>(out_f) * sizeof(T));
    }
    const T* xr = x->data.data() + b * in_f;
    for (std::int64_t i = 0; i < in_f; ++i) {
      const T a = xr[i];
      if (a == T(0)) continue;
      const T* wr = w->data.data() + i * out_f;
      for (std::int64_t j = 0; j < out_f; ++j) orow[j] += a * wr[j];
    }
  }
  check_finite(*out, "fully_connected");

  if (req) {
    tape->record(out, [x, w, bias, out, b_rows, in_f, out_f]() {
      const T* g = out->grad.data();
      if (bias && bias->requires_grad) {
        for (std::int64_t j = 0; j < out_f; ++j) {
          T acc = T(0);
          for (std::int64_t b = 0; b < b_rows; ++b) acc += g[b * out_f + j];
          bias->grad[static_cast<std::size_t>(j)] += acc;
        }
      }
      if (w->requires_grad) {
        for (std::int64_t b = 0; b < b_rows; ++b) {
          const T* xr = x->data.data() + b * in_f;
          const T* gr = g + b * out_f;
          for (std::int64_t i = 0; i < in_f; ++i) {
            const T a = xr[i];
            if (a == T(0)) continue;
            T* dwr = w->grad.data() + i * out_f;
            for (std::int64_t j = 0; j < out_f; ++j) dwr[j] += a * gr[j];
          }
        }
      }
      if (x->requires_grad) {
        for (std::int64_t b = 0; b < b_rows; ++b) {
          const T* gr = g + b * out_f;
          T* dxr = x->grad.data() + b * in_f;
          for (std::int64_t i = 0; i < in_f; ++i) {
            dxr[i] += dot_lanes(gr, w->data.data() + i * out_f, out_f);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> channel_scale(Tape<T>* tape, const TensorPtr<T>& feature, const TensorPtr<T>& map) {
  require_nchw(feature, "channel_scale");
  require_nchw(map, "channel_scale");
  if (map->dim(0) != feature->dim(0) || map->dim(1) != 1 || map->dim(2) != feature->dim(2) ||
      map->dim(3) != feature->dim(3)) {
    throw ShapeError("channel_scale: map " + shape_string(map->dims) +
                     " does not broadcast over " + shape_string(feature->dims));
  }
  const std::int64_t n_batch = feature->dim(0), c = feature->dim(1);
  const std::int64_t hw = feature->dim(2) * feature->dim(3);

  KernelCounter::bump("channel_scale");
  const bool req = want_grad(tape, {&feature, &map});
  auto out = make_tensor<T>(feature->dims, req);
  for (std::int64_t n = 0; n < n_batch; ++n) {
    const T* m = map->data.data() + n * hw;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T* f = feature->data.data() + (n * c + ch) * hw;
      T* o = out->data.data() + (n * c + ch) * hw;
      for (std::int64_t s = 0; s < hw; ++s) o[s] = f[s] * m[s];
    }
  }
  check_finite(*out, "channel_scale");
  if (req) {
    tape->record(out, [feature, map, out, n_batch, c, hw]() {
      for (std::int64_t n = 0; n < n_batch; ++n) {
        const T* m = map->data.data() + n * hw;
        T* dm = map->requires_grad ? map->grad.data() + n * hw : nullptr;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T* f = feature->data.data() + (n * c + ch) * hw;
          const T* g = out->grad.data() + (n * c + ch) * hw;
          if (feature->requires_grad) {
            T* df = feature->grad.data() + (n * c + ch) * hw;
            for (std::int64_t s = 0; s < hw; ++s) df[s] += m[s] * g[s];
          }
          if (dm) {
            for (std::int64_t s = 0; s < hw; ++s) dm[s] += f[s] * g[s];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> channel_gate(Tape<T>* tape, const TensorPtr<T>& feature, const TensorPtr<T>& gates) {
  require_nchw(feature, "channel_gate");
  if (gates->ndim() != 2 || gates->dim(0) != feature->dim(0) || gates->dim(1) != feature->dim(1)) {
    throw ShapeError("channel_gate: gates " + shape_string(gates->dims) +
                     " do not match " + shape_string(feature->dims));
  }
  const std::int64_t n_batch = feature->dim(0), c = feature->dim(1);
  const std::int64_t hw = feature->dim(2) * feature->dim(3);

  KernelCounter::bump("channel_gate");
  const bool req = want_grad(tape, {&feature, &gates});
  auto out = make_tensor<T>(feature->dims, req);
  for (std::int64_t p = 0; p < n_batch * c; ++p) {
    const T gv = gates->data[static_cast<std::size_t>(p)];
    const T* f = feature->data.data() + p * hw;
    T* o = out->data.data() + p * hw;
    for (std::int64_t s = 0; s < hw; ++s) o[s] = f[s] * gv;
  }
  check_finite(*out, "channel_gate");
  if (req) {
    tape->record(out, [feature, gates, out, n_batch, c, hw]() {
      for (std::int64_t p = 0; p < n_batch * c; ++p) {
        const T* f = feature->data.data() + p * hw;
        const T* g = out->grad.data() + p * hw;
        if (feature->requires_grad) {
          const T gv = gates->data[static_cast<std::size_t>(p)];
          T* df = feature->grad.data() + p * hw;
          for (std::int64_t s = 0; s < hw; ++s) df[s] += gv * g[s];
        }
        if (gates->requires_grad) {
          T acc = T(0);
          for (std::int64_t s = 0; s < hw; ++s) acc += f[s] * g[s];
          gates->grad[static_cast<std::size_t>(p)] += acc;
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> sum_channel_groups(Tape<T>* tape, const TensorPtr<T>& x, int groups) {
  require_nchw(x, "sum_channel_groups");
  if (groups < 1 || x->dim(1) % groups != 0) {
    throw ShapeError("sum_channel_groups: channels not divisible by groups");
  }
  const std::int64_t n_batch = x->dim(0), c_all = x->dim(1);
  const std::int64_t c = c_all / groups, hw = x->dim(2) * x->dim(3);

  KernelCounter::bump("sum_channel_groups");
  const bool req = want_grad(tape, {&x});
  auto out = make_tensor<T>({n_batch, c, x->dim(2), x->dim(3)}, req);
  for (std::int64_t n = 0; n < n_batch; ++n) {
    for (int k = 0; k < groups; ++k) {
      const T* src = x->data.data() + (n * c_all + static_cast<std::int64_t>(k) * c) * hw;
      T* dst = out->data.data() + n * c * hw;
      for (std::int64_t i = 0; i < c * hw; ++i) dst[i] += src[i];
    }
  }
  check_finite(*out, "sum_channel_groups");
  if (req) {
    tape->record(out, [x, out, groups, n_batch, c_all, c, hw]() {
      for (std::int64_t n = 0; n < n_batch; ++n) {
        const T* g = out->grad.data() + n * c * hw;
        for (int k = 0; k < groups; ++k) {
          T* dst = x->grad.data() + (n * c_all + static_cast<std::int64_t>(k) * c) * hw;
          for (std::int64_t i = 0; i < c * hw; ++i) dst[i] += g[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> elementwise_max(Tape<T>* tape, const std::vector<TensorPtr<T>>& xs) {
  if (xs.empty()) throw ShapeError("elementwise_max: empty input list");
  for (const auto& x : xs) {
    if (!same_shape(*x, *xs[0])) throw ShapeError("elementwise_max: mismatched shapes");
  }
  KernelCounter::bump("elementwise_max");
  bool req = false;
  for (const auto& x : xs) req = req || (tape && x->requires_grad);
  auto out = make_tensor<T>(xs[0]->dims, req);
  const std::int64_t n = out->numel();
  std::vector<std::uint8_t> which(static_cast<std::size_t>(n), 0);
  for (std::int64_t i = 0; i < n; ++i) {
    T best = xs[0]->data[i];
    std::uint8_t arg = 0;
    for (std::size_t k = 1; k < xs.size(); ++k) {
      if (xs[k]->data[i] > best) {
        best = xs[k]->data[i];
        arg = static_cast<std::uint8_t>(k);
      }
    }
    out->data[i] = best;
    which[static_cast<std::size_t>(i)] = arg;
  }
  if (req) {
    tape->record(out, [xs, out, which = std::move(which), n]() {
      for (std::int64_t i = 0; i < n; ++i) {
        const auto& winner = xs[which[static_cast<std::size_t>(i)]];
        if (winner->requires_grad) winner->grad[i] += out->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> scale(Tape<T>* tape, const TensorPtr<T>& x, T c) {
  KernelCounter::bump("scale");
  const bool req = want_grad(tape, {&x});
  auto out = make_tensor<T>(x->dims, req);
  const std::int64_t n = x->numel();
  for (std::int64_t i = 0; i < n; ++i) out->data[i] = c * x->data[i];
  check_finite(*out, "scale");
  if (req) {
    tape->record(out, [x, out, c, n]() {
      for (std::int64_t i = 0; i < n; ++i) x->grad[i] += c * out->grad[i];
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> sum_all(Tape<T>* tape, const TensorPtr<T>& x) {
  KernelCounter::bump("sum_all");
  const bool req = want_grad(tape, {&x});
  auto out = make_tensor<T>({1}, req);
  T acc = T(0);
  const std::int64_t n = x->numel();
  for (std::int64_t i = 0; i < n; ++i) acc += x->data[i];
  out->data[0] = acc;
  check_finite(*out, "sum_all");
  if (req) {
    tape->record(out, [x, out, n]() {
      const T g = out->grad[0];
      for (std::int64_t i = 0; i < n; ++i) x->grad[i] += g;
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> reshape(Tape<T>* tape, const TensorPtr<T>& x, std::vector<std::int64_t> dims) {
  if (shape_numel(dims) != x->numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(x->dims) + " as " +
                     shape_string(dims));
  }
  const bool req = want_grad(tape, {&x});
  auto out = make_tensor<T>(std::move(dims), x->data, req);
  if (req) {
    tape->record(out, [x, out]() { x->accumulate_grad(out->grad.data(), out->numel()); });
  }
  return out;
}

template <typename T>
TensorPtr<T> stack_flatten(Tape<T>* tape, const std::vector<TensorPtr<T>>& rows) {
  if (rows.empty()) throw ShapeError("stack_flatten: empty input list");
  const std::int64_t cols = rows[0]->numel();
  for (const auto& r : rows) {
    if (!same_shape(*r, *rows[0])) throw ShapeError("stack_flatten: mismatched row shapes");
  }
  KernelCounter::bump("stack_flatten");
  bool req = false;
  for (const auto& r : rows) req = req || (tape && r->requires_grad);
  auto out = make_tensor<T>({static_cast<std::int64_t>(rows.size()), cols}, req);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::memcpy(out->data.data() + static_cast<std::int64_t>(r) * cols, rows[r]->data.data(),
                static_cast<std::size_t>(cols) * sizeof(T));
  }
  if (req) {
    tape->record(out, [rows, out, cols]() {
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r]->requires_grad) {
          rows[r]->accumulate_grad(out->grad.data() + static_cast<std::int64_t>(r) * cols, cols);
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> softmax_cross_entropy(Tape<T>* tape, const TensorPtr<T>& logits,
                                   const std::vector<int>& labels) {
  if (logits->ndim() != 2) throw ShapeError("softmax_cross_entropy: expected logits[B,C]");
  const std::int64_t b_rows = logits->dim(0), classes = logits->dim(1);
  if (static_cast<std::int64_t>(labels.size()) != b_rows) {
    throw ShapeError("softmax_cross_entropy: label count mismatch");
  }
  for (int y : labels) {
    if (y < 0 || y >= classes) {
      throw UsageError("softmax_cross_entropy: label " + std::to_string(y) + " out of range [0," +
                       std::to_string(classes) + ")");
    }
  }

  KernelCounter::bump("softmax_cross_entropy");
  const bool req = want_grad(tape, {&logits});
  auto out = make_tensor<T>({1}, req);
  T acc = T(0);
  for (std::int64_t b = 0; b < b_rows; ++b) {
    const T* row = logits->data.data() + b * classes;
    T m = row[0];
    for (std::int64_t j = 1; j < classes; ++j) m = std::max(m, row[j]);
    T z = T(0);
    for (std::int64_t j = 0; j < classes; ++j) z += std::exp(row[j] - m);
    acc += (m + std::log(z)) - row[labels[static_cast<std::size_t>(b)]];
  }
  out->data[0] = acc / static_cast<T>(b_rows);
  check_finite(*out, "softmax_cross_entropy");

  if (req) {
    tape->record(out, [logits, out, labels, b_rows, classes]() {
      const T g = out->grad[0] / static_cast<T>(b_rows);
      for (std::int64_t b = 0; b < b_rows; ++b) {
        const T* row = logits->data.data() + b * classes;
        T* drow = logits->grad.data() + b * classes;
        T m = row[0];
        for (std::int64_t j = 1; j < classes; ++j) m = std::max(m, row[j]);
        T z = T(0);
        for (std::int64_t j = 0; j < classes; ++j) z += std::exp(row[j] - m);
        for (std::int64_t j = 0; j < classes; ++j) {
          T p = std::exp(row[j] - m) / z;
          if (j == labels[static_cast<std::size_t>(b)]) p -= T(1);
          drow[j] += p * g;
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> smooth_l1(Tape<T>* tape, const TensorPtr<T>& pred, const std::vector<T>& target,
                       const std::vector<bool>& active) {
  if (pred->ndim() != 2) throw ShapeError("smooth_l1: expected pred[B,D]");
  const std::int64_t b_rows = pred->dim(0), d_cols = pred->dim(1);
  if (static_cast<std::int64_t>(target.size()) != pred->numel() ||
      static_cast<std::int64_t>(active.size()) != b_rows) {
    throw ShapeError("smooth_l1: target/active size mismatch");
  }
  std::int64_t positives = 0;
  for (bool a : active) positives += a ? 1 : 0;

  KernelCounter::bump("smooth_l1");
  const bool req = want_grad(tape, {&pred}) && positives > 0;
  auto out = make_tensor<T>({1}, req);
  if (positives == 0) return out;  // exactly zero, no gradient path

  T acc = T(0);
  for (std::int64_t b = 0; b < b_rows; ++b) {
    if (!active[static_cast<std::size_t>(b)]) continue;
    for (std::int64_t d = 0; d < d_cols; ++d) {
      const T diff = pred->data[b * d_cols + d] - target[static_cast<std::size_t>(b * d_cols + d)];
      const T a = std::abs(diff);
      acc += (a < T(1)) ? T(0.5) * diff * diff : a - T(0.5);
    }
  }
  out->data[0] = acc / static_cast<T>(positives);
  check_finite(*out, "smooth_l1");

  if (req) {
    tape->record(out, [pred, out, target, active, b_rows, d_cols, positives]() {
      const T g = out->grad[0] / static_cast<T>(positives);
      for (std::int64_t b = 0; b < b_rows; ++b) {
        if (!active[static_cast<std::size_t>(b)]) continue;
        for (std::int64_t d = 0; d < d_cols; ++d) {
          const T diff =
              pred->data[b * d_cols + d] - target[static_cast<std::size_t>(b * d_cols + d)];
          const T slope = (std::abs(diff) < T(1)) ? diff : (diff > T(0) ? T(1) : T(-1));
          pred->grad[b * d_cols + d] += slope * g;
        }
      }
    });
  }
  return out;
}

#define AUGFPN_INSTANTIATE_OPS(T)                                                               \
  template TensorPtr<T> conv2d<T>(Tape<T>*, const TensorPtr<T>&, const TensorPtr<T>&,           \
                                  const TensorPtr<T>&, int, int);                               \
  template TensorPtr<T> bilinear_resize<T>(Tape<T>*, const TensorPtr<T>&, int, int);            \
  template TensorPtr<T> adaptive_avg_pool2d<T>(Tape<T>*, const TensorPtr<T>&, int, int);        \
  template TensorPtr<T> global_max_pool<T>(Tape<T>*, const TensorPtr<T>&);                      \
  template std::vector<TensorPtr<T>> softmax_over_group<T>(Tape<T>*,                            \
                                                           const std::vector<TensorPtr<T>>&);   \
  template TensorPtr<T> add<T>(Tape<T>*, const TensorPtr<T>&, const TensorPtr<T>&);             \
  template TensorPtr<T> mul<T>(Tape<T>*, const TensorPtr<T>&, const TensorPtr<T>&);             \
  template TensorPtr<T> relu<T>(Tape<T>*, const TensorPtr<T>&);                                 \
  template TensorPtr<T> sigmoid<T>(Tape<T>*, const TensorPtr<T>&);                              \
  template TensorPtr<T> concat_channels<T>(Tape<T>*, const std::vector<TensorPtr<T>>&);         \
  template std::vector<TensorPtr<T>> split_channels<T>(Tape<T>*, const TensorPtr<T>&, int);     \
  template TensorPtr<T> fully_connected<T>(Tape<T>*, const TensorPtr<T>&, const TensorPtr<T>&,  \
                                           const TensorPtr<T>&);                                \
  template TensorPtr<T> channel_scale<T>(Tape<T>*, const TensorPtr<T>&, const TensorPtr<T>&);   \
  template TensorPtr<T> channel_gate<T>(Tape<T>*, const TensorPtr<T>&, const TensorPtr<T>&);    \
  template TensorPtr<T> sum_channel_groups<T>(Tape<T>*, const TensorPtr<T>&, int);              \
  template TensorPtr<T> elementwise_max<T>(Tape<T>*, const std::vector<TensorPtr<T>>&);         \
  template TensorPtr<T> scale<T>(Tape<T>*, const TensorPtr<T>&, T);                             \
  template TensorPtr<T> sum_all<T>(Tape<T>*, const TensorPtr<T>&);                              \
  template TensorPtr<T> reshape<T>(Tape<T>*, const TensorPtr<T>&, std::vector<std::int64_t>);   \
  template TensorPtr<T> stack_flatten<T>(Tape<T>*, const std::vector<TensorPtr<T>>&);           \
  template TensorPtr<T> softmax_cross_entropy<T>(Tape<T>*, const TensorPtr<T>&,                 \
                                                 const std::vector<int>&);                      \
  template TensorPtr<T> smooth_l1<T>(Tape<T>*, const TensorPtr<T>&, const std::vector<T>&,      \
                                     const std::vector<bool>&);

AUGFPN_INSTANTIATE_OPS(float)
AUGFPN_INSTANTIATE_OPS(double)
#undef AUGFPN_INSTANTIATE_OPS

}  // namespace augfpn
