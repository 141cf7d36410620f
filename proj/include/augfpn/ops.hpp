#ifndef AUGFPN_OPS_HPP
#define AUGFPN_OPS_HPP

#include <vector>

#include "augfpn/tensor.hpp"

namespace augfpn {

// Differentiable kernels. Every op takes the recording tape as first argument;
// pass nullptr to run inference-only (no graph is built and outputs carry no
// grad buffers). Shapes are NCHW for 4-d tensors and [rows, cols] for 2-d.

/// Cross-correlation with square stride/padding. Output spatial size must be
/// integral: H' = (H + 2*padding - kh)/stride + 1. Kernel sides must be odd.
/// `bias` may be null. Differentiable w.r.t. input, weight and bias.
template <typename T>
TensorPtr<T> conv2d(Tape<T>* tape, const TensorPtr<T>& input, const TensorPtr<T>& weight,
                    const TensorPtr<T>& bias, int stride, int padding);

/// Bilinear interpolation, align-corners-false: the source coordinate of
/// output pixel d is (d + 0.5) * (in/out) - 0.5, clamped to the valid range.
template <typename T>
TensorPtr<T> bilinear_resize(Tape<T>* tape, const TensorPtr<T>& input, int out_h, int out_w);

/// Adaptive average pooling. Bin (i,j) averages input rows
/// [floor(i*H/out_h), ceil((i+1)*H/out_h)) and the analogous columns.
/// Requires out_h <= H and out_w <= W.
template <typename T>
TensorPtr<T> adaptive_avg_pool2d(Tape<T>* tape, const TensorPtr<T>& input, int out_h, int out_w);

/// Per-channel spatial maximum -> [N,C,1,1]. On ties the gradient is routed to
/// the first maximum in row-major order.
template <typename T>
TensorPtr<T> global_max_pool(Tape<T>* tape, const TensorPtr<T>& input);

/// Positionwise softmax across a group of K single-channel maps (max-shifted
/// for stability). All inputs must share dims [N,1,H,W].
template <typename T>
std::vector<TensorPtr<T>> softmax_over_group(Tape<T>* tape,
                                             const std::vector<TensorPtr<T>>& logits);

template <typename T>
TensorPtr<T> add(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b);

template <typename T>
TensorPtr<T> mul(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b);

template <typename T>
TensorPtr<T> relu(Tape<T>* tape, const TensorPtr<T>& x);

template <typename T>
TensorPtr<T> sigmoid(Tape<T>* tape, const TensorPtr<T>& x);

/// Concatenate along the channel axis; inputs share N,H,W.
template <typename T>
TensorPtr<T> concat_channels(Tape<T>* tape, const std::vector<TensorPtr<T>>& xs);

/// Split [N,C,H,W] into `groups` equal channel blocks (C % groups == 0).
template <typename T>
std::vector<TensorPtr<T>> split_channels(Tape<T>* tape, const TensorPtr<T>& x, int groups);

/// Dense layer: x[B,In] * w[In,Out] + b[Out]. `bias` may be null.
template <typename T>
TensorPtr<T> fully_connected(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& w,
                             const TensorPtr<T>& bias);

/// feature[N,C,H,W] * map[N,1,H,W], the map broadcast across channels.
template <typename T>
TensorPtr<T> channel_scale(Tape<T>* tape, const TensorPtr<T>& feature, const TensorPtr<T>& map);

/// feature[N,C,H,W] * gates[N,C], the gates broadcast across positions.
template <typename T>
TensorPtr<T> channel_gate(Tape<T>* tape, const TensorPtr<T>& feature, const TensorPtr<T>& gates);

/// Fold [N,K*C,H,W] to [N,C,H,W] by summing the K channel groups.
template <typename T>
TensorPtr<T> sum_channel_groups(Tape<T>* tape, const TensorPtr<T>& x, int groups);

/// Elementwise maximum across K same-shaped tensors. The subgradient goes to
/// the earliest input in list order on ties.
template <typename T>
TensorPtr<T> elementwise_max(Tape<T>* tape, const std::vector<TensorPtr<T>>& xs);

/// Multiply by a compile-time constant c.
template <typename T>
TensorPtr<T> scale(Tape<T>* tape, const TensorPtr<T>& x, T c);

/// Sum of all elements -> scalar [1].
template <typename T>
TensorPtr<T> sum_all(Tape<T>* tape, const TensorPtr<T>& x);

/// Same data, new dims (numel must match).
template <typename T>
TensorPtr<T> reshape(Tape<T>* tape, const TensorPtr<T>& x, std::vector<std::int64_t> dims);

/// Stack R same-shaped tensors as flattened rows -> [R, numel].
template <typename T>
TensorPtr<T> stack_flatten(Tape<T>* tape, const std::vector<TensorPtr<T>>& rows);

/// Mean softmax cross-entropy over the batch. labels[b] in [0, C).
template <typename T>
TensorPtr<T> softmax_cross_entropy(Tape<T>* tape, const TensorPtr<T>& logits,
                                   const std::vector<int>& labels);

/// Smooth-L1 (delta = 1) summed over coordinates of rows where active[b] is
/// true, divided by the active count. Returns exactly 0 when none are active.
template <typename T>
TensorPtr<T> smooth_l1(Tape<T>* tape, const TensorPtr<T>& pred,
                       const std::vector<T>& target, const std::vector<bool>& active);

}  // namespace augfpn

#endif  // AUGFPN_OPS_HPP
