#ifndef AUGFPN_FPN_REFERENCE_HPP
#define AUGFPN_FPN_REFERENCE_HPP

#include <array>

#include "augfpn/pyramid.hpp"
#include "augfpn/tensor.hpp"

namespace augfpn {

/// Straight-line reimplementation of the plain FPN path (lateral 1x1 convs,
/// top-down upsample-and-add, per-level 3x3 output convs) that shares no code
/// with the tape kernels. Used by the parity checks: with the residual branch
/// zeroed, the tape pyramid must match this bitwise at 64-bit.
///
/// Both implementations accumulate each output element in bias-then-(c,ky,kx)
/// order and evaluate the bilinear blend as
/// w00*v00 + w01*v01 + w10*v10 + w11*v11; this file must keep that convention.
template <typename T>
std::array<TensorPtr<T>, 4> fpn_reference_forward(
    const FeatureHierarchy<T>& hierarchy, const std::array<Conv2dParams<T>, 4>& lateral,
    const std::array<Conv2dParams<T>, 4>& output);

}  // namespace augfpn

#endif  // AUGFPN_FPN_REFERENCE_HPP
