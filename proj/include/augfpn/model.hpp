#ifndef AUGFPN_MODEL_HPP
#define AUGFPN_MODEL_HPP

#include "augfpn/config.hpp"
#include "augfpn/serialize.hpp"
#include "augfpn/supervision.hpp"

namespace augfpn {

/// Everything trainable: pyramid weights, the Soft-RoI-Selection fusion
/// weights, the shared auxiliary head and the final head.
template <typename T>
struct Model {
  PyramidParams<T> pyramid;
  SrsParams<T> srs;
  HeadParams<T> aux_head;
  HeadParams<T> final_head;
};

/// Deterministic initialization from cfg.seed (fixed construction order).
template <typename T>
Model<T> make_model(const RunConfig& cfg);

/// Fixed-order named traversal of every parameter tensor; the order defines
/// the checkpoint manifest and the optimizer slot layout.
template <typename T>
ParamList<T> collect_params(const Model<T>& model);

template <typename T>
void zero_all_grads(const Model<T>& model);

}  // namespace augfpn

#endif  // AUGFPN_MODEL_HPP
