#ifndef AUGFPN_SERIALIZE_HPP
#define AUGFPN_SERIALIZE_HPP

#include <string>
#include <utility>
#include <vector>

#include "augfpn/tensor.hpp"

namespace augfpn {

// AFT1 binary tensor file:
//   magic 'A','F','T','1'
//   u8 dtype            0 = f32, 1 = f64
//   u8 ndim
//   ndim x u64 little-endian dims
//   row-major little-endian payload
// Writers emit the element type of the tensor; readers convert to the
// requested precision.

template <typename T>
void save_tensor(const Tensor<T>& t, const std::string& path);

template <typename T>
TensorPtr<T> load_tensor(const std::string& path, bool requires_grad = false);

/// Named parameter list (name -> tensor), in a fixed traversal order.
template <typename T>
using ParamList = std::vector<std::pair<std::string, TensorPtr<T>>>;

/// Writes one AFT1 file per parameter into `dir` plus a `manifest.txt` of
/// `name = filename` lines.
template <typename T>
void save_param_dir(const ParamList<T>& params, const std::string& dir);

/// Loads a manifest directory into already-constructed tensors; every
/// parameter must be present with a matching shape.
template <typename T>
void load_param_dir(const ParamList<T>& params, const std::string& dir);

}  // namespace augfpn

#endif  // AUGFPN_SERIALIZE_HPP
