#ifndef AUGFPN_TENSOR_HPP
#define AUGFPN_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace augfpn {

/// Tensor/op shape violations (wrong rank, mismatched dims, bad channels).
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid configuration values (bad alphas, non-integral conv output, ...).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// API misuse (non-scalar backward root, out-of-range label, missing file).
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dense row-major tensor. `grad` is allocated (zeroed) iff `requires_grad`.
/// Tensors are treated as immutable once produced by a forward op; only leaf
/// data is mutated, by the optimizer, between steps.
template <typename T>
struct Tensor {
  std::vector<std::int64_t> dims;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;

  Tensor(std::vector<std::int64_t> d, bool req_grad);
  Tensor(std::vector<std::int64_t> d, std::vector<T> values, bool req_grad);

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(dims.size()); }
  std::int64_t dim(int i) const { return dims[static_cast<std::size_t>(i)]; }

  // Flat offset helpers for the common NCHW / row-matrix layouts.
  std::int64_t at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return ((n * dims[1] + c) * dims[2] + h) * dims[3] + w;
  }
  std::int64_t at2(std::int64_t r, std::int64_t c) const { return r * dims[1] + c; }

  void zero_grad();
  void accumulate_grad(const T* g, std::int64_t n);
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

std::int64_t shape_numel(const std::vector<std::int64_t>& dims);
std::string shape_string(const std::vector<std::int64_t>& dims);

template <typename T>
TensorPtr<T> make_tensor(std::vector<std::int64_t> dims, bool requires_grad = false);

template <typename T>
TensorPtr<T> make_tensor(std::vector<std::int64_t> dims, std::vector<T> values,
                         bool requires_grad = false);

template <typename T>
TensorPtr<T> full(std::vector<std::int64_t> dims, T value, bool requires_grad = false);

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b);

/// Reverse-mode tape. Forward ops append their backward rule in execution
/// order, which keeps the list topologically sorted; `backward` replays it
/// once in reverse and each rule accumulates (never overwrites) gradients.
/// Ops register their outputs alongside the rule so that a replay can reset
/// intermediate gradients while leaf gradients keep accumulating.
template <typename T>
class Tape {
 public:
  void record(TensorPtr<T> output, std::function<void()> backward_rule) {
    outputs_.push_back(std::move(output));
    nodes_.push_back(std::move(backward_rule));
  }
  void record(const std::vector<TensorPtr<T>>& outputs, std::function<void()> backward_rule) {
    for (const auto& o : outputs) outputs_.push_back(o);
    nodes_.push_back(std::move(backward_rule));
  }
  std::size_t size() const { return nodes_.size(); }
  void clear() {
    nodes_.clear();
    outputs_.clear();
  }

  template <typename U>
  friend void backward(Tape<U>& tape, const TensorPtr<U>& root);

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<TensorPtr<T>> outputs_;
};

/// Zeroes the grads of every op output on the tape, seeds d(root)/d(root) = 1
/// and replays the rules in reverse. `root` must be a scalar (numel 1)
/// produced on this tape. Repeated calls accumulate into leaf gradients.
template <typename T>
void backward(Tape<T>& tape, const TensorPtr<T>& root);

/// Returns true when every element of `t` is finite.
template <typename T>
bool all_finite(const Tensor<T>& t);

/// When enabled, every forward op asserts its output is finite (throws
/// UsageError naming the op otherwise). Off by default; test binaries and the
/// gradcheck runner turn it on.
void set_finite_checks(bool on);
bool finite_checks_enabled();

template <typename T>
void check_finite(const Tensor<T>& t, const char* op_name);

/// Per-thread counter of forward kernel invocations, used to verify that the
/// inference path does no more work than the baseline head.
class KernelCounter {
 public:
  static void enable();
  static void disable();
  static void reset();
  static void bump(const char* op_name);
  static std::map<std::string, std::uint64_t> snapshot();
  static std::uint64_t total();
};

}  // namespace augfpn

#endif  // AUGFPN_TENSOR_HPP
