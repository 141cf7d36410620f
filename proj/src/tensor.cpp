#include "augfpn/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace augfpn {

std::int64_t shape_numel(const std::vector<std::int64_t>& dims) {
  std::int64_t n = 1;
  for (std::int64_t d : dims) n *= d;
  return n;
}

std::string shape_string(const std::vector<std::int64_t>& dims) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ",";
    os << dims[i];
  }
  os << "]";
  return os.str();
}

namespace {

void validate_dims(const std::vector<std::int64_t>& dims) {
  if (dims.empty()) throw ShapeError("tensor must have at least one dimension");
  for (std::int64_t d : dims) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(dims));
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(std::vector<std::int64_t> d, bool req_grad)
    : dims(std::move(d)), requires_grad(req_grad) {
  validate_dims(dims);
  data.assign(static_cast<std::size_t>(shape_numel(dims)), T(0));
  if (requires_grad) grad.assign(data.size(), T(0));
}

template <typename T>
Tensor<T>::Tensor(std::vector<std::int64_t> d, std::vector<T> values, bool req_grad)
    : dims(std::move(d)), data(std::move(values)), requires_grad(req_grad) {
  validate_dims(dims);
  if (static_cast<std::int64_t>(data.size()) != shape_numel(dims)) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_string(dims));
  }
  if (requires_grad) grad.assign(data.size(), T(0));
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(grad.begin(), grad.end(), T(0));
}

template <typename T>
void Tensor<T>::accumulate_grad(const T* g, std::int64_t n) {
  if (!requires_grad) return;
  if (n != numel()) throw ShapeError("gradient size mismatch");
  T* dst = grad.data();
  for (std::int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

template <typename T>
TensorPtr<T> make_tensor(std::vector<std::int64_t> dims, bool requires_grad) {
  return std::make_shared<Tensor<T>>(std::move(dims), requires_grad);
}

template <typename T>
TensorPtr<T> make_tensor(std::vector<std::int64_t> dims, std::vector<T> values,
                         bool requires_grad) {
  return std::make_shared<Tensor<T>>(std::move(dims), std::move(values), requires_grad);
}

template <typename T>
TensorPtr<T> full(std::vector<std::int64_t> dims, T value, bool requires_grad) {
  auto t = make_tensor<T>(std::move(dims), requires_grad);
  std::fill(t->data.begin(), t->data.end(), value);
  return t;
}

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.dims == b.dims;
}

template <typename T>
void backward(Tape<T>& tape, const TensorPtr<T>& root) {
  if (!root) throw UsageError("backward: null root");
  if (root->numel() != 1) {
    throw UsageError("backward: root must be scalar, got " + shape_string(root->dims));
  }
  for (const auto& out : tape.outputs_) {
    if (out->requires_grad) out->zero_grad();
  }
  if (root->requires_grad) root->grad[0] += T(1);
  for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) (*it)();
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.data) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

namespace {
std::atomic<bool> g_finite_checks{false};
}

void set_finite_checks(bool on) { g_finite_checks.store(on); }
bool finite_checks_enabled() { return g_finite_checks.load(std::memory_order_relaxed); }

template <typename T>
void check_finite(const Tensor<T>& t, const char* op_name) {
  if (!finite_checks_enabled()) return;
  if (!all_finite(t)) {
    throw UsageError(std::string(op_name) + ": non-finite value in output");
  }
}

namespace {
thread_local bool g_counting = false;
thread_local std::map<std::string, std::uint64_t> g_counts;
}

void KernelCounter::enable() { g_counting = true; }
void KernelCounter::disable() { g_counting = false; }
void KernelCounter::reset() { g_counts.clear(); }
void KernelCounter::bump(const char* op_name) {
  if (g_counting) ++g_counts[op_name];
}
std::map<std::string, std::uint64_t> KernelCounter::snapshot() { return g_counts; }
std::uint64_t KernelCounter::total() {
  std::uint64_t n = 0;
  for (const auto& kv : g_counts) n += kv.second;
  return n;
}

template struct Tensor<float>;
template struct Tensor<double>;
template TensorPtr<float> make_tensor<float>(std::vector<std::int64_t>, bool);
template TensorPtr<double> make_tensor<double>(std::vector<std::int64_t>, bool);
template TensorPtr<float> make_tensor<float>(std::vector<std::int64_t>, std::vector<float>, bool);
template TensorPtr<double> make_tensor<double>(std::vector<std::int64_t>, std::vector<double>, bool);
template TensorPtr<float> full<float>(std::vector<std::int64_t>, float, bool);
template TensorPtr<double> full<double>(std::vector<std::int64_t>, double, bool);
template bool same_shape<float>(const Tensor<float>&, const Tensor<float>&);
template bool same_shape<double>(const Tensor<double>&, const Tensor<double>&);
template void backward<float>(Tape<float>&, const TensorPtr<float>&);
template void backward<double>(Tape<double>&, const TensorPtr<double>&);
template bool all_finite<float>(const Tensor<float>&);
template bool all_finite<double>(const Tensor<double>&);
template void check_finite<float>(const Tensor<float>&, const char*);
template void check_finite<double>(const Tensor<double>&, const char*);

}  // namespace augfpn
