#include "malvit/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "malvit/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace malvit {

namespace {

// Activations are large, short-lived buffers. Keeping them on the heap instead
// of fresh mmap regions avoids a page fault storm on every forward pass.
#if defined(__GLIBC__)
const bool allocator_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
  return true;
}();
#endif

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill, bool requires_grad)
    : storage_(std::make_shared<TensorStorage<T>>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  storage_->data.assign(shape_numel(shape), fill);
  storage_->shape = std::move(shape);
  storage_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : storage_(std::make_shared<TensorStorage<T>>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  storage_->shape = std::move(shape);
  storage_->data.assign(values.begin(), values.end());
  storage_->requires_grad = requires_grad;
}

template <typename T>
std::size_t Tensor<T>::size(int axis) const {
  const int rank = static_cast<int>(dim());
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape()));
  }
  return storage_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
  return storage_->data[0];
}

template <typename T>
std::span<T> Tensor<T>::grad() {
  if (storage_->grad.empty()) storage_->grad.assign(storage_->data.size(), T(0));
  return storage_->grad;
}

template <typename T>
std::vector<T> Tensor<T>::grad_values() const {
  if (storage_->grad.empty()) return std::vector<T>(storage_->data.size(), T(0));
  return {storage_->grad.begin(), storage_->grad.end()};
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(storage_->grad.begin(), storage_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out;
  out.storage_ = std::make_shared<TensorStorage<T>>(*storage_);
  out.storage_->grad.clear();
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  Tensor out;
  out.storage_ = std::make_shared<TensorStorage<T>>();
  out.storage_->shape = storage_->shape;
  out.storage_->data = storage_->data;
  return out;
}

template <typename T>
std::vector<const char*> GradientTape<T>::kinds() const {
  std::vector<const char*> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.kind);
  return out;
}

template <typename T>
void GradientTape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!tracks(loss)) return;  // nothing differentiable produced the loss
  Tensor<T> l = loss;
  l.grad()[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward_fn();
  entries_.clear();
}

template class Tensor<float>;
template class Tensor<double>;
template class GradientTape<float>;
template class GradientTape<double>;

}  // namespace malvit
