#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

namespace malvit {

using Shape = std::vector<std::size_t>;

/// Element count of a shape; the empty shape denotes a scalar (one element).
std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// 64-byte aligned allocation. Vectorized kernels peel loops up to the first
/// aligned element, so a fixed alignment keeps results independent of where
/// the allocator happened to place a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct TensorStorage {
  Shape shape;
  AlignedVector<T> data;
  AlignedVector<T> grad;  // empty until a backward sweep touches it
  bool requires_grad = false;
};

/// Dense row-major n-dimensional array with shared (handle) semantics, like a
/// framework tensor: copies alias the same storage; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const noexcept { return static_cast<bool>(storage_); }
  const Shape& shape() const { return storage_->shape; }
  std::size_t dim() const { return storage_->shape.size(); }
  /// Size along `axis`; negative axes count from the back.
  std::size_t size(int axis) const;
  std::size_t numel() const { return storage_->data.size(); }

  std::span<T> data() { return storage_->data; }
  std::span<const T> data() const { return storage_->data; }
  T item() const;

  bool requires_grad() const { return storage_->requires_grad; }
  void set_requires_grad(bool value) { storage_->requires_grad = value; }

  bool has_grad() const { return !storage_->grad.empty(); }
  /// Gradient buffer, allocated (zero-filled) on first access.
  std::span<T> grad();
  /// Copy of the gradient; zeros if no backward sweep reached this tensor.
  std::vector<T> grad_values() const;
  void zero_grad();

  Tensor clone() const;
  Tensor detach() const;

  TensorStorage<T>* storage() const noexcept { return storage_.get(); }
  const std::shared_ptr<TensorStorage<T>>& storage_ptr() const noexcept { return storage_; }
  bool same_storage(const Tensor& other) const noexcept { return storage_ == other.storage_; }

 private:
  std::shared_ptr<TensorStorage<T>> storage_;
};

/// Ordered record of differentiable operations executed since construction.
///
/// Ops append an entry (kind + backward closure) when at least one input is
/// tracked. A tensor is tracked when it requires grad and has not been frozen on
/// this tape; freezing lets several tapes share an immutable parameter snapshot
/// without writing into its gradient buffers.
template <typename T>
class GradientTape {
 public:
  explicit GradientTape(bool recording = true) : recording_(recording) {}
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  bool recording() const noexcept { return recording_; }

  void freeze(const Tensor<T>& t) { frozen_.insert(t.storage()); }
  template <typename Range>
  void freeze_all(const Range& tensors) {
    for (const auto& t : tensors) freeze(t);
  }

  bool tracks(const Tensor<T>& t) const {
    return recording_ && t.defined() && t.requires_grad() && !frozen_.contains(t.storage());
  }

  void record(const char* kind, std::function<void()> backward_fn) {
    entries_.push_back({kind, std::move(backward_fn)});
  }

  std::size_t size() const noexcept { return entries_.size(); }
  std::vector<const char*> kinds() const;

  /// Single reverse sweep from a scalar loss; consumes the recorded entries.
  void backward(const Tensor<T>& loss);

 private:
  struct Entry {
    const char* kind;
    std::function<void()> backward_fn;
  };
  bool recording_;
  std::unordered_set<const TensorStorage<T>*> frozen_;
  std::vector<Entry> entries_;
};

template <typename T>
void backward(const Tensor<T>& loss, GradientTape<T>& tape) {
  tape.backward(loss);
}

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class GradientTape<float>;
extern template class GradientTape<double>;

}  // namespace malvit
