#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace susan {

/// Shape of a 4-D array in (batch, channel, height, width) order.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  [[nodiscard]] std::size_t numel() const { return n * c * h * w; }
  [[nodiscard]] std::size_t plane() const { return h * w; }
  [[nodiscard]] std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 64-byte aligned storage. Vectorized reductions peel by address alignment, so equal
/// data must always sit at equally aligned addresses for results to be bitwise repeatable.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major (N outermost, W innermost) tensor.
template <typename T>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() = default;
  explicit Tensor4(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor4(Shape shape, const std::vector<T>& data) : Tensor4(shape, AlignedVector<T>(data.begin(), data.end())) {}
  Tensor4(Shape shape, AlignedVector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  [[nodiscard]] std::span<T> values() { return data_; }
  [[nodiscard]] std::span<const T> values() const { return data_; }
  [[nodiscard]] T* data() { return data_.data(); }
  [[nodiscard]] const T* data() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  [[nodiscard]] std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) { return data_[offset(n, c, h, w)]; }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[offset(n, c, h, w)];
  }

  /// Pointer to the H*W plane of sample n, channel c.
  T* plane(std::size_t n, std::size_t c) { return data_.data() + (n * shape_.c + c) * shape_.plane(); }
  const T* plane(std::size_t n, std::size_t c) const {
    return data_.data() + (n * shape_.c + c) * shape_.plane();
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  [[nodiscard]] Tensor4<U> cast() const {
    AlignedVector<U> out(data_.begin(), data_.end());
    return Tensor4<U>(shape_, std::move(out));
  }

  /// Copy of samples [first, first + count) along the batch axis.
  [[nodiscard]] Tensor4 slice_batch(std::size_t first, std::size_t count) const {
    if (first + count > shape_.n) throw ShapeError("batch slice out of range for shape " + shape_.str());
    const std::size_t per = shape_.c * shape_.plane();
    Shape s = shape_;
    s.n = count;
    return Tensor4(s, AlignedVector<T>(data_.begin() + first * per, data_.begin() + (first + count) * per));
  }

  friend bool operator==(const Tensor4&, const Tensor4&) = default;

 private:
  Shape shape_{};
  AlignedVector<T> data_;
};

/// Stack single-sample tensors of identical (C,H,W) along the batch axis.
template <typename T>
Tensor4<T> stack_batch(std::span<const Tensor4<T>> items) {
  if (items.empty()) throw ShapeError("cannot stack an empty batch");
  Shape s = items.front().shape();
  AlignedVector<T> data;
  data.reserve(s.numel() * items.size());
  std::size_t n = 0;
  for (const auto& t : items) {
    const Shape& ts = t.shape();
    if (ts.c != s.c || ts.h != s.h || ts.w != s.w) {
      throw ShapeError("stack_batch: shape " + ts.str() + " differs from " + s.str());
    }
    data.insert(data.end(), t.values().begin(), t.values().end());
    n += ts.n;
  }
  s.n = n;
  return Tensor4<T>(s, std::move(data));
}

}  // namespace susan
