#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "abm/error.hpp"

namespace abm::num {

using Shape = std::vector<std::size_t>;

// 64-byte aligned storage keeps vectorized kernels on the same code path for
// every allocation, so results are bit-reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

enum class DType { f32, f64 };

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape);

template <typename Real>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<Real, float> || std::is_same_v<Real, double>);
  return std::is_same_v<Real, float> ? DType::f32 : DType::f64;
}

// Dense row-major array with an optional gradient buffer of the same length.
template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_shape();
  }

  Tensor(Shape shape, std::vector<Real> data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_shape();
    if (data_.size() != shape_size(shape_)) {
      fail(ErrorCode::shape, "tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(Real value) { return Tensor(Shape{1}, std::vector<Real>{value}); }

  static constexpr DType dtype() { return dtype_of<Real>(); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<Real> data() noexcept { return data_; }
  std::span<const Real> data() const noexcept { return data_; }
  Real* raw() noexcept { return data_.data(); }
  const Real* raw() const noexcept { return data_.data(); }

  Real& operator[](std::size_t i) { return data_[i]; }
  const Real& operator[](std::size_t i) const { return data_[i]; }

  bool has_grad() const noexcept { return grad_.has_value(); }

  // Allocates a zeroed gradient if none exists.
  std::span<Real> ensure_grad() {
    if (!grad_) grad_.emplace(data_.size(), Real(0));
    return *grad_;
  }
  std::span<Real> grad() {
    if (!grad_) fail(ErrorCode::state, "tensor has no gradient");
    return *grad_;
  }
  std::span<const Real> grad() const {
    if (!grad_) fail(ErrorCode::state, "tensor has no gradient");
    return *grad_;
  }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), Real(0));
  }
  void drop_grad() { grad_.reset(); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](Real v) { return std::isfinite(v); });
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, std::vector<Other>(data_.begin(), data_.end()));
  }

 private:
  void check_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) fail(ErrorCode::shape, "tensor dimensions must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  AlignedVector<Real> data_;
  std::optional<AlignedVector<Real>> grad_;
};

}  // namespace abm::num
