#pragma once

#include <cstddef>
#include <cstdint>
#include <new>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace rdc {

#ifdef RDC_REAL_DOUBLE
using real = double;
#else
using real = float;
#endif

using Shape = std::vector<std::int64_t>;

// 64-byte aligned storage. Vectorised kernels peel unaligned heads
// differently, so alignment must not vary between runs.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<real, AlignedAllocator<real>>;

// Number of elements of a shape. Throws InvalidShapeError for an empty shape
// or any dimension < 1.
std::int64_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

struct UniformFill {
  std::uint64_t seed = 0;
  real low = 0;
  real high = 1;
};

struct NormalFill {
  std::uint64_t seed = 0;
  real mean = 0;
  real stddev = 1;
};

using Fill = std::variant<real, UniformFill, NormalFill>;

// Dense row-major tensor of `real`. A default-constructed tensor is the
// "null" tensor (no shape, no data); every other tensor has a valid shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, real fill = 0);
  Tensor(Shape shape, std::vector<real> data);

  static Tensor create(Shape shape, const Fill& fill);
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  bool empty() const noexcept { return shape_.empty(); }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::int64_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::int64_t size() const noexcept { return static_cast<std::int64_t>(data_.size()); }

  std::span<real> data() noexcept { return data_; }
  std::span<const real> data() const noexcept { return data_; }
  real* raw() noexcept { return data_.data(); }
  const real* raw() const noexcept { return data_.data(); }

  real& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  real operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Scalar value of a single-element tensor.
  real item() const;

  bool requires_grad() const noexcept { return requires_grad_; }
  Tensor& set_requires_grad(bool on) noexcept {
    requires_grad_ = on;
    return *this;
  }

  // Same data under a new shape with equal element count.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  bool all_finite() const noexcept;

 private:
  Shape shape_;
  Buffer data_;
  bool requires_grad_ = false;
};

// Bit-level equality of shape and payload.
bool bit_equal(const Tensor& a, const Tensor& b) noexcept;

// Element-wise sum of two equally shaped gradients.
Tensor accumulate_grad(Tensor existing, const Tensor& incoming);
void accumulate_into(Tensor& existing, const Tensor& incoming);

}  // namespace rdc
