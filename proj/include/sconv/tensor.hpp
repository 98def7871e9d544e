#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "sconv/error.hpp"

namespace sconv {

using Shape = std::vector<std::size_t>;

// 64-byte alignment keeps vectorized kernels on the same code path (and
// summation order) regardless of where the heap places a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major array. Element type is float (benchmarks) or double
// (gradient tests); int32 is used for label maps.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, const std::vector<T>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (data_.size() != shape_numel(shape_)) {
      fail(ErrorKind::dimension,
           "tensor data length " + std::to_string(data_.size()) +
               " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Row-major multi-index access, unchecked.
  template <typename... I>
  T& operator()(I... idx) {
    return data_[offset(idx...)];
  }
  template <typename... I>
  const T& operator()(I... idx) const {
    return data_[offset(idx...)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      fail(ErrorKind::dimension, "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::copy(data_.begin(), data_.end(), out.data());
    return out;
  }

  bool operator==(const Tensor& other) const = default;

 private:
  template <typename... I>
  std::size_t offset(I... idx) const {
    const std::size_t ix[] = {static_cast<std::size_t>(idx)...};
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizeof...(I); ++k) off = off * shape_[k] + ix[k];
    return off;
  }

  Shape shape_;
  std::vector<T, AlignedAllocator<T>> data_;
};

using LabelMap = Tensor<std::int32_t>;

// Throws a numeric error naming `where` if any element is NaN or infinite.
template <typename T>
void check_finite(const Tensor<T>& t, const char* where);

template <typename T>
void check_shape(const Tensor<T>& t, const Shape& expected, const char* what);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

// SCT1 binary format: magic "SCT1", u8 dtype (0=f32, 1=f64), u8 rank,
// u32 dims[rank], raw little-endian data.
template <typename T>
void save_tensor(const Tensor<T>& t, const std::filesystem::path& path);

// Loads any SCT1 file and converts the payload to T.
template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_tensor_bytes(const Tensor<float>& t);
std::vector<std::uint8_t> encode_tensor_bytes(const Tensor<double>& t);

}  // namespace sconv
