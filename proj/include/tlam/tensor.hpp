#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tlam/errors.hpp"

namespace tlam {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

const char* dtype_name(DType dt);

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }
template <>
constexpr DType dtype_of<std::uint8_t>() { return DType::u8; }

using Dims = std::vector<std::size_t>;

std::size_t dims_product(const Dims& dims);
std::string dims_string(const Dims& dims);

/// Dense row-major tensor. The last dimension is innermost, so an H x W x C
/// tensor stores the C channels of one pixel contiguously.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Dims dims, DType dtype);

  template <class T>
  static Tensor from(Dims dims, std::vector<T> values) {
    Tensor t;
    t.set_dims(std::move(dims));
    if (values.size() != dims_product(t.dims_)) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match dims " + dims_string(t.dims_));
    }
    t.storage_ = std::move(values);
    return t;
  }

  template <class T>
  static Tensor from(Dims dims, std::initializer_list<T> values) {
    return from<T>(std::move(dims), std::vector<T>(values));
  }

  DType dtype() const;
  const Dims& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const { return dims_product(dims_); }
  bool empty() const { return dims_.empty(); }

  template <class T>
  std::span<T> data() {
    require_dtype(dtype_of<T>());
    return std::get<std::vector<T>>(storage_);
  }
  template <class T>
  std::span<const T> data() const {
    require_dtype(dtype_of<T>());
    return std::get<std::vector<T>>(storage_);
  }

  /// Flat row-major offset of a full multi-index.
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  template <class T>
  T& at(std::initializer_list<std::size_t> index) {
    return data<T>()[offset(index)];
  }
  template <class T>
  const T& at(std::initializer_list<std::size_t> index) const {
    return data<T>()[offset(index)];
  }

  /// Value-converting copy; the only sanctioned way to change dtype.
  Tensor cast(DType to) const;
  std::vector<double> to_f64() const;

  void require_dtype(DType dt) const;

  /// Bit-level equality: same dtype, dims and payload bytes.
  bool bit_equal(const Tensor& other) const;

 private:
  void set_dims(Dims dims);

  Dims dims_;
  std::variant<std::vector<float>, std::vector<double>, std::vector<std::uint8_t>> storage_;
};

}  // namespace tlam
