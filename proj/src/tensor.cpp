#include "tlam/tensor.hpp"

#include <cstring>
#include <sstream>

namespace tlam {

const char* dtype_name(DType dt) {
  switch (dt) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::u8: return "u8";
  }
  return "?";
}

std::size_t dims_product(const Dims& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::string dims_string(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

void Tensor::set_dims(Dims dims) {
  if (dims.empty()) throw ShapeError("tensor rank must be >= 1");
  if (dims.size() > 255) throw ShapeError("tensor rank must fit in a byte");
  for (auto d : dims) {
    if (d == 0) throw ShapeError("tensor dims must be >= 1, got " + dims_string(dims));
  }
  dims_ = std::move(dims);
}

Tensor::Tensor(Dims dims, DType dtype) {
  set_dims(std::move(dims));
  const auto n = dims_product(dims_);
  switch (dtype) {
    case DType::f32: storage_ = std::vector<float>(n, 0.0f); break;
    case DType::f64: storage_ = std::vector<double>(n, 0.0); break;
    case DType::u8: storage_ = std::vector<std::uint8_t>(n, 0); break;
  }
}

DType Tensor::dtype() const {
  return static_cast<DType>(storage_.index());
}

void Tensor::require_dtype(DType dt) const {
  if (dtype() != dt) {
    throw ShapeError(std::string("dtype mismatch: tensor is ") + dtype_name(dtype()) +
                     ", requested " + dtype_name(dt));
  }
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != dims_.size()) {
    throw ShapeError("index rank " + std::to_string(index.size()) + " != tensor rank " +
                     std::to_string(dims_.size()));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= dims_[axis]) throw ShapeError("index out of range on axis " + std::to_string(axis));
    flat = flat * dims_[axis] + i;
    ++axis;
  }
  return flat;
}

Tensor Tensor::cast(DType to) const {
  Tensor out(dims_, to);
  std::visit(
      [&](const auto& src) {
        std::visit(
            [&](auto& dst) {
              using D = typename std::decay_t<decltype(dst)>::value_type;
              for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<D>(src[i]);
            },
            out.storage_);
      },
      storage_);
  return out;
}

std::vector<double> Tensor::to_f64() const {
  std::vector<double> out;
  std::visit([&](const auto& src) { out.assign(src.begin(), src.end()); }, storage_);
  return out;
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (dtype() != other.dtype() || dims_ != other.dims_) return false;
  return std::visit(
      [&](const auto& a) {
        using V = std::decay_t<decltype(a)>;
        const auto& b = std::get<V>(other.storage_);
        return std::memcmp(a.data(), b.data(), a.size() * sizeof(typename V::value_type)) == 0;
      },
      storage_);
}

}  // namespace tlam
