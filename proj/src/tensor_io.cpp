#include "tlam/tensor_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

namespace tlam {
namespace {

constexpr std::array<char, 4> kMagic{'T', 'L', 'T', '1'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
void put_le(std::ostream& out, T value, std::uint64_t& offset) {
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(bytes.data(), bytes.size());
  if (!out) throw IoError("write failed at byte offset " + std::to_string(offset));
  offset += sizeof(T);
}

template <class T>
T get_le(std::istream& in, std::uint64_t& offset, const char* field) {
  std::array<char, sizeof(T)> bytes;
  in.read(bytes.data(), bytes.size());
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw FormatError(std::string("truncated ") + field + " at byte offset " +
                      std::to_string(offset));
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  offset += sizeof(T);
  return value;
}

template <class T>
void write_payload(std::ostream& out, std::span<const T> values, std::uint64_t& offset) {
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
    if (!out) throw IoError("payload write failed at byte offset " + std::to_string(offset));
    offset += values.size_bytes();
  } else {
    for (auto v : values) put_le(out, v, offset);
  }
}

template <class T>
void read_payload(std::istream& in, std::span<T> values, std::uint64_t& offset) {
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  const auto got = static_cast<std::uint64_t>(in.gcount());
  if (got != values.size_bytes()) {
    throw FormatError("truncated payload: expected " + std::to_string(values.size_bytes()) +
                      " bytes at offset " + std::to_string(offset) + ", found " +
                      std::to_string(got));
  }
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    for (auto& v : values) {
      auto* p = reinterpret_cast<char*>(&v);
      std::reverse(p, p + sizeof(T));
    }
  }
  offset += got;
}

}  // namespace

std::uint64_t write_tensor(const Tensor& t, std::ostream& out) {
  if (t.empty()) throw ShapeError("cannot write an empty tensor");
  std::uint64_t offset = 0;
  out.write(kMagic.data(), kMagic.size());
  if (!out) throw IoError("write failed at byte offset 0");
  offset += kMagic.size();
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()), offset);
  for (auto d : t.dims()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw ShapeError("dim exceeds u32");
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d), offset);
  }
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype()), offset);
  switch (t.dtype()) {
    case DType::f32: write_payload(out, t.data<float>(), offset); break;
    case DType::f64: write_payload(out, t.data<double>(), offset); break;
    case DType::u8: write_payload(out, t.data<std::uint8_t>(), offset); break;
  }
  return offset;
}

Tensor read_tensor(std::istream& in) {
  std::uint64_t offset = 0;
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != 4 || magic != kMagic) throw FormatError("bad magic: expected \"TLT1\"");
  offset = 4;
  const auto rank = get_le<std::uint8_t>(in, offset, "rank");
  if (rank == 0) throw FormatError("rank must be >= 1");
  Dims dims(rank);
  for (auto& d : dims) {
    d = get_le<std::uint32_t>(in, offset, "dims");
    if (d == 0) throw FormatError("dims must be >= 1");
  }
  const auto tag = get_le<std::uint8_t>(in, offset, "dtype");
  if (tag > 2) throw FormatError("unknown dtype tag " + std::to_string(tag));
  Tensor t(dims, static_cast<DType>(tag));
  switch (t.dtype()) {
    case DType::f32: read_payload(in, t.data<float>(), offset); break;
    case DType::f64: read_payload(in, t.data<double>(), offset); break;
    case DType::u8: read_payload(in, t.data<std::uint8_t>(), offset); break;
  }
  return t;
}

std::uint64_t save_tensor(const Tensor& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  return write_tensor(t, out);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return read_tensor(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace tlam
