#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "tlam/tensor.hpp"

namespace tlam {

// TLT1 layout: "TLT1", u8 rank, rank x u32 LE dims, u8 dtype tag, LE payload.

std::uint64_t write_tensor(const Tensor& t, std::ostream& out);
Tensor read_tensor(std::istream& in);

std::uint64_t save_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace tlam
