#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ecgad/tensor.hpp"

namespace ecgad::npy {

// Parse a version 1.x/2.x/3.x .npy container holding little-endian f4 or f8
// data. Fortran-ordered arrays are returned in row-major order.
Tensor parse(std::span<const std::uint8_t> bytes);
Tensor load(const std::filesystem::path& path);

// Serialize as '<f4', C order.
std::vector<std::uint8_t> serialize(const Tensor& t);
void save(const std::filesystem::path& path, const Tensor& t);

}  // namespace ecgad::npy
