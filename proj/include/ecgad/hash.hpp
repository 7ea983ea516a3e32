#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace ecgad {

// 64-bit FNV-1a, chainable through `seed`.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t hash_file(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

// Stable child seed for a named stage (splitmix64 finalizer over the
// master seed mixed with the stage-name hash).
std::uint64_t derive_seed(std::uint64_t master, std::string_view stage);

}  // namespace ecgad
