#pragma once

// Raw little-endian float32 array files.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace excavate {

class ShapeMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void WriteFloat32File(const std::filesystem::path& path, std::span<const float> values);

// Reads exactly `expected_count` floats; any other file size is a
// ShapeMismatchError.
std::vector<float> ReadFloat32File(const std::filesystem::path& path, std::size_t expected_count);

}  // namespace excavate
