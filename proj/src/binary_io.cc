#include "excavate/binary_io.h"

#include <bit>
#include <cstring>
#include <fstream>

namespace excavate {
namespace {

std::uint32_t ToLittle(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
  return v;
}

}  // namespace

void WriteFloat32File(const std::filesystem::path& path, std::span<const float> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (float f : values) {
      const std::uint32_t le = ToLittle(std::bit_cast<std::uint32_t>(f));
      out.write(reinterpret_cast<const char*>(&le), sizeof(le));
    }
  }
  out.flush();
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<float> ReadFloat32File(const std::filesystem::path& path, std::size_t expected_count) {
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) throw MissingFileError("missing file: " + path.string());
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) throw MissingFileError("cannot stat " + path.string());
  if (size != expected_count * sizeof(float)) {
    throw ShapeMismatchError(path.string() + ": expected " + std::to_string(expected_count) +
                             " float32 values, file holds " + std::to_string(size) + " bytes");
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open " + path.string());
  std::vector<float> values(expected_count);
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(expected_count * sizeof(float)));
  if (!in) throw ShapeMismatchError("short read from " + path.string());
  if constexpr (std::endian::native == std::endian::big) {
    for (float& f : values) f = std::bit_cast<float>(ToLittle(std::bit_cast<std::uint32_t>(f)));
  }
  return values;
}

}  // namespace excavate
