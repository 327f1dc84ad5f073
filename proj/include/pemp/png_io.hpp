#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace pemp {

/// 8-bit interleaved raster. channels is 1 (gray) or 3 (RGB).
struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;
};

/// Reads any PNG, converting to `channels` (1 or 3).
Raster read_png(const std::filesystem::path& path, std::size_t channels);
void write_png(const std::filesystem::path& path, const Raster& raster);

using PaletteEntry = std::array<std::uint8_t, 3>;

/// Palette PNG; `indices` holds width*height entries < palette.size().
void write_indexed_png(const std::filesystem::path& path, std::size_t width, std::size_t height,
                       const std::vector<std::uint8_t>& indices, const std::vector<PaletteEntry>& palette);

}  // namespace pemp
