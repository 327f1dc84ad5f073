#include "pemp/png_io.hpp"

#include <png.h>

#include <cstring>

#include "pemp/tensor.hpp"

namespace pemp {

Raster read_png(const std::filesystem::path& path, std::size_t channels) {
  if (channels != 1 && channels != 3) throw IoError("read_png: channels must be 1 or 3");
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("unreadable PNG " + path.string() + ": " + image.message);
  }
  image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Raster r;
  r.width = image.width;
  r.height = image.height;
  r.channels = channels;
  r.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, r.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("unreadable PNG " + path.string() + ": " + image.message);
  }
  return r;
}

void write_png(const std::filesystem::path& path, const Raster& raster) {
  if (raster.channels != 1 && raster.channels != 3) throw IoError("write_png: channels must be 1 or 3");
  if (raster.pixels.size() != raster.width * raster.height * raster.channels) {
    throw IoError("write_png: pixel buffer size mismatch");
  }
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(raster.width);
  image.height = static_cast<png_uint_32>(raster.height);
  image.format = raster.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, raster.pixels.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

void write_indexed_png(const std::filesystem::path& path, std::size_t width, std::size_t height,
                       const std::vector<std::uint8_t>& indices, const std::vector<PaletteEntry>& palette) {
  if (indices.size() != width * height) throw IoError("write_indexed_png: index buffer size mismatch");
  if (palette.empty() || palette.size() > 256) throw IoError("write_indexed_png: palette size");
  for (auto i : indices) {
    if (i >= palette.size()) throw IoError("write_indexed_png: index outside palette");
  }
  std::vector<std::uint8_t> colormap;
  for (const auto& e : palette) colormap.insert(colormap.end(), e.begin(), e.end());
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = PNG_FORMAT_RGB_COLORMAP;
  image.colormap_entries = static_cast<png_uint_32>(palette.size());
  if (!png_image_write_to_file(&image, path.c_str(), 0, indices.data(), 0, colormap.data())) {
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

}  // namespace pemp
