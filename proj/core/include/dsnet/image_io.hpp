#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace dsnet {

/// 8-bit interleaved raster (HWC).
struct RasterImage {
  std::int64_t width = 0;
  std::int64_t height = 0;
  std::int64_t channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;
};

/// Reads a PNG, converting palette/16-bit/alpha variants to 8-bit gray or RGB.
RasterImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RasterImage& image);

}  // namespace dsnet
