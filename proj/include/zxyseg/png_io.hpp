#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace zxyseg {

// Minimal RGB8 PNG writer (zlib-deflated, filter 0). rgb is row-major,
// 3 bytes per pixel.
void write_png_rgb(const std::filesystem::path& path, int width, int height,
                   const std::vector<std::uint8_t>& rgb);

}  // namespace zxyseg
