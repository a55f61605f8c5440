#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace patronus {

// 24-bit uncompressed BMP (lossless). rgb is row-major top-down, 3 bytes per
// pixel.
void write_bmp(const std::string& path, int width, int height,
               const std::vector<uint8_t>& rgb);

}  // namespace patronus
