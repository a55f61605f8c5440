#include "patronus/image_io.hpp"

#include <fstream>

#include "patronus/errors.hpp"

namespace patronus {

namespace {
void put_u32(std::ostream& os, uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}
void put_u16(std::ostream& os, uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  os.write(b, 2);
}
}  // namespace

void write_bmp(const std::string& path, int width, int height,
               const std::vector<uint8_t>& rgb) {
  if (rgb.size() != static_cast<size_t>(width) * height * 3)
    throw IoError("write_bmp: pixel buffer size mismatch");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path);

  const int row_bytes = (width * 3 + 3) & ~3;
  const uint32_t data_size = static_cast<uint32_t>(row_bytes) * height;
  const uint32_t file_size = 54 + data_size;

  os.write("BM", 2);
  put_u32(os, file_size);
  put_u32(os, 0);
  put_u32(os, 54);
  put_u32(os, 40);
  put_u32(os, static_cast<uint32_t>(width));
  put_u32(os, static_cast<uint32_t>(height));
  put_u16(os, 1);
  put_u16(os, 24);
  put_u32(os, 0);
  put_u32(os, data_size);
  put_u32(os, 2835);
  put_u32(os, 2835);
  put_u32(os, 0);
  put_u32(os, 0);

  std::vector<char> row(static_cast<size_t>(row_bytes), 0);
  for (int y = height - 1; y >= 0; --y) {  // BMP rows are bottom-up
    for (int x = 0; x < width; ++x) {
      const size_t src = (static_cast<size_t>(y) * width + x) * 3;
      row[static_cast<size_t>(x) * 3 + 0] = static_cast<char>(rgb[src + 2]);  // B
      row[static_cast<size_t>(x) * 3 + 1] = static_cast<char>(rgb[src + 1]);  // G
      row[static_cast<size_t>(x) * 3 + 2] = static_cast<char>(rgb[src + 0]);  // R
    }
    os.write(row.data(), row_bytes);
  }
  if (!os) throw IoError("write failure: " + path);
}

}  // namespace patronus
