#pragma once

#include <zlib.h>

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "dfkd/common.hpp"

// Minimal RGB8 PNG writer (IHDR / IDAT / IEND, filter 0, zlib-compressed).
// Output bytes are a pure function of the pixels, so identical images give
// identical files.

namespace dfkd {

namespace detail {

inline void png_be32(std::vector<std::uint8_t>& v, std::uint32_t x) {
  v.push_back(static_cast<std::uint8_t>(x >> 24));
  v.push_back(static_cast<std::uint8_t>(x >> 16));
  v.push_back(static_cast<std::uint8_t>(x >> 8));
  v.push_back(static_cast<std::uint8_t>(x));
}

inline void png_chunk(std::vector<std::uint8_t>& out, const char type[4], const std::vector<std::uint8_t>& data) {
  png_be32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const std::uint32_t crc =
      static_cast<std::uint32_t>(::crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start)));
  png_be32(out, crc);
}

}  // namespace detail

// rgb: row-major, 3 bytes per pixel, length width*height*3.
inline void write_png_rgb8(const std::string& path, const std::vector<std::uint8_t>& rgb, int width, int height) {
  DFKD_CHECK(width >= 1 && height >= 1, "write_png_rgb8: empty image");
  DFKD_CHECK(rgb.size() == static_cast<std::size_t>(width) * height * 3, "write_png_rgb8: pixel buffer size");

  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(height) * (1 + static_cast<std::size_t>(width) * 3));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);  // filter: none
    const std::uint8_t* row = rgb.data() + static_cast<std::size_t>(y) * width * 3;
    raw.insert(raw.end(), row, row + static_cast<std::size_t>(width) * 3);
  }

  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> comp(comp_len);
  DFKD_REQUIRE(compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) == Z_OK,
               "write_png_rgb8: compression failed");
  comp.resize(comp_len);

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<std::uint8_t> ihdr;
  detail::png_be32(ihdr, static_cast<std::uint32_t>(width));
  detail::png_be32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // color type: truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", comp);
  detail::png_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  DFKD_REQUIRE(f.good(), "cannot open " << path << " for writing");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  DFKD_REQUIRE(f.good(), "short write to " << path);
}

}  // namespace dfkd
