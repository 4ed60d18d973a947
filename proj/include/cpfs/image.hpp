#pragma once

// RGB images in [0,1] and binary PPM (P6) / PGM (P5) I/O, 8-bit only.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cpfs/common.hpp"
#include "cpfs/flow_io.hpp"

namespace cpfs {

struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> rgb;  // H x W x 3, interleaved, values in [0,1]

  Image() = default;
  Image(int h, int w) : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, 0.0) {}

  double& at(int row, int col, int ch) { return rgb[(static_cast<std::size_t>(row) * width + col) * 3 + ch]; }
  double at(int row, int col, int ch) const { return rgb[(static_cast<std::size_t>(row) * width + col) * 3 + ch]; }
};

struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  GrayImage() = default;
  GrayImage(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int row, int col) { return values[static_cast<std::size_t>(row) * width + col]; }
  std::uint8_t at(int row, int col) const { return values[static_cast<std::size_t>(row) * width + col]; }
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

namespace detail {

inline void put_netpbm_header(std::vector<std::uint8_t>& out, const char* magic, int w, int h) {
  const std::string header = std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.insert(out.end(), header.begin(), header.end());
}

// Parses "Px <w> <h> <maxval>" plus the single whitespace byte before the raster.
inline std::size_t parse_netpbm_header(const std::vector<std::uint8_t>& bytes, const char* magic, int& w, int& h,
                                       const std::string& origin) {
  if (bytes.size() < 2 || bytes[0] != magic[0] || bytes[1] != magic[1])
    throw Error(origin + ": expected " + magic + " image");
  std::size_t pos = 2;
  auto next_int = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    long v = 0;
    std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(bytes[pos]) && pos - start < 9) v = v * 10 + (bytes[pos++] - '0');
    if (pos == start) throw Error(origin + ": malformed header");
    return v;
  };
  w = static_cast<int>(next_int());
  h = static_cast<int>(next_int());
  const long maxval = next_int();
  if (maxval != 255) throw Error(origin + ": only 8-bit images are supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw Error(origin + ": malformed header");
  return pos + 1;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
  std::vector<std::uint8_t> out;
  detail::put_netpbm_header(out, "P6", img.width, img.height);
  for (double v : img.rgb) out.push_back(to_byte(v));
  return out;
}

inline void write_ppm(const Image& img, const std::filesystem::path& path) { write_file_bytes(path, encode_ppm(img)); }

inline Image read_ppm(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  int w = 0, h = 0;
  const std::size_t start = detail::parse_netpbm_header(bytes, "P6", w, h, path.string());
  const std::size_t count = static_cast<std::size_t>(w) * h * 3;
  if (bytes.size() - start < count) throw Error(path.string() + ": truncated raster");
  Image img(h, w);
  for (std::size_t i = 0; i < count; ++i) img.rgb[i] = bytes[start + i] / 255.0;
  return img;
}

inline std::vector<std::uint8_t> encode_pgm(const GrayImage& img) {
  std::vector<std::uint8_t> out;
  detail::put_netpbm_header(out, "P5", img.width, img.height);
  out.insert(out.end(), img.values.begin(), img.values.end());
  return out;
}

inline void write_pgm(const GrayImage& img, const std::filesystem::path& path) {
  write_file_bytes(path, encode_pgm(img));
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  int w = 0, h = 0;
  const std::size_t start = detail::parse_netpbm_header(bytes, "P5", w, h, path.string());
  const std::size_t count = static_cast<std::size_t>(w) * h;
  if (bytes.size() - start < count) throw Error(path.string() + ": truncated raster");
  GrayImage img(h, w);
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(start), count, img.values.begin());
  return img;
}

}  // namespace cpfs
