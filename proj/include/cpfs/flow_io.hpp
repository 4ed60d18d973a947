#pragma once

// Optical-flow fields: log normalization, 16-bit fixed-point codec,
// per-axis discretization and the `.flo16` container.
//
// .flo16 layout (all little-endian, no padding, no checksum):
//   bytes 0-3   "CPF1"
//   bytes 4-7   width  (u32)
//   bytes 8-11  height (u32)
//   then width*height*2 u16 codes, row-major, x-component first.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "cpfs/common.hpp"

namespace cpfs {

inline constexpr double kDefaultFlowBound = 56.0;
inline constexpr int kFlowBins = 16;
inline constexpr double kFixedPointScale = 64.0;
inline constexpr std::uint16_t kFixedPointOffset = 32768;

struct FlowField {
  int width = 0;
  int height = 0;
  std::vector<Vec2<double>> data;  // row-major, pixel units

  FlowField() = default;
  FlowField(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, {0.0, 0.0}) {}
  FlowField(int w, int h, std::vector<Vec2<double>> values) : width(w), height(h), data(std::move(values)) {
    if (w < 0 || h < 0 || data.size() != static_cast<std::size_t>(w) * h)
      throw Error("flow field: data length does not match width*height");
  }

  Vec2<double>& at(int row, int col) { return data[static_cast<std::size_t>(row) * width + col]; }
  const Vec2<double>& at(int row, int col) const { return data[static_cast<std::size_t>(row) * width + col]; }
};

struct NormalizedFlowField {
  int width = 0;
  int height = 0;
  std::vector<Vec2<double>> data;  // each component in [-1, 1]
  double bound = kDefaultFlowBound;

  const Vec2<double>& at(int row, int col) const { return data[static_cast<std::size_t>(row) * width + col]; }
};

struct EncodedFlowImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint16_t> codes;  // 2 per pixel, x first

  friend bool operator==(const EncodedFlowImage&, const EncodedFlowImage&) = default;
};

struct FlowClassField {
  int width = 0;
  int height = 0;
  std::vector<std::array<int, 2>> classes;  // per-axis bins in [0, 15]

  const std::array<int, 2>& at(int row, int col) const {
    return classes[static_cast<std::size_t>(row) * width + col];
  }
};

/// Logarithmic squashing of one flow component to [-1, 1].
/// Odd by construction: the magnitude is mapped first, the sign reapplied.
inline double normalize_component(double f, double bound) {
  const double mag = std::min(1.0, std::log1p(std::fabs(f)) / std::log1p(bound));
  return f < 0.0 ? -mag : (f > 0.0 ? mag : 0.0);
}

inline NormalizedFlowField normalize_flow(const FlowField& flow, double bound = kDefaultFlowBound) {
  if (!(bound > 0.0) || !std::isfinite(bound)) throw Error("normalize_flow: bound M must be positive and finite");
  NormalizedFlowField out;
  out.width = flow.width;
  out.height = flow.height;
  out.bound = bound;
  out.data.resize(flow.data.size());
  for (std::size_t i = 0; i < flow.data.size(); ++i) {
    const auto& f = flow.data[i];
    if (!std::isfinite(f[0]) || !std::isfinite(f[1])) {
      const auto w = static_cast<std::size_t>(std::max(flow.width, 1));
      std::ostringstream msg;
      msg << "normalize_flow: non-finite flow at pixel (row " << i / w << ", col " << i % w << ")";
      throw Error(msg.str());
    }
    out.data[i] = {normalize_component(f[0], bound), normalize_component(f[1], bound)};
  }
  return out;
}

inline std::uint16_t encode_component(double f, bool* saturated = nullptr) {
  const double scaled = std::round(f * kFixedPointScale) + kFixedPointOffset;
  if (scaled < 0.0 || scaled > 65535.0 || !std::isfinite(scaled)) {
    if (saturated) *saturated = true;
    return scaled < 0.0 || std::isnan(scaled) ? 0 : 65535;
  }
  return static_cast<std::uint16_t>(scaled);
}

inline double decode_component(std::uint16_t code) {
  return (static_cast<double>(code) - kFixedPointOffset) / kFixedPointScale;
}

/// KITTI-style fixed point: code = round(64 f) + 32768, saturating.
/// The number of saturated components is written to `saturated_count` if given.
inline EncodedFlowImage encode_flow(const FlowField& flow, std::size_t* saturated_count = nullptr) {
  EncodedFlowImage img;
  img.width = flow.width;
  img.height = flow.height;
  img.codes.reserve(flow.data.size() * 2);
  std::size_t saturated = 0;
  for (const auto& f : flow.data) {
    for (double c : f) {
      bool sat = false;
      img.codes.push_back(encode_component(c, &sat));
      saturated += sat ? 1 : 0;
    }
  }
  if (saturated_count) *saturated_count = saturated;
  return img;
}

inline FlowField decode_flow(const EncodedFlowImage& img) {
  if (img.width < 0 || img.height < 0 ||
      img.codes.size() != 2 * static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height))
    throw Error("decode_flow: dimension mismatch between header and payload");
  std::vector<Vec2<double>> data(img.codes.size() / 2);
  for (std::size_t i = 0; i < data.size(); ++i)
    data[i] = {decode_component(img.codes[2 * i]), decode_component(img.codes[2 * i + 1])};
  return FlowField(img.width, img.height, std::move(data));
}

/// 16 uniform bins over [-1, 1]; v = 1 lands in the last bin.
inline int flow_bin(double v) {
  if (!(v >= -1.0 && v <= 1.0)) throw Error("discretize_flow: component outside [-1, 1]");
  const int bin = static_cast<int>(std::floor((v + 1.0) / 2.0 * kFlowBins));
  return std::min(bin, kFlowBins - 1);
}

inline FlowClassField discretize_flow(const NormalizedFlowField& nf) {
  FlowClassField out;
  out.width = nf.width;
  out.height = nf.height;
  out.classes.reserve(nf.data.size());
  for (const auto& v : nf.data) out.classes.push_back({flow_bin(v[0]), flow_bin(v[1])});
  return out;
}

class FlowFileError : public Error {
 public:
  enum class Kind { Io, BadMagic, Truncated, DimensionOverflow, TrailingData };

  FlowFileError(Kind kind, const std::string& msg) : Error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr char kFlowMagic[4] = {'C', 'P', 'F', '1'};
// Keeps the payload size computation far from size_t overflow.
inline constexpr std::uint64_t kMaxFlowPixels = std::uint64_t{1} << 30;

inline std::vector<std::uint8_t> serialize_flow(const EncodedFlowImage& img) {
  std::vector<std::uint8_t> bytes(kFlowMagic, kFlowMagic + 4);
  le::put_u32(bytes, static_cast<std::uint32_t>(img.width));
  le::put_u32(bytes, static_cast<std::uint32_t>(img.height));
  bytes.reserve(bytes.size() + img.codes.size() * 2);
  for (auto c : img.codes) le::put_u16(bytes, c);
  return bytes;
}

inline EncodedFlowImage parse_flow(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>") {
  using K = FlowFileError::Kind;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kFlowMagic, 4) != 0)
    throw FlowFileError(K::BadMagic, "bad magic in " + origin);
  if (bytes.size() < 12) throw FlowFileError(K::Truncated, "truncated header in " + origin);
  const std::uint64_t w = le::get_u32(bytes.data() + 4);
  const std::uint64_t h = le::get_u32(bytes.data() + 8);
  if (w > static_cast<std::uint64_t>(std::numeric_limits<int>::max()) ||
      h > static_cast<std::uint64_t>(std::numeric_limits<int>::max()) || w * h > kMaxFlowPixels)
    throw FlowFileError(K::DimensionOverflow, "dimension overflow in " + origin);
  const std::uint64_t payload = w * h * 4;
  if (bytes.size() - 12 < payload) throw FlowFileError(K::Truncated, "truncated payload in " + origin);
  if (bytes.size() - 12 > payload) throw FlowFileError(K::TrailingData, "trailing bytes after payload in " + origin);
  EncodedFlowImage img;
  img.width = static_cast<int>(w);
  img.height = static_cast<int>(h);
  img.codes.resize(w * h * 2);
  for (std::size_t i = 0; i < img.codes.size(); ++i) img.codes[i] = le::get_u16(bytes.data() + 12 + 2 * i);
  return img;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

inline void write_flow_file(const EncodedFlowImage& img, const std::filesystem::path& path) {
  try {
    write_file_bytes(path, serialize_flow(img));
  } catch (const FlowFileError&) {
    throw;
  } catch (const Error& e) {
    throw FlowFileError(FlowFileError::Kind::Io, e.what());
  }
}

inline EncodedFlowImage read_flow_file(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const Error& e) {
    throw FlowFileError(FlowFileError::Kind::Io, e.what());
  }
  return parse_flow(bytes, path.string());
}

}  // namespace cpfs
