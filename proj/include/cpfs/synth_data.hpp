#pragma once

// Synthetic "moving shapes" scenes: flat-colored, non-overlapping rectangles
// and disks over a background, each region translating rigidly. Ground-truth
// flow is constant per mask id, so grouping by motion equals grouping by object.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cpfs/common.hpp"
#include "cpfs/flow_io.hpp"
#include "cpfs/image.hpp"
#include "cpfs/kernel_core.hpp"

namespace cpfs {

enum class ShapeKind { Rectangle, Disk };

struct SceneConfig {
  int height = 64;
  int width = 64;
  int min_objects = 1;
  int max_objects = 3;
  std::vector<ShapeKind> shapes{ShapeKind::Rectangle, ShapeKind::Disk};
  int min_size = 14;
  int max_size = 30;
  double noise = 0.04;             // per-pixel Gaussian texture amplitude
  double min_color_distance = 0.3; // between any two region mean colors
  double flow_min = 2.0;           // object translation magnitude range, pixels
  double flow_max = 20.0;
  double background_flow_max = 1.0;
  int placement_retries = 200;

  void validate() const {
    auto fail = [](const std::string& m) { throw Error("scene config: " + m); };
    if (height <= 0 || width <= 0) fail("image size must be positive");
    if (min_objects < 0 || max_objects < min_objects || max_objects > 254) fail("object count range is invalid");
    if (max_objects > 0 && shapes.empty()) fail("no shape kinds enabled");
    if (min_size < 1 || max_size < min_size) fail("shape size range is invalid");
    if (max_objects > 0 && max_size > std::min(height, width)) fail("shapes larger than the image");
    if (noise < 0) fail("noise must be non-negative");
    if (flow_min < 0 || flow_max < flow_min || background_flow_max < 0) fail("flow ranges are invalid");
    // Largest magnitude the 16-bit codec stores without saturation.
    const double limit = decode_component(65535);
    if (flow_max > limit || background_flow_max > limit) fail("flow magnitude exceeds the codec range");
  }
};

struct Scene {
  Image image;
  FlowField flow;
  GrayImage masks;  // 0 = background, 1..k objects
  int objects = 0;
};

inline Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int h = cfg.height, w = cfg.width;
  Scene s;
  s.image = Image(h, w);
  s.flow = FlowField(w, h);
  s.masks = GrayImage(h, w);
  s.objects = rng.range(cfg.min_objects, cfg.max_objects);

  std::vector<std::array<double, 3>> colors;
  auto pick_color = [&]() {
    for (int attempt = 0; attempt < cfg.placement_retries; ++attempt) {
      std::array<double, 3> c{rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)};
      bool ok = true;
      for (const auto& o : colors) {
        const double d = std::hypot(c[0] - o[0], c[1] - o[1], c[2] - o[2]);
        ok = ok && d >= cfg.min_color_distance;
      }
      if (ok) return c;
    }
    throw Error("generate_scene: could not find " + std::to_string(colors.size() + 1) +
                " mutually distinct colors; lower min_color_distance");
  };
  auto random_translation = [&](double lo, double hi) {
    const double mag = rng.uniform(lo, hi);
    const double ang = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    return Vec2<double>{mag * std::cos(ang), mag * std::sin(ang)};
  };

  colors.push_back(pick_color());
  const Vec2<double> bg_flow = random_translation(0.0, cfg.background_flow_max);
  std::fill(s.flow.data.begin(), s.flow.data.end(), bg_flow);

  for (int id = 1; id <= s.objects; ++id) {
    bool placed = false;
    for (int attempt = 0; attempt < cfg.placement_retries && !placed; ++attempt) {
      const auto kind = cfg.shapes[rng.below(cfg.shapes.size())];
      const int sh = rng.range(cfg.min_size, cfg.max_size);
      const int sw = kind == ShapeKind::Disk ? sh : rng.range(cfg.min_size, cfg.max_size);
      const int top = rng.range(0, h - sh);
      const int left = rng.range(0, w - sw);
      const double cy = top + (sh - 1) / 2.0, cx = left + (sw - 1) / 2.0, r = sh / 2.0;
      auto inside = [&](int y, int x) {
        if (kind == ShapeKind::Rectangle) return true;
        return (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r;
      };
      bool free = true;
      for (int y = top; y < top + sh && free; ++y)
        for (int x = left; x < left + sw && free; ++x) free = !(inside(y, x) && s.masks.at(y, x) != 0);
      if (!free) continue;
      for (int y = top; y < top + sh; ++y)
        for (int x = left; x < left + sw; ++x)
          if (inside(y, x)) s.masks.at(y, x) = static_cast<std::uint8_t>(id);
      placed = true;
    }
    if (!placed)
      throw Error("generate_scene: could not place object " + std::to_string(id) + " of " +
                  std::to_string(s.objects) + " without overlap after " + std::to_string(cfg.placement_retries) +
                  " attempts");
    colors.push_back(pick_color());
    const auto f = random_translation(cfg.flow_min, cfg.flow_max);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (s.masks.at(y, x) == id) s.flow.at(y, x) = f;
  }

  // Texture, quantized to 8 bits so the in-memory image equals its PPM.
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto& c = colors[s.masks.at(y, x)];
      for (int ch = 0; ch < 3; ++ch)
        s.image.at(y, x, ch) = to_byte(c[static_cast<std::size_t>(ch)] + cfg.noise * rng.normal()) / 255.0;
    }
  }
  return s;
}

struct SceneFiles {
  std::filesystem::path image;
  std::filesystem::path flow;
  std::filesystem::path mask;
};

inline constexpr const char* kManifestName = "manifest.tsv";

/// Writes scene_%05d.{ppm,flo16,mask.pgm} and manifest.tsv; returns the manifest path.
inline std::filesystem::path generate_dataset(const SceneConfig& cfg, int count, std::uint64_t seed,
                                              const std::filesystem::path& out_dir) {
  if (count < 1) throw Error("count must be >= 1");
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error("cannot create directory " + out_dir.string() + ": " + ec.message());
  std::ostringstream manifest;
  for (int i = 0; i < count; ++i) {
    const Scene s = generate_scene(cfg, mix_seed(seed, static_cast<std::uint64_t>(i)));
    char stem[32];
    std::snprintf(stem, sizeof stem, "scene_%05d", i);
    const std::string img = std::string(stem) + ".ppm";
    const std::string flo = std::string(stem) + ".flo16";
    const std::string msk = std::string(stem) + ".mask.pgm";
    write_ppm(s.image, out_dir / img);
    write_flow_file(encode_flow(s.flow), out_dir / flo);
    write_pgm(s.masks, out_dir / msk);
    manifest << img << '\t' << flo << '\t' << msk << '\n';
  }
  const auto path = out_dir / kManifestName;
  const std::string text = manifest.str();
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return path;
}

/// Manifest entries resolved relative to the manifest's directory.
inline std::vector<SceneFiles> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<SceneFiles> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> parts;
    std::stringstream ss(line);
    std::string part;
    while (std::getline(ss, part, '\t')) parts.push_back(part);
    if (parts.size() != 3)
      throw Error(path.string() + ":" + std::to_string(lineno) + ": expected 3 tab-separated paths");
    out.push_back({base / parts[0], base / parts[1], base / parts[2]});
  }
  return out;
}

inline Scene load_scene(const SceneFiles& files) {
  Scene s;
  s.image = read_ppm(files.image);
  s.flow = decode_flow(read_flow_file(files.flow));
  s.masks = read_pgm(files.mask);
  if (s.flow.width != s.image.width || s.flow.height != s.image.height || s.masks.width != s.image.width ||
      s.masks.height != s.image.height)
    throw Error("scene files disagree on dimensions: " + files.image.string());
  int mx = 0;
  for (auto v : s.masks.values) mx = std::max(mx, static_cast<int>(v));
  s.objects = mx;
  return s;
}

inline std::vector<int> mask_ids(const GrayImage& masks, std::span<const PixelCoord> coords) {
  std::vector<int> ids;
  ids.reserve(coords.size());
  for (const auto& p : coords) ids.push_back(masks.at(p.row, p.col));
  return ids;
}

/// Mean cosine similarity over same-id pairs minus mean over different-id pairs.
/// Rows with (near) zero norm count as cosine 0 against everything.
inline double grouping_margin(const Matrix<double>& features, std::span<const int> ids) {
  const std::size_t n = features.rows(), d = features.cols();
  if (ids.size() != n) throw Error("grouping_margin: one id per feature row required");
  Matrix<double> u = features;
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0;
    for (double v : u.row(i)) sq += v * v;
    const double norm = std::sqrt(sq);
    for (double& v : u.row(i)) v = norm >= kMinEmbeddingNorm ? v / norm : 0.0;
  }
  // Pair sums via per-id vector sums: sum_{p<q} u_p.u_q = (|sum u|^2 - sum |u|^2) / 2.
  std::vector<int> distinct(ids.begin(), ids.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 2) throw Error("grouping_margin: samples cover fewer than 2 distinct ids");

  std::vector<double> all(d, 0.0);
  double self_all = 0;
  double same_sum = 0, same_pairs = 0;
  for (int id : distinct) {
    std::vector<double> acc(d, 0.0);
    double self = 0, count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (ids[i] != id) continue;
      for (std::size_t j = 0; j < d; ++j) acc[j] += u(i, j);
      for (std::size_t j = 0; j < d; ++j) self += u(i, j) * u(i, j);
      count += 1;
    }
    double sq = 0;
    for (std::size_t j = 0; j < d; ++j) {
      sq += acc[j] * acc[j];
      all[j] += acc[j];
    }
    same_sum += (sq - self) / 2;
    same_pairs += count * (count - 1) / 2;
    self_all += self;
  }
  if (same_pairs == 0) throw Error("grouping_margin: no two samples share an id");
  double sq_all = 0;
  for (double v : all) sq_all += v * v;
  const double total_pairs = static_cast<double>(n) * static_cast<double>(n - 1) / 2;
  const double diff_sum = (sq_all - self_all) / 2 - same_sum;
  const double diff_pairs = total_pairs - same_pairs;
  return same_sum / same_pairs - diff_sum / diff_pairs;
}

}  // namespace cpfs
