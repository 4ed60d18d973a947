#pragma once

// Desk-scale embedding network.
//
//   image (H x W x 3)
//     -> [conv3x3 -> relu -> maxpool2] x 3     levels at strides 2, 4, 8 (8/16/32 ch)
//     -> sparse hypercolumns: bilinear sample of every level at the chosen pixels
//     -> head: either the embedding MLP (56 -> 64 -> relu -> 16 -> L2 normalize)
//              or the flow classifier (two 16-way linear maps, x and y)
//
// Everything is in double so the finite-difference checks run end to end in
// 64-bit arithmetic.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cpfs/common.hpp"
#include "cpfs/flow_io.hpp"
#include "cpfs/image.hpp"
#include "cpfs/kernel_core.hpp"

namespace cpfs {

inline constexpr int kBackboneBlocks = 3;

struct ArchConfig {
  std::array<int, kBackboneBlocks> channels{8, 16, 32};
  int hidden = 64;
  int embed_dim = 16;
  int bins = kFlowBins;

  int hypercolumn_dim() const { return std::accumulate(channels.begin(), channels.end(), 0); }
};

enum class HeadKind { Embedding, FlowClassifier };

struct Tensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Named parameter tensors of backbone + head (+ kernel bandwidth rho for the
/// embedding head). Gradients use the same container.
struct ModelParams {
  std::vector<Tensor> tensors;

  Tensor* find(std::string_view name) {
    for (auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  const Tensor* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  Tensor& get(std::string_view name) {
    if (auto* t = find(name)) return *t;
    throw Error("model has no parameter '" + std::string(name) + "'");
  }
  const Tensor& get(std::string_view name) const {
    if (const auto* t = find(name)) return *t;
    throw Error("model has no parameter '" + std::string(name) + "'");
  }

  HeadKind head() const { return find("head.fc1.weight") ? HeadKind::Embedding : HeadKind::FlowClassifier; }

  KernelParams<double> kernel() const { return {get("kernel.rho")[0]}; }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  ArchConfig arch() const {
    ArchConfig a;
    for (int b = 0; b < kBackboneBlocks; ++b) a.channels[b] = static_cast<int>(get(conv_weight(b)).dims[0]);
    if (head() == HeadKind::Embedding) {
      a.hidden = static_cast<int>(get("head.fc1.weight").dims[0]);
      a.embed_dim = static_cast<int>(get("head.fc2.weight").dims[0]);
    } else {
      a.bins = static_cast<int>(get("cls.x.weight").dims[0]);
    }
    return a;
  }

  ModelParams zeros_like() const {
    ModelParams z = *this;
    for (auto& t : z.tensors) std::fill(t.values.begin(), t.values.end(), 0.0);
    return z;
  }

  static std::string conv_weight(int block) { return "conv" + std::to_string(block + 1) + ".weight"; }
  static std::string conv_bias(int block) { return "conv" + std::to_string(block + 1) + ".bias"; }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

namespace detail {

inline Tensor make_tensor(std::string name, std::vector<std::uint32_t> dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return {std::move(name), std::move(dims), std::vector<double>(n, 0.0)};
}

inline void glorot_fill(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.values) v = rng.uniform(-a, a);
}

}  // namespace detail

/// Glorot-uniform weights, zero biases, sigma^2 = 0.25.
inline ModelParams init_params(const ArchConfig& arch, HeadKind head, std::uint64_t seed) {
  Rng rng(seed);
  ModelParams p;
  std::uint32_t cin = 3;
  for (int b = 0; b < kBackboneBlocks; ++b) {
    const auto cout = static_cast<std::uint32_t>(arch.channels[b]);
    auto w = detail::make_tensor(ModelParams::conv_weight(b), {cout, cin, 3, 3});
    detail::glorot_fill(w, cin * 9, cout * 9, rng);
    p.tensors.push_back(std::move(w));
    p.tensors.push_back(detail::make_tensor(ModelParams::conv_bias(b), {cout}));
    cin = cout;
  }
  const auto hc = static_cast<std::uint32_t>(arch.hypercolumn_dim());
  if (head == HeadKind::Embedding) {
    const auto hid = static_cast<std::uint32_t>(arch.hidden);
    const auto out = static_cast<std::uint32_t>(arch.embed_dim);
    auto w1 = detail::make_tensor("head.fc1.weight", {hid, hc});
    detail::glorot_fill(w1, hc, hid, rng);
    auto w2 = detail::make_tensor("head.fc2.weight", {out, hid});
    detail::glorot_fill(w2, hid, out, rng);
    p.tensors.push_back(std::move(w1));
    p.tensors.push_back(detail::make_tensor("head.fc1.bias", {hid}));
    p.tensors.push_back(std::move(w2));
    p.tensors.push_back(detail::make_tensor("head.fc2.bias", {out}));
    auto rho = detail::make_tensor("kernel.rho", {1});
    rho[0] = KernelParams<double>{}.rho;
    p.tensors.push_back(std::move(rho));
  } else {
    const auto bins = static_cast<std::uint32_t>(arch.bins);
    for (const char* axis : {"x", "y"}) {
      auto w = detail::make_tensor(std::string("cls.") + axis + ".weight", {bins, hc});
      detail::glorot_fill(w, hc, bins, rng);
      p.tensors.push_back(std::move(w));
      p.tensors.push_back(detail::make_tensor(std::string("cls.") + axis + ".bias", {bins}));
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Backbone

struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;  // [c][y][x]

  FeatureMap() = default;
  FeatureMap(int c, int h, int w) : channels(c), height(h), width(w), values(static_cast<std::size_t>(c) * h * w) {}

  double& at(int c, int y, int x) { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double* plane(int c) { return values.data() + static_cast<std::size_t>(c) * height * width; }
  const double* plane(int c) const { return values.data() + static_cast<std::size_t>(c) * height * width; }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

struct FeaturePyramid {
  int src_height = 0;
  int src_width = 0;
  std::vector<FeatureMap> levels;
  std::vector<int> strides;

  int hypercolumn_dim() const {
    int d = 0;
    for (const auto& l : levels) d += l.channels;
    return d;
  }
};

struct BackboneTrace {
  struct Block {
    FeatureMap input;
    FeatureMap pre_activation;
    std::vector<std::uint32_t> argmax;  // index into pre_activation per pooled cell
  };
  std::vector<Block> blocks;
  FeaturePyramid pyramid;
};

namespace detail {

inline FeatureMap image_planes(const Image& img) {
  FeatureMap m(3, img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) m.at(c, y, x) = img.at(y, x, c);
  return m;
}

// 3x3 convolution, stride 1, zero padding 1.
inline FeatureMap conv3x3(const FeatureMap& in, const Tensor& w, const Tensor& b) {
  const int cout = static_cast<int>(w.dims[0]);
  const int cin = in.channels;
  const int h = in.height, wd = in.width;
  FeatureMap out(cout, h, wd);
  for (int co = 0; co < cout; ++co) {
    double* o = out.plane(co);
    std::fill(o, o + static_cast<std::size_t>(h) * wd, b[co]);
    for (int ci = 0; ci < cin; ++ci) {
      const double* src = in.plane(ci);
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const double wv = w[((static_cast<std::size_t>(co) * cin + ci) * 3 + ky) * 3 + kx];
          const int x_lo = std::max(0, 1 - kx), x_hi = std::min(wd, wd + 1 - kx);
          for (int y = 0; y < h; ++y) {
            const int yy = y + ky - 1;
            if (yy < 0 || yy >= h) continue;
            double* orow = o + static_cast<std::size_t>(y) * wd;
            const double* srow = src + static_cast<std::size_t>(yy) * wd + (kx - 1);
            for (int x = x_lo; x < x_hi; ++x) orow[x] += wv * srow[x];
          }
        }
      }
    }
  }
  return out;
}

// Accumulates weight/bias gradients and returns the input gradient.
inline FeatureMap conv3x3_backward(const FeatureMap& in, const Tensor& w, const FeatureMap& d_out, Tensor& d_w,
                                   Tensor& d_b, bool want_input_grad) {
  const int cout = d_out.channels;
  const int cin = in.channels;
  const int h = in.height, wd = in.width;
  FeatureMap d_in;
  if (want_input_grad) d_in = FeatureMap(cin, h, wd);
  for (int co = 0; co < cout; ++co) {
    const double* g = d_out.plane(co);
    double bsum = 0;
    for (std::size_t i = 0; i < static_cast<std::size_t>(h) * wd; ++i) bsum += g[i];
    d_b[co] += bsum;
    for (int ci = 0; ci < cin; ++ci) {
      const double* src = in.plane(ci);
      double* dsrc = want_input_grad ? d_in.plane(ci) : nullptr;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const std::size_t widx = ((static_cast<std::size_t>(co) * cin + ci) * 3 + ky) * 3 + kx;
          const double wv = w[widx];
          const int x_lo = std::max(0, 1 - kx), x_hi = std::min(wd, wd + 1 - kx);
          double acc = 0;
          for (int y = 0; y < h; ++y) {
            const int yy = y + ky - 1;
            if (yy < 0 || yy >= h) continue;
            const double* grow = g + static_cast<std::size_t>(y) * wd;
            const std::size_t off = static_cast<std::size_t>(yy) * wd + (kx - 1);
            for (int x = x_lo; x < x_hi; ++x) acc += grow[x] * src[off + x];
            if (dsrc)
              for (int x = x_lo; x < x_hi; ++x) dsrc[off + x] += wv * grow[x];
          }
          d_w[widx] += acc;
        }
      }
    }
  }
  return d_in;
}

// relu followed by 2x2 max pooling; ties resolve to the first cell in raster order.
inline FeatureMap relu_maxpool2(const FeatureMap& pre, std::vector<std::uint32_t>& argmax) {
  FeatureMap out(pre.channels, pre.height / 2, pre.width / 2);
  argmax.assign(out.values.size(), 0);
  std::size_t k = 0;
  for (int c = 0; c < out.channels; ++c) {
    for (int y = 0; y < out.height; ++y) {
      for (int x = 0; x < out.width; ++x, ++k) {
        double best = -std::numeric_limits<double>::infinity();
        std::uint32_t best_idx = 0;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const auto idx = static_cast<std::uint32_t>((static_cast<std::size_t>(c) * pre.height + 2 * y + dy) *
                                                            pre.width +
                                                        2 * x + dx);
            const double v = std::max(0.0, pre.values[idx]);
            if (v > best) {
              best = v;
              best_idx = idx;
            }
          }
        }
        out.values[k] = best;
        argmax[k] = best_idx;
      }
    }
  }
  return out;
}

}  // namespace detail

inline void check_image_shape(const Image& image) {
  if (image.height < 16 || image.width < 16 || image.height % 8 != 0 || image.width % 8 != 0)
    throw Error("backbone: image size " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                " must be at least 16x16 and divisible by 8");
}

inline BackboneTrace trace_backbone(const Image& image, const ModelParams& params) {
  check_image_shape(image);
  BackboneTrace trace;
  trace.pyramid.src_height = image.height;
  trace.pyramid.src_width = image.width;
  FeatureMap x = detail::image_planes(image);
  int stride = 1;
  for (int b = 0; b < kBackboneBlocks; ++b) {
    BackboneTrace::Block block;
    block.pre_activation =
        detail::conv3x3(x, params.get(ModelParams::conv_weight(b)), params.get(ModelParams::conv_bias(b)));
    FeatureMap pooled = detail::relu_maxpool2(block.pre_activation, block.argmax);
    block.input = std::move(x);
    stride *= 2;
    trace.pyramid.levels.push_back(pooled);
    trace.pyramid.strides.push_back(stride);
    trace.blocks.push_back(std::move(block));
    x = std::move(pooled);
  }
  return trace;
}

inline FeaturePyramid forward_backbone(const Image& image, const ModelParams& params) {
  return trace_backbone(image, params).pyramid;
}

// ---------------------------------------------------------------------------
// Pixel sampling and hypercolumns

struct PixelSample {
  std::vector<PixelCoord> coords;
  std::size_t size() const { return coords.size(); }
};

/// n distinct pixels drawn uniformly without replacement (partial Fisher-Yates).
inline PixelSample sample_pixels(int height, int width, std::size_t count, std::uint64_t seed) {
  const std::size_t total = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  if (height <= 0 || width <= 0) throw Error("sample_pixels: empty image");
  if (count > total)
    throw Error("sample_pixels: requested " + std::to_string(count) + " pixels from an image of " +
                std::to_string(total));
  std::vector<std::uint32_t> idx(total);
  std::iota(idx.begin(), idx.end(), 0u);
  Rng rng(seed);
  PixelSample s;
  s.coords.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.below(total - i);
    std::swap(idx[i], idx[j]);
    s.coords.push_back({static_cast<int>(idx[i] / width), static_cast<int>(idx[i] % width)});
  }
  return s;
}

inline PixelSample full_grid(int height, int width) {
  PixelSample s;
  s.coords.reserve(static_cast<std::size_t>(height) * width);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) s.coords.push_back({r, c});
  return s;
}

/// Four-node interpolation stencil on one pyramid level.
struct BilinearTap {
  int y0, y1, x0, x1;
  double wy, wx;  // weight of y1 / x1
};

/// Pixel centers sit at half-integers: level coordinate = (p + 0.5) / stride - 0.5,
/// clamped to the level's grid.
inline BilinearTap bilinear_tap(double row, double col, int stride, int level_h, int level_w) {
  auto axis = [stride](double p, int n, int& i0, int& i1, double& w) {
    const double u = std::clamp((p + 0.5) / stride - 0.5, 0.0, static_cast<double>(n - 1));
    i0 = std::min(static_cast<int>(std::floor(u)), n - 1);
    i1 = std::min(i0 + 1, n - 1);
    w = u - i0;
  };
  BilinearTap t{};
  axis(row, level_h, t.y0, t.y1, t.wy);
  axis(col, level_w, t.x0, t.x1, t.wx);
  return t;
}

struct Hypercolumn {
  std::vector<double> values;
  double row = 0;
  double col = 0;
};

inline void check_in_bounds(const FeaturePyramid& pyr, double row, double col) {
  if (!(row >= 0.0 && row <= pyr.src_height - 1 && col >= 0.0 && col <= pyr.src_width - 1))
    throw Error("hypercolumn: pixel (" + std::to_string(row) + ", " + std::to_string(col) + ") outside " +
                std::to_string(pyr.src_height) + "x" + std::to_string(pyr.src_width) + " image");
}

/// Writes the hypercolumn at a (possibly fractional) pixel position into `out`.
inline void hypercolumn_into(const FeaturePyramid& pyr, double row, double col, std::span<double> out) {
  check_in_bounds(pyr, row, col);
  std::size_t k = 0;
  for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
    const auto& lvl = pyr.levels[l];
    const auto t = bilinear_tap(row, col, pyr.strides[l], lvl.height, lvl.width);
    const double w00 = (1 - t.wy) * (1 - t.wx), w01 = (1 - t.wy) * t.wx;
    const double w10 = t.wy * (1 - t.wx), w11 = t.wy * t.wx;
    for (int c = 0; c < lvl.channels; ++c) {
      out[k++] = w00 * lvl.at(c, t.y0, t.x0) + w01 * lvl.at(c, t.y0, t.x1) + w10 * lvl.at(c, t.y1, t.x0) +
                 w11 * lvl.at(c, t.y1, t.x1);
    }
  }
}

inline Hypercolumn hypercolumn_at(const FeaturePyramid& pyr, double row, double col) {
  Hypercolumn h;
  h.row = row;
  h.col = col;
  h.values.resize(static_cast<std::size_t>(pyr.hypercolumn_dim()));
  hypercolumn_into(pyr, row, col, h.values);
  return h;
}

inline Matrix<double> hypercolumns(const FeaturePyramid& pyr, const PixelSample& sample) {
  Matrix<double> out(sample.size(), static_cast<std::size_t>(pyr.hypercolumn_dim()));
  for (std::size_t i = 0; i < sample.size(); ++i)
    hypercolumn_into(pyr, sample.coords[i].row, sample.coords[i].col, out.row(i));
  return out;
}

// ---------------------------------------------------------------------------
// Heads

namespace detail {

// y = W x + b with W stored [out][in].
inline void affine(const Tensor& w, const Tensor& b, std::span<const double> x, std::span<double> y) {
  const std::size_t n_out = w.dims[0], n_in = w.dims[1];
  if (x.size() != n_in) throw Error("affine '" + w.name + "': input has dimension " + std::to_string(x.size()) +
                                    ", expected " + std::to_string(n_in));
  for (std::size_t o = 0; o < n_out; ++o) {
    double acc = b[o];
    const double* row = w.values.data() + o * n_in;
    for (std::size_t i = 0; i < n_in; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
}

// Accumulates dW, db; adds W^T dy into dx (if non-empty).
inline void affine_backward(const Tensor& w, std::span<const double> x, std::span<const double> dy, Tensor& dw,
                            Tensor& db, std::span<double> dx) {
  const std::size_t n_out = w.dims[0], n_in = w.dims[1];
  for (std::size_t o = 0; o < n_out; ++o) {
    const double g = dy[o];
    if (g == 0.0) continue;
    db[o] += g;
    double* drow = dw.values.data() + o * n_in;
    const double* row = w.values.data() + o * n_in;
    for (std::size_t i = 0; i < n_in; ++i) drow[i] += g * x[i];
    if (!dx.empty())
      for (std::size_t i = 0; i < n_in; ++i) dx[i] += g * row[i];
  }
}

}  // namespace detail

struct HeadTrace {
  std::vector<double> hidden_pre;  // fc1 output before relu
  std::vector<double> raw;         // fc2 output before normalization
  double norm = 0;                 // norm actually divided by
  bool fallback = false;
};

// Added to a vanishing head output before renormalizing.
inline constexpr double kHeadFallbackPerturbation = 1e-6;

inline std::vector<double> embed_head(std::span<const double> hc, const ModelParams& params,
                                      HeadTrace* trace = nullptr) {
  const auto& w1 = params.get("head.fc1.weight");
  const auto& w2 = params.get("head.fc2.weight");
  HeadTrace local;
  HeadTrace& t = trace ? *trace : local;
  t.hidden_pre.assign(w1.dims[0], 0.0);
  detail::affine(w1, params.get("head.fc1.bias"), hc, t.hidden_pre);
  std::vector<double> hidden(t.hidden_pre.size());
  for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i] = std::max(0.0, t.hidden_pre[i]);
  t.raw.assign(w2.dims[0], 0.0);
  detail::affine(w2, params.get("head.fc2.bias"), hidden, t.raw);
  double sq = 0;
  for (double v : t.raw) sq += v * v;
  t.fallback = !(std::sqrt(sq) >= kMinEmbeddingNorm);
  if (t.fallback) {
    t.raw[0] += kHeadFallbackPerturbation;
    sq = 0;
    for (double v : t.raw) sq += v * v;
  }
  t.norm = std::sqrt(sq);
  std::vector<double> out(t.raw.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.raw[i] / t.norm;
  return out;
}

inline std::vector<double> embed_head(const Hypercolumn& h, const ModelParams& params) {
  return embed_head(h.values, params);
}

/// Everything a backward pass over the embedding network needs.
struct EmbeddingPass {
  BackboneTrace backbone;
  PixelSample sample;
  Matrix<double> hypercolumns;
  std::vector<HeadTrace> heads;
  EmbeddingField<double> embeddings;
  std::size_t fallbacks = 0;
};

inline EmbeddingPass run_embedding(const Image& image, const PixelSample& sample, const ModelParams& params) {
  if (params.head() != HeadKind::Embedding) throw Error("run_embedding: model has no embedding head");
  EmbeddingPass pass;
  pass.backbone = trace_backbone(image, params);
  pass.sample = sample;
  pass.hypercolumns = hypercolumns(pass.backbone.pyramid, sample);
  const auto d = params.get("head.fc2.weight").dims[0];
  pass.embeddings.vectors = Matrix<double>(sample.size(), d);
  pass.embeddings.coords = sample.coords;
  pass.heads.resize(sample.size());
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const auto e = embed_head(pass.hypercolumns.row(i), params, &pass.heads[i]);
    std::copy(e.begin(), e.end(), pass.embeddings.vectors.row(i).begin());
    pass.fallbacks += pass.heads[i].fallback ? 1 : 0;
  }
  return pass;
}

/// Backpropagates hypercolumn gradients through the bilinear taps and the
/// conv blocks, accumulating into `grads`.
inline void backward_backbone(const BackboneTrace& trace, const ModelParams& params, const PixelSample& sample,
                              const Matrix<double>& d_hypercolumns, ModelParams& grads) {
  const auto& pyr = trace.pyramid;
  std::vector<FeatureMap> d_levels;
  for (const auto& l : pyr.levels) d_levels.emplace_back(l.channels, l.height, l.width);

  // Each sampled pixel scatters its gradient to the 4 nodes it interpolated from.
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const auto g = d_hypercolumns.row(i);
    std::size_t k = 0;
    for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
      auto& dl = d_levels[l];
      const auto t = bilinear_tap(sample.coords[i].row, sample.coords[i].col, pyr.strides[l], dl.height, dl.width);
      const double w00 = (1 - t.wy) * (1 - t.wx), w01 = (1 - t.wy) * t.wx;
      const double w10 = t.wy * (1 - t.wx), w11 = t.wy * t.wx;
      for (int c = 0; c < dl.channels; ++c, ++k) {
        dl.at(c, t.y0, t.x0) += w00 * g[k];
        dl.at(c, t.y0, t.x1) += w01 * g[k];
        dl.at(c, t.y1, t.x0) += w10 * g[k];
        dl.at(c, t.y1, t.x1) += w11 * g[k];
      }
    }
  }

  for (int b = kBackboneBlocks - 1; b >= 0; --b) {
    const auto& block = trace.blocks[static_cast<std::size_t>(b)];
    FeatureMap d_pre(block.pre_activation.channels, block.pre_activation.height, block.pre_activation.width);
    const auto& d_pooled = d_levels[static_cast<std::size_t>(b)];
    for (std::size_t k = 0; k < d_pooled.values.size(); ++k) {
      const auto idx = block.argmax[k];
      if (block.pre_activation.values[idx] > 0.0) d_pre.values[idx] += d_pooled.values[k];
    }
    FeatureMap d_in = detail::conv3x3_backward(block.input, params.get(ModelParams::conv_weight(b)), d_pre,
                                               grads.get(ModelParams::conv_weight(b)),
                                               grads.get(ModelParams::conv_bias(b)), b > 0);
    if (b > 0) {
      auto& prev = d_levels[static_cast<std::size_t>(b - 1)];
      for (std::size_t k = 0; k < prev.values.size(); ++k) prev.values[k] += d_in.values[k];
    }
  }
}

/// Parameter gradients given dL/d(embedding) for every sampled pixel.
inline ModelParams backward_embedding(const EmbeddingPass& pass, const ModelParams& params,
                                      const Matrix<double>& d_embeddings) {
  if (d_embeddings.rows() != pass.sample.size() || d_embeddings.cols() != pass.embeddings.dim())
    throw Error("network_backward: d_embeddings is " + std::to_string(d_embeddings.rows()) + "x" +
                std::to_string(d_embeddings.cols()) + ", expected " + std::to_string(pass.sample.size()) + "x" +
                std::to_string(pass.embeddings.dim()));
  ModelParams grads = params.zeros_like();
  const auto& w1 = params.get("head.fc1.weight");
  const auto& w2 = params.get("head.fc2.weight");
  auto& dw1 = grads.get("head.fc1.weight");
  auto& db1 = grads.get("head.fc1.bias");
  auto& dw2 = grads.get("head.fc2.weight");
  auto& db2 = grads.get("head.fc2.bias");
  Matrix<double> d_hc(pass.hypercolumns.rows(), pass.hypercolumns.cols());
  const std::size_t dim = pass.embeddings.dim();
  std::vector<double> d_raw(dim), hidden, d_hidden;
  for (std::size_t i = 0; i < pass.sample.size(); ++i) {
    const auto& t = pass.heads[i];
    const auto e = pass.embeddings.vectors.row(i);
    const auto de = d_embeddings.row(i);
    double radial = 0;
    for (std::size_t j = 0; j < dim; ++j) radial += de[j] * e[j];
    for (std::size_t j = 0; j < dim; ++j) d_raw[j] = (de[j] - radial * e[j]) / t.norm;

    hidden.assign(t.hidden_pre.size(), 0.0);
    for (std::size_t j = 0; j < hidden.size(); ++j) hidden[j] = std::max(0.0, t.hidden_pre[j]);
    d_hidden.assign(hidden.size(), 0.0);
    detail::affine_backward(w2, hidden, d_raw, dw2, db2, d_hidden);
    for (std::size_t j = 0; j < d_hidden.size(); ++j)
      if (t.hidden_pre[j] <= 0.0) d_hidden[j] = 0.0;
    detail::affine_backward(w1, pass.hypercolumns.row(i), d_hidden, dw1, db1, d_hc.row(i));
  }
  backward_backbone(pass.backbone, params, pass.sample, d_hc, grads);
  return grads;
}

/// Reverse-mode gradients of sum_i <d_embeddings_i, embedding_i> with respect to every parameter.
inline ModelParams network_backward(const Image& image, const PixelSample& sample, const ModelParams& params,
                                    const Matrix<double>& d_embeddings) {
  return backward_embedding(run_embedding(image, sample, params), params, d_embeddings);
}

// ---------------------------------------------------------------------------
// Flow-classification head (baseline)

struct ClassifierResult {
  double loss = 0;        // mean over pixels of CE_x + CE_y
  ModelParams grads;      // empty unless requested
  Matrix<double> hypercolumns;
};

namespace detail {

// Softmax cross entropy of one 16-way distribution; writes dCE/dlogits into `d`.
inline double softmax_ce(std::span<const double> logits, int label, std::span<double> d) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    d[i] = std::exp(logits[i] - mx);
    total += d[i];
  }
  for (auto& v : d) v /= total;
  const double ce = std::log(total) + mx - logits[static_cast<std::size_t>(label)];
  d[static_cast<std::size_t>(label)] -= 1.0;
  return ce;
}

}  // namespace detail

/// Per-pixel softmax cross entropy over 16 flow bins, once per axis.
inline ClassifierResult classifier_loss(const Image& image, const PixelSample& sample,
                                        std::span<const std::array<int, 2>> labels, const ModelParams& params,
                                        bool want_grads) {
  if (params.head() != HeadKind::FlowClassifier) throw Error("classifier_loss: model has no classifier head");
  if (labels.size() != sample.size()) throw Error("classifier_loss: one label pair per sampled pixel required");
  if (sample.size() == 0) throw Error("classifier_loss: empty sample");
  const auto trace = trace_backbone(image, params);
  ClassifierResult res;
  res.hypercolumns = hypercolumns(trace.pyramid, sample);
  if (want_grads) res.grads = params.zeros_like();
  Matrix<double> d_hc(res.hypercolumns.rows(), res.hypercolumns.cols());
  const double scale = 1.0 / static_cast<double>(sample.size());
  const char* axes[2] = {"cls.x", "cls.y"};
  for (int a = 0; a < 2; ++a) {
    const auto& w = params.get(std::string(axes[a]) + ".weight");
    const auto& b = params.get(std::string(axes[a]) + ".bias");
    std::vector<double> logits(w.dims[0]), d(w.dims[0]);
    for (std::size_t i = 0; i < sample.size(); ++i) {
      const int label = labels[i][static_cast<std::size_t>(a)];
      if (label < 0 || label >= static_cast<int>(w.dims[0])) throw Error("classifier_loss: label out of range");
      detail::affine(w, b, res.hypercolumns.row(i), logits);
      res.loss += scale * detail::softmax_ce(logits, label, d);
      if (want_grads) {
        for (auto& v : d) v *= scale;
        detail::affine_backward(w, res.hypercolumns.row(i), d, res.grads.get(w.name), res.grads.get(b.name),
                                d_hc.row(i));
      }
    }
  }
  if (want_grads) backward_backbone(trace, params, sample, d_hc, res.grads);
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints: "CPM1", u32 tensor count, then per tensor
// (u32 name length, UTF-8 name, u32 rank, u32 dims...), then f64 payloads in
// manifest order. All little-endian.

inline std::vector<std::uint8_t> serialize_params(const ModelParams& params) {
  std::vector<std::uint8_t> out{'C', 'P', 'M', '1'};
  le::put_u32(out, static_cast<std::uint32_t>(params.tensors.size()));
  for (const auto& t : params.tensors) {
    le::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    le::put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) le::put_u32(out, d);
  }
  for (const auto& t : params.tensors)
    for (double v : t.values) le::put_f64(out, v);
  return out;
}

inline ModelParams parse_params(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>") {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) throw Error("checkpoint truncated: " + origin);
  };
  auto u32 = [&]() {
    need(4);
    const auto v = le::get_u32(bytes.data() + pos);
    pos += 4;
    return v;
  };
  need(4);
  if (std::memcmp(bytes.data(), "CPM1", 4) != 0) throw Error("bad checkpoint magic: " + origin);
  pos = 4;
  const auto count = u32();
  ModelParams p;
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t;
    const auto len = u32();
    need(len);
    t.name.assign(reinterpret_cast<const char*>(bytes.data() + pos), len);
    pos += len;
    const auto rank = u32();
    std::uint64_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.dims.push_back(u32());
      n *= t.dims.back();
      if (n > (std::uint64_t{1} << 32)) throw Error("checkpoint tensor too large: " + origin);
    }
    if (n * 8 > bytes.size() - pos) throw Error("checkpoint truncated: " + origin);
    t.values.resize(n);
    p.tensors.push_back(std::move(t));
  }
  for (auto& t : p.tensors) {
    need(t.values.size() * 8);
    for (auto& v : t.values) {
      v = le::get_f64(bytes.data() + pos);
      pos += 8;
    }
  }
  if (pos != bytes.size()) throw Error("trailing bytes in checkpoint: " + origin);
  return p;
}

inline void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_params(params));
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  return parse_params(read_file_bytes(path), path.string());
}

}  // namespace cpfs
