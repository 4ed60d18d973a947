#pragma once

// Command-line front end. `run_cli` is the whole program; tools/cpfs.cpp only
// forwards argv. Subcommands:
//   gen, train, train-baseline, grad-check, embed, kernel-row, eval-grouping,
//   flow-enc, flow-dec

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cpfs/embed_net.hpp"
#include "cpfs/flow_io.hpp"
#include "cpfs/gradcheck.hpp"
#include "cpfs/image.hpp"
#include "cpfs/kernel_core.hpp"
#include "cpfs/synth_data.hpp"
#include "cpfs/trainer.hpp"

namespace cpfs {

inline constexpr double kDisplaySigmaSq = 0.0036;

// ---------------------------------------------------------------------------
// Visualization helpers

/// Affine map of [min, max] onto [0, 255]; a constant input maps to mid-gray.
inline std::vector<std::uint8_t> minmax_bytes(std::span<const double> values) {
  std::vector<std::uint8_t> out(values.size(), 128);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (!(*hi > *lo)) return out;
  const double scale = 255.0 / (*hi - *lo);
  for (std::size_t i = 0; i < values.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lround((values[i] - *lo) * scale));
  return out;
}

/// Projects D-dim embeddings (one row per pixel, raster order) to RGB with a
/// seeded Gaussian 3 x D matrix of unit-norm rows, then min-max maps each channel.
inline std::vector<std::uint8_t> embedding_to_rgb(const Matrix<double>& emb, std::uint64_t seed) {
  const std::size_t n = emb.rows(), d = emb.cols();
  Rng rng(seed);
  Matrix<double> proj(3, d);
  for (std::size_t c = 0; c < 3; ++c) {
    double sq = 0;
    for (auto& v : proj.row(c)) {
      v = rng.normal();
      sq += v * v;
    }
    for (auto& v : proj.row(c)) v /= std::sqrt(sq);
  }
  std::vector<std::uint8_t> rgb(n * 3);
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> channel(n);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0;
      for (std::size_t j = 0; j < d; ++j) acc += proj(c, j) * emb(i, j);
      channel[i] = acc;
    }
    const auto bytes = minmax_bytes(channel);
    for (std::size_t i = 0; i < n; ++i) rgb[i * 3 + c] = bytes[i];
  }
  return rgb;
}

/// K_f(p, .) over every pixel of a normalized flow field, raster order.
inline std::vector<double> flow_kernel_row(const NormalizedFlowField& nf, int row, int col,
                                           const KernelParams<double>& kp) {
  const auto& fp = nf.at(row, col);
  const double inv = 1.0 / (2.0 * kp.sigma_sq());
  std::vector<double> out;
  out.reserve(nf.data.size());
  for (const auto& f : nf.data) {
    const double dx = f[0] - fp[0], dy = f[1] - fp[1];
    out.push_back(std::exp(-(dx * dx + dy * dy) * inv));
  }
  return out;
}

/// K_phi(p, .) against every row of `emb`.
inline std::vector<double> embedding_kernel_row(const Matrix<double>& emb, std::size_t p) {
  const auto u = unit_rows(emb);
  std::vector<double> out;
  out.reserve(u.rows());
  for (std::size_t q = 0; q < u.rows(); ++q) {
    double dot = 0;
    for (std::size_t j = 0; j < u.cols(); ++j) dot += u(p, j) * u(q, j);
    out.push_back(q == p ? kEmbeddingKernelScale : kEmbeddingKernelScale * std::clamp(dot, -1.0, 1.0));
  }
  return out;
}

inline GrayImage heatmap(std::span<const double> row, int height, int width) {
  GrayImage g(height, width);
  g.values = minmax_bytes(row);
  return g;
}

inline void write_rgb_bytes(const std::vector<std::uint8_t>& rgb, int height, int width,
                            const std::filesystem::path& path) {
  Image img(height, width);
  for (std::size_t i = 0; i < rgb.size(); ++i) img.rgb[i] = rgb[i] / 255.0;
  write_ppm(img, path);
}

// ---------------------------------------------------------------------------
// Plain-text flow listing: first line "width height", then one "x y fx fy"
// line per pixel (any order, each pixel exactly once). '#' starts a comment.

inline FlowField parse_flow_text(std::istream& in) {
  std::string line;
  int lineno = 0;
  int w = -1, h = -1;
  std::vector<Vec2<double>> data;
  std::vector<bool> seen;
  std::size_t count = 0;
  auto fail = [&](const std::string& m) { throw Error("line " + std::to_string(lineno) + ": " + m); };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    if (w < 0) {
      if (!(ls >> w >> h) || w <= 0 || h <= 0) fail("expected header 'width height'");
      std::string extra;
      if (ls >> extra) fail("unexpected text after header");
      data.assign(static_cast<std::size_t>(w) * h, {0.0, 0.0});
      seen.assign(data.size(), false);
      continue;
    }
    long x = 0, y = 0;
    double fx = 0, fy = 0;
    std::string extra;
    if (!(ls >> x >> y >> fx >> fy) || (ls >> extra)) fail("expected 'x y fx fy'");
    if (x < 0 || x >= w || y < 0 || y >= h) fail("pixel outside the header dimensions");
    if (!std::isfinite(fx) || !std::isfinite(fy)) fail("non-finite flow value");
    const auto idx = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
    if (seen[idx]) fail("pixel listed twice");
    seen[idx] = true;
    data[idx] = {fx, fy};
    ++count;
  }
  if (w < 0) throw Error("empty flow listing");
  if (count != data.size())
    throw Error("header declares " + std::to_string(data.size()) + " pixels but " + std::to_string(count) +
                " lines were given");
  return FlowField(w, h, std::move(data));
}

inline std::string format_flow_text(const FlowField& flow) {
  std::string out = std::to_string(flow.width) + " " + std::to_string(flow.height) + "\n";
  char buf[96];
  for (int y = 0; y < flow.height; ++y) {
    for (int x = 0; x < flow.width; ++x) {
      const auto& f = flow.at(y, x);
      std::snprintf(buf, sizeof buf, "%d %d %.6f %.6f\n", x, y, f[0], f[1]);
      out += buf;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw Error(std::string("--") + what + " is required");
  if (!std::filesystem::exists(path)) throw Error(std::string(what) + " not found: " + path);
}

}  // namespace detail

/// Runs one CLI invocation. Returns the process exit status.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Cross-pixel optical-flow similarity: data, training, checks, visualizations"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 0;
  std::string out_path;
  app.add_option("--seed", seed, "Random seed");
  app.add_option("--out", out_path, "Output path");

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic moving-shapes dataset");
  SceneConfig scene_cfg;
  int count = 0;
  gen->add_option("--count", count, "Number of scenes")->required();
  gen->add_option("--height", scene_cfg.height);
  gen->add_option("--width", scene_cfg.width);
  gen->add_option("--min-objects", scene_cfg.min_objects);
  gen->add_option("--max-objects", scene_cfg.max_objects);
  gen->add_option("--min-size", scene_cfg.min_size);
  gen->add_option("--max-size", scene_cfg.max_size);
  gen->add_option("--noise", scene_cfg.noise);
  gen->add_option("--flow-min", scene_cfg.flow_min);
  gen->add_option("--flow-max", scene_cfg.flow_max);
  gen->add_option("--bg-flow-max", scene_cfg.background_flow_max);

  // train / train-baseline
  struct TrainOpts {
    std::string train_manifest, val_manifest;
    TrainConfig cfg;
  };
  TrainOpts sim{{}, {}, TrainConfig::defaults_for(LossKind::Similarity)};
  TrainOpts base{{}, {}, TrainConfig::defaults_for(LossKind::Baseline)};
  auto add_train = [&](const char* name, const char* desc, TrainOpts& o) {
    auto* sc = app.add_subcommand(name, desc);
    sc->add_option("--train", o.train_manifest, "Training manifest")->required();
    sc->add_option("--val", o.val_manifest, "Validation manifest")->required();
    sc->add_option("--lr", o.cfg.learning_rate, "Adam learning rate")->capture_default_str();
    sc->add_option("--batch", o.cfg.batch_size)->capture_default_str();
    sc->add_option("--pixels", o.cfg.pixels_per_image, "Sampled pixels per image")->capture_default_str();
    sc->add_option("--steps", o.cfg.max_steps)->capture_default_str();
    sc->add_option("--val-interval", o.cfg.val_interval)->capture_default_str();
    sc->add_option("--patience", o.cfg.patience)->capture_default_str();
    sc->add_option("--M", o.cfg.flow_bound, "Flow magnitude bound for normalization")->capture_default_str();
    sc->add_flag("--flip", o.cfg.flip, "Random horizontal flips");
    return sc;
  };
  auto* train_cmd = add_train("train", "Train with the cross-pixel similarity loss", sim);
  auto* base_cmd = add_train("train-baseline", "Train the 16-bin flow classification baseline", base);

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient checks");
  int seeds = 1;
  std::size_t probes = 10;
  std::string corrupt;
  gc->add_option("--seeds", seeds, "Independent random instances per suite")->check(CLI::PositiveNumber);
  gc->add_option("--probes", probes, "Parameter entries probed in the full-chain suite");
  gc->add_option("--corrupt", corrupt, "Test hook: offset the analytic gradient of a named block")
      ->group("");

  // embed
  auto* embed = app.add_subcommand("embed", "Dense embedding visualization via random projection to RGB");
  std::string ckpt_path, image_path;
  embed->add_option("--checkpoint", ckpt_path)->required();
  embed->add_option("--image", image_path)->required();

  // kernel-row
  auto* krow = app.add_subcommand("kernel-row", "Heatmap of one kernel row K(p, .)");
  std::string kernel_kind = "flow", flow_path;
  int row = 0, col = 0;
  double sigma_sq = kDisplaySigmaSq, bound = kDefaultFlowBound;
  krow->add_option("--kernel", kernel_kind)->check(CLI::IsMember({"flow", "embedding"}));
  krow->add_option("--flow", flow_path, ".flo16 source for the flow kernel");
  krow->add_option("--checkpoint", ckpt_path);
  krow->add_option("--image", image_path);
  krow->add_option("--row", row)->required();
  krow->add_option("--col", col)->required();
  krow->add_option("--sigma-sq", sigma_sq, "Flow kernel bandwidth when no checkpoint is given");
  krow->add_option("--M", bound);

  // eval-grouping
  auto* eval = app.add_subcommand("eval-grouping", "Grouping margin on a manifest");
  std::string manifest_path, features = "embedding";
  std::size_t eval_pixels = 512;
  eval->add_option("--checkpoint", ckpt_path)->required();
  eval->add_option("--manifest", manifest_path)->required();
  eval->add_option("--pixels", eval_pixels);
  eval->add_option("--features", features)->check(CLI::IsMember({"embedding", "hypercolumn"}));

  // flow-enc / flow-dec
  auto* enc = app.add_subcommand("flow-enc", "Text flow listing -> .flo16");
  auto* dec = app.add_subcommand("flow-dec", ".flo16 -> text flow listing");
  std::string in_path;
  enc->add_option("--in", in_path)->required();
  dec->add_option("--in", in_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (gen->parsed()) {
      if (count < 1) throw Error("count must be >= 1");
      const auto manifest = generate_dataset(scene_cfg, count, seed, out_path.empty() ? "data" : out_path);
      out << manifest.string() << "\n";
      return 0;
    }

    if (train_cmd->parsed() || base_cmd->parsed()) {
      auto& o = train_cmd->parsed() ? sim : base;
      detail::require_file(o.train_manifest, "train");
      detail::require_file(o.val_manifest, "val");
      o.cfg.seed = seed;
      const std::filesystem::path dir = out_path.empty() ? "run" : out_path;
      std::filesystem::create_directories(dir);
      const auto res = train(o.cfg, o.train_manifest, o.val_manifest);
      save_checkpoint(res.best, dir / "model.cpm");
      res.log.write_csv(dir / "train_log.csv");
      char buf[256];
      std::snprintf(buf, sizeof buf, "steps %d, best step %d, best val loss %.6f%s\n", res.steps_run, res.best_step,
                    res.best_val_loss, res.stopped_early ? " (early stop)" : "");
      out << buf;
      if (res.fallbacks) out << "embedding normalization fallbacks: " << res.fallbacks << "\n";
      out << (dir / "model.cpm").string() << "\n" << (dir / "train_log.csv").string() << "\n";
      return std::isfinite(res.best_val_loss) ? 0 : 1;
    }

    if (gc->parsed()) {
      bool ok = true;
      double loss_worst = 0, chain_worst = 0;
      std::vector<std::string> failing;
      auto note = [&](const GradCheckReport& r, const std::string& suite) {
        for (const auto& b : r.failing_blocks()) failing.push_back(suite + ":" + b);
        ok = ok && r.passed();
      };
      const std::size_t sizes[] = {2, 5, 8};
      const std::size_t dims[] = {3, 16};
      for (int s = 0; s < seeds; ++s) {
        const auto inst_seed = mix_seed(seed, static_cast<std::uint64_t>(s));
        const auto inst = random_loss_instance(inst_seed, sizes[s % 3], dims[(s / 3) % 2]);
        const auto r = check_loss_gradients(inst, 1e-5, 1e-4, corrupt);
        loss_worst = std::max(loss_worst, r.max_rel_err());
        note(r, "loss");
      }
      for (int s = 0; s < seeds; ++s) {
        const auto inst_seed = mix_seed(seed ^ 0xC4A1, static_cast<std::uint64_t>(s));
        const auto r = check_chain_gradients(random_chain_instance(inst_seed, HeadKind::Embedding), probes,
                                             inst_seed, 1e-6, 1e-3, corrupt);
        chain_worst = std::max(chain_worst, r.max_rel_err());
        note(r, "chain");
      }
      char buf[160];
      std::snprintf(buf, sizeof buf, "loss-level max rel err %.3e <= 1e-4: %s\n", loss_worst,
                    loss_worst <= 1e-4 ? "PASS" : "FAIL");
      out << buf;
      std::snprintf(buf, sizeof buf, "full-chain max rel err %.3e <= 1e-3: %s\n", chain_worst,
                    chain_worst <= 1e-3 ? "PASS" : "FAIL");
      out << buf;
      for (const auto& f : failing) out << "FAIL block " << f << "\n";
      return ok ? 0 : 1;
    }

    if (embed->parsed()) {
      if (out_path.empty()) throw Error("--out is required");
      const auto params = load_checkpoint(ckpt_path);
      const auto image = read_ppm(image_path);
      const auto pass = run_embedding(image, full_grid(image.height, image.width), params);
      write_rgb_bytes(embedding_to_rgb(pass.embeddings.vectors, seed), image.height, image.width, out_path);
      out << out_path << "\n";
      return 0;
    }

    if (krow->parsed()) {
      if (out_path.empty()) throw Error("--out is required");
      std::vector<double> values;
      int h = 0, w = 0;
      if (kernel_kind == "flow") {
        detail::require_file(flow_path, "flow");
        const auto flow = decode_flow(read_flow_file(flow_path));
        h = flow.height;
        w = flow.width;
        if (row < 0 || row >= h || col < 0 || col >= w) throw Error("pixel outside the flow field");
        const auto kp = ckpt_path.empty() ? KernelParams<double>::from_sigma_sq(sigma_sq)
                                          : load_checkpoint(ckpt_path).kernel();
        values = flow_kernel_row(normalize_flow(flow, bound), row, col, kp);
      } else {
        detail::require_file(ckpt_path, "checkpoint");
        detail::require_file(image_path, "image");
        const auto params = load_checkpoint(ckpt_path);
        const auto image = read_ppm(image_path);
        h = image.height;
        w = image.width;
        if (row < 0 || row >= h || col < 0 || col >= w) throw Error("pixel outside the image");
        values = embedding_kernel_row(run_embedding(image, full_grid(h, w), params).embeddings.vectors,
                                      static_cast<std::size_t>(row) * w + static_cast<std::size_t>(col));
      }
      write_pgm(heatmap(values, h, w), out_path);
      out << out_path << "\n";
      return 0;
    }

    if (eval->parsed()) {
      detail::require_file(manifest_path, "manifest");
      const auto params = load_checkpoint(ckpt_path);
      const auto kind = features == "hypercolumn" ? FeatureKind::Hypercolumn : FeatureKind::Embedding;
      const auto rep = evaluate_grouping_run(params, manifest_path, eval_pixels, seed, kind);
      char buf[96];
      out << "scene,margin\n";
      for (std::size_t i = 0; i < rep.per_scene.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.6f\n", i, rep.per_scene[i]);
        out << buf;
      }
      std::snprintf(buf, sizeof buf, "mean,%.6f\n", rep.mean);
      out << buf;
      return 0;
    }

    if (enc->parsed()) {
      if (out_path.empty()) throw Error("--out is required");
      std::ifstream in(in_path);
      if (!in) throw Error("cannot open " + in_path);
      std::size_t saturated = 0;
      write_flow_file(encode_flow(parse_flow_text(in), &saturated), out_path);
      if (saturated) err << "warning: " << saturated << " components saturated\n";
      out << out_path << "\n";
      return 0;
    }

    if (dec->parsed()) {
      const auto text = format_flow_text(decode_flow(read_flow_file(in_path)));
      if (out_path.empty()) {
        out << text;
      } else {
        detail::write_text(out_path, text);
      }
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace cpfs
