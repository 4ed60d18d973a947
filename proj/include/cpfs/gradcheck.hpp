#pragma once

// Central finite-difference checks of the analytic gradients, at the loss
// boundary (embeddings, rho) and through the full network.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cpfs/embed_net.hpp"
#include "cpfs/kernel_core.hpp"
#include "cpfs/trainer.hpp"

namespace cpfs {

/// |a - b| / max(|a|, |b|, floor). The floor keeps near-zero entries from
/// turning rounding noise into a large ratio.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), floor});
}

struct BlockCheck {
  std::string block;
  double max_rel_err = 0;
  std::size_t entries = 0;
};

struct GradCheckReport {
  std::vector<BlockCheck> blocks;
  double tolerance = 0;

  double max_rel_err() const {
    double m = 0;
    for (const auto& b : blocks) m = std::max(m, b.max_rel_err);
    return m;
  }
  bool passed() const { return max_rel_err() <= tolerance; }
  std::vector<std::string> failing_blocks() const {
    std::vector<std::string> out;
    for (const auto& b : blocks)
      if (b.max_rel_err > tolerance) out.push_back(b.block);
    return out;
  }
};

struct LossInstance {
  std::vector<Vec2<double>> flows;
  Matrix<double> embeddings;
  KernelParams<double> kernel;
};

/// Normalized-range flows, Gaussian raw embeddings, sigma^2 in [0.05, 1].
inline LossInstance random_loss_instance(std::uint64_t seed, std::size_t n, std::size_t dim) {
  Rng rng(seed);
  LossInstance inst;
  inst.flows.resize(n);
  for (auto& f : inst.flows) f = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
  inst.embeddings = Matrix<double>(n, dim);
  for (auto& v : inst.embeddings.data()) v = rng.normal();
  inst.kernel = KernelParams<double>::from_sigma_sq(rng.uniform(0.05, 1.0));
  return inst;
}

/// Checks dL/dphi and dL/drho on every entry. `corrupt` names a block whose
/// analytic gradient is deliberately offset (negative control).
inline GradCheckReport check_loss_gradients(const LossInstance& inst, double step = 1e-5, double tolerance = 1e-4,
                                            const std::string& corrupt = {}) {
  auto analytic = loss_gradients<double>(inst.flows, inst.embeddings, inst.kernel);
  if (corrupt == "d_embeddings")
    for (auto& v : analytic.d_embeddings.data()) v += 1e-2;
  if (corrupt == "d_rho") analytic.d_rho += 1e-2;

  // Entries far below the block's largest gradient (or below 1e-6) are
  // compared on that absolute scale; central differences cannot resolve them.
  double block_scale = 0;
  for (double v : analytic.d_embeddings.data()) block_scale = std::max(block_scale, std::fabs(v));
  const double floor = std::max(1e-6, 1e-3 * block_scale);

  GradCheckReport rep;
  rep.tolerance = tolerance;
  BlockCheck emb{"d_embeddings", 0, 0};
  Matrix<double> e = inst.embeddings;
  for (std::size_t i = 0; i < e.size(); ++i) {
    const double orig = e.data()[i];
    e.data()[i] = orig + step;
    const double up = cross_pixel_loss<double>(inst.flows, e, inst.kernel);
    e.data()[i] = orig - step;
    const double down = cross_pixel_loss<double>(inst.flows, e, inst.kernel);
    e.data()[i] = orig;
    const double numeric = (up - down) / (2 * step);
    emb.max_rel_err = std::max(emb.max_rel_err, relative_error(analytic.d_embeddings.data()[i], numeric, floor));
    ++emb.entries;
  }
  rep.blocks.push_back(emb);

  KernelParams<double> kp = inst.kernel;
  kp.rho = inst.kernel.rho + step;
  const double up = cross_pixel_loss<double>(inst.flows, inst.embeddings, kp);
  kp.rho = inst.kernel.rho - step;
  const double down = cross_pixel_loss<double>(inst.flows, inst.embeddings, kp);
  rep.blocks.push_back({"d_rho", relative_error(analytic.d_rho, (up - down) / (2 * step)), 1});
  return rep;
}

struct ChainInstance {
  Example example;
  PixelSample sample;
  ModelParams params;
};

/// Random image in [0,1], random normalized flow, fresh parameters.
inline ChainInstance random_chain_instance(std::uint64_t seed, HeadKind head, int size = 16, std::size_t n_s = 4) {
  Rng rng(seed);
  ChainInstance inst;
  inst.example.image = Image(size, size);
  for (auto& v : inst.example.image.rgb) v = rng.uniform();
  inst.example.flow.width = size;
  inst.example.flow.height = size;
  inst.example.flow.data.resize(static_cast<std::size_t>(size) * size);
  for (auto& f : inst.example.flow.data) f = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
  inst.example.classes = discretize_flow(inst.example.flow);
  inst.sample = sample_pixels(size, size, n_s, mix_seed(seed, 1));
  inst.params = init_params(ArchConfig{}, head, mix_seed(seed, 2));
  // Non-zero biases so that every bias gradient is exercised.
  for (auto& t : inst.params.tensors)
    if (t.name.ends_with(".bias"))
      for (auto& v : t.values) v = rng.uniform(-0.1, 0.1);
  return inst;
}

/// Finite differences on `probes` random parameter entries through
/// backbone -> hypercolumn -> head -> loss. Blocks are parameter tensor names.
inline GradCheckReport check_chain_gradients(const ChainInstance& inst, std::size_t probes = 10,
                                             std::uint64_t probe_seed = 0, double step = 1e-6,
                                             double tolerance = 1e-3, const std::string& corrupt = {}) {
  const LossKind kind =
      inst.params.head() == HeadKind::Embedding ? LossKind::Similarity : LossKind::Baseline;
  auto analytic = image_objective(kind, inst.example, inst.sample, inst.params, true).grads;
  if (!corrupt.empty()) {
    if (auto* t = analytic.find(corrupt))
      for (auto& v : t->values) v += 1.0;
  }

  // Probe set: distinct (tensor, index) pairs drawn uniformly over all entries.
  const std::size_t total = inst.params.num_values();
  Rng rng(probe_seed);
  std::vector<std::size_t> flat;
  if (!corrupt.empty()) {
    std::size_t offset = 0;
    for (const auto& t : inst.params.tensors) {
      if (t.name == corrupt) flat.push_back(offset);
      offset += t.size();
    }
  }
  while (flat.size() < std::min(probes, total)) {
    const std::size_t k = rng.below(total);
    if (std::find(flat.begin(), flat.end(), k) == flat.end()) flat.push_back(k);
  }

  GradCheckReport rep;
  rep.tolerance = tolerance;
  ModelParams p = inst.params;
  for (std::size_t k : flat) {
    std::size_t t = 0, idx = k;
    while (idx >= p.tensors[t].size()) idx -= p.tensors[t++].size();
    const double orig = p.tensors[t][idx];
    p.tensors[t][idx] = orig + step;
    const double up = image_objective(kind, inst.example, inst.sample, p, false).loss;
    p.tensors[t][idx] = orig - step;
    const double down = image_objective(kind, inst.example, inst.sample, p, false).loss;
    p.tensors[t][idx] = orig;
    double tensor_scale = 0;
    for (double v : analytic.tensors[t].values) tensor_scale = std::max(tensor_scale, std::fabs(v));
    const double err =
        relative_error(analytic.tensors[t][idx], (up - down) / (2 * step), std::max(1e-6, 1e-3 * tensor_scale));
    const auto& name = p.tensors[t].name;
    auto it = std::find_if(rep.blocks.begin(), rep.blocks.end(), [&](const auto& b) { return b.block == name; });
    if (it == rep.blocks.end()) {
      rep.blocks.push_back({name, 0, 0});
      it = rep.blocks.end() - 1;
    }
    it->max_rel_err = std::max(it->max_rel_err, err);
    ++it->entries;
  }
  return rep;
}

}  // namespace cpfs
