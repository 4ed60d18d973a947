#pragma once

// Adam training of the embedding network against the cross-pixel similarity
// loss, the direct flow-classification baseline, early stopping on a
// validation manifest, and grouping evaluation.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cpfs/common.hpp"
#include "cpfs/embed_net.hpp"
#include "cpfs/flow_io.hpp"
#include "cpfs/kernel_core.hpp"
#include "cpfs/synth_data.hpp"

namespace cpfs {

enum class LossKind { Similarity, Baseline };

struct TrainConfig {
  LossKind loss = LossKind::Similarity;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 8;
  int pixels_per_image = 512;
  int max_steps = 2000;
  int val_interval = 100;
  int patience = 5;
  std::uint64_t seed = 0;
  double flow_bound = kDefaultFlowBound;
  bool flip = false;  // random horizontal flips (negates f_x)
  ArchConfig arch{};

  static TrainConfig defaults_for(LossKind kind) {
    TrainConfig c;
    c.loss = kind;
    c.learning_rate = kind == LossKind::Similarity ? 1e-4 : 1e-2;
    return c;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw Error("train config: " + m); };
    if (!(learning_rate > 0)) fail("learning rate must be positive");
    if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) fail("betas must lie in (0, 1)");
    if (!(epsilon > 0)) fail("epsilon must be positive");
    if (batch_size < 1) fail("batch size must be >= 1");
    if (pixels_per_image < (loss == LossKind::Similarity ? 2 : 1))
      fail("pixels per image must be >= 2 for the similarity loss");
    if (max_steps < 1) fail("max steps must be >= 1");
    if (val_interval < 1) fail("validation interval must be >= 1");
    if (patience < 0) fail("patience must be >= 0");
    if (!(flow_bound > 0)) fail("flow bound M must be positive");
  }
};

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;
  std::int64_t step = 0;

  static AdamState for_params(const ModelParams& params) {
    AdamState s;
    for (const auto& t : params.tensors) {
      s.first.emplace_back(t.size(), 0.0);
      s.second.emplace_back(t.size(), 0.0);
    }
    return s;
  }
};

/// Bias-corrected Adam, no weight decay. A non-finite gradient rejects the
/// whole step before anything is modified.
inline void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, const TrainConfig& cfg) {
  if (grads.tensors.size() != params.tensors.size() || state.first.size() != params.tensors.size())
    throw Error("adam_step: parameter/gradient/state layout mismatch");
  for (std::size_t k = 0; k < params.tensors.size(); ++k) {
    const auto& g = grads.tensors[k];
    if (g.name != params.tensors[k].name || g.size() != params.tensors[k].size() ||
        state.first[k].size() != g.size())
      throw Error("adam_step: shape mismatch for '" + params.tensors[k].name + "'");
    for (double v : g.values)
      if (!std::isfinite(v)) throw Error("adam_step: non-finite gradient in '" + g.name + "'");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.tensors.size(); ++k) {
    auto& p = params.tensors[k].values;
    const auto& g = grads.tensors[k].values;
    auto& m = state.first[k];
    auto& v = state.second[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      p[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Per-image objectives

struct Example {
  Image image;
  NormalizedFlowField flow;
  FlowClassField classes;
};

inline Example make_example(const Scene& scene, double flow_bound) {
  Example e{scene.image, normalize_flow(scene.flow, flow_bound), {}};
  e.classes = discretize_flow(e.flow);
  return e;
}

/// Mirror left-right. The x flow component changes sign.
inline Example flip_horizontal(const Example& in) {
  Example out = in;
  const int h = in.image.height, w = in.image.width;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int sx = w - 1 - x;
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = in.image.at(y, sx, c);
      const auto f = in.flow.at(y, sx);
      out.flow.data[static_cast<std::size_t>(y) * w + x] = {-f[0], f[1]};
    }
  }
  out.classes = discretize_flow(out.flow);
  return out;
}

struct ImageObjective {
  double loss = 0;
  ModelParams grads;  // empty when not requested
  std::size_t fallbacks = 0;
};

inline std::vector<Vec2<double>> flows_at(const NormalizedFlowField& flow, const PixelSample& sample) {
  std::vector<Vec2<double>> out;
  out.reserve(sample.size());
  for (const auto& p : sample.coords) out.push_back(flow.at(p.row, p.col));
  return out;
}

inline ImageObjective similarity_objective(const Example& ex, const PixelSample& sample, const ModelParams& params,
                                           bool want_grads) {
  const auto pass = run_embedding(ex.image, sample, params);
  const auto flows = flows_at(ex.flow, sample);
  ImageObjective out;
  out.fallbacks = pass.fallbacks;
  if (!want_grads) {
    out.loss = cross_pixel_loss<double>(flows, pass.embeddings.vectors, params.kernel());
    return out;
  }
  const auto lg = loss_gradients<double>(flows, pass.embeddings.vectors, params.kernel());
  out.loss = lg.loss;
  out.grads = backward_embedding(pass, params, lg.d_embeddings);
  out.grads.get("kernel.rho")[0] = lg.d_rho;
  return out;
}

inline ImageObjective baseline_objective(const Example& ex, const PixelSample& sample, const ModelParams& params,
                                         bool want_grads) {
  std::vector<std::array<int, 2>> labels;
  labels.reserve(sample.size());
  for (const auto& p : sample.coords) labels.push_back(ex.classes.at(p.row, p.col));
  auto res = classifier_loss(ex.image, sample, labels, params, want_grads);
  return {res.loss, std::move(res.grads), 0};
}

inline ImageObjective image_objective(LossKind kind, const Example& ex, const PixelSample& sample,
                                      const ModelParams& params, bool want_grads) {
  return kind == LossKind::Similarity ? similarity_objective(ex, sample, params, want_grads)
                                      : baseline_objective(ex, sample, params, want_grads);
}

struct StepResult {
  double loss = 0;  // mean over images
  std::size_t fallbacks = 0;
};

/// Mean loss and mean gradient over a batch, reduced in index order.
inline ImageObjective batch_objective(LossKind kind, std::span<const Example> batch,
                                      std::span<const PixelSample> samples, const ModelParams& params,
                                      bool want_grads) {
  if (batch.empty()) throw Error("empty batch");
  if (samples.size() != batch.size()) throw Error("one pixel sample per batch image required");
  ImageObjective total;
  if (want_grads) total.grads = params.zeros_like();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto r = image_objective(kind, batch[i], samples[i], params, want_grads);
    total.loss += r.loss;
    total.fallbacks += r.fallbacks;
    if (want_grads)
      for (std::size_t k = 0; k < total.grads.tensors.size(); ++k)
        for (std::size_t j = 0; j < total.grads.tensors[k].size(); ++j)
          total.grads.tensors[k][j] += r.grads.tensors[k][j];
  }
  const double scale = 1.0 / static_cast<double>(batch.size());
  total.loss *= scale;
  if (want_grads)
    for (auto& t : total.grads.tensors)
      for (auto& v : t.values) v *= scale;
  return total;
}

inline StepResult similarity_step(std::span<const Example> batch, std::span<const PixelSample> samples,
                                  ModelParams& params, AdamState& state, const TrainConfig& cfg) {
  auto obj = batch_objective(LossKind::Similarity, batch, samples, params, true);
  adam_step(params, obj.grads, state, cfg);
  return {obj.loss, obj.fallbacks};
}

inline StepResult baseline_step(std::span<const Example> batch, std::span<const PixelSample> samples,
                                ModelParams& params, AdamState& state, const TrainConfig& cfg) {
  auto obj = batch_objective(LossKind::Baseline, batch, samples, params, true);
  adam_step(params, obj.grads, state, cfg);
  return {obj.loss, 0};
}

// ---------------------------------------------------------------------------
// Training loop

struct LogRecord {
  int step = 0;
  double train_loss = 0;
  double val_loss = 0;
  double sigma_sq = 0;  // NaN for the baseline, which has no kernel

  friend bool operator==(const LogRecord&, const LogRecord&) = default;
};

struct TrainLog {
  std::vector<LogRecord> records;

  std::string to_csv() const {
    std::string out = "step,train_loss,val_loss,sigma_sq\n";
    char buf[160];
    for (const auto& r : records) {
      std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", r.step, r.train_loss, r.val_loss, r.sigma_sq);
      out += buf;
    }
    return out;
  }

  void write_csv(const std::filesystem::path& path) const {
    const auto text = to_csv();
    write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }
};

struct TrainResult {
  ModelParams best;        // lowest validation loss seen
  ModelParams last;        // parameters after the final step
  TrainLog log;
  double best_val_loss = std::numeric_limits<double>::infinity();
  int best_step = 0;
  int steps_run = 0;
  bool stopped_early = false;
  std::size_t fallbacks = 0;
};

inline std::vector<Example> load_examples(const std::filesystem::path& manifest, double flow_bound,
                                          std::vector<SceneFiles>* files_out = nullptr) {
  const auto files = read_manifest(manifest);
  if (files.empty()) throw Error("manifest lists no scenes: " + manifest.string());
  std::vector<Example> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(make_example(load_scene(f), flow_bound));
  if (files_out) *files_out = files;
  return out;
}

inline TrainResult train(const TrainConfig& cfg, std::span<const Example> train_set, std::span<const Example> val_set,
                         std::optional<ModelParams> init = std::nullopt) {
  cfg.validate();
  if (train_set.empty()) throw Error("training set is empty");
  if (val_set.empty()) throw Error("validation set is empty");
  for (const auto* set : {&train_set, &val_set})
    for (const auto& ex : *set)
      if (static_cast<std::size_t>(cfg.pixels_per_image) >
          static_cast<std::size_t>(ex.image.height) * static_cast<std::size_t>(ex.image.width))
        throw Error("pixels per image exceeds the image size");

  const HeadKind head = cfg.loss == LossKind::Similarity ? HeadKind::Embedding : HeadKind::FlowClassifier;
  ModelParams params = init ? *init : init_params(cfg.arch, head, mix_seed(cfg.seed, 1));
  if (params.head() != head) throw Error("initial parameters have the wrong head for this loss");
  AdamState state = AdamState::for_params(params);
  Rng rng(mix_seed(cfg.seed, 2));

  // Validation pixels are frozen once so checks compare like with like.
  std::vector<PixelSample> val_samples;
  for (std::size_t j = 0; j < val_set.size(); ++j)
    val_samples.push_back(sample_pixels(val_set[j].image.height, val_set[j].image.width,
                                        static_cast<std::size_t>(cfg.pixels_per_image), mix_seed(cfg.seed, 1000 + j)));

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();

  TrainResult res;
  res.best = params;
  int bad_checks = 0;
  double train_acc = 0;
  int train_count = 0;
  std::vector<Example> batch;
  std::vector<PixelSample> samples;
  for (int step = 1; step <= cfg.max_steps; ++step) {
    batch.clear();
    samples.clear();
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        cursor = 0;
      }
      const auto& ex = train_set[order[cursor++]];
      const bool flip = cfg.flip && rng.uniform() < 0.5;
      batch.push_back(flip ? flip_horizontal(ex) : ex);
      samples.push_back(sample_pixels(ex.image.height, ex.image.width,
                                      static_cast<std::size_t>(cfg.pixels_per_image), rng.next_u64()));
    }
    const StepResult sr = cfg.loss == LossKind::Similarity ? similarity_step(batch, samples, params, state, cfg)
                                                           : baseline_step(batch, samples, params, state, cfg);
    res.fallbacks += sr.fallbacks;
    train_acc += sr.loss;
    train_count += 1;
    res.steps_run = step;

    if (step % cfg.val_interval != 0 && step != cfg.max_steps) continue;
    const auto val = batch_objective(cfg.loss, val_set, val_samples, params, false);
    LogRecord rec{step, train_acc / train_count, val.loss,
                  head == HeadKind::Embedding ? params.kernel().sigma_sq() : std::numeric_limits<double>::quiet_NaN()};
    res.log.records.push_back(rec);
    train_acc = 0;
    train_count = 0;
    if (val.loss < res.best_val_loss) {
      res.best_val_loss = val.loss;
      res.best = params;
      res.best_step = step;
      bad_checks = 0;
    } else if (++bad_checks >= cfg.patience) {
      res.stopped_early = true;
      break;
    }
  }
  res.last = std::move(params);
  return res;
}

/// Manifest-driven training. Train and validation scenes must not overlap.
inline TrainResult train(const TrainConfig& cfg, const std::filesystem::path& train_manifest,
                         const std::filesystem::path& val_manifest) {
  std::vector<SceneFiles> train_files, val_files;
  const auto train_set = load_examples(train_manifest, cfg.flow_bound, &train_files);
  const auto val_set = load_examples(val_manifest, cfg.flow_bound, &val_files);
  std::set<std::filesystem::path> seen;
  for (const auto& f : train_files) seen.insert(std::filesystem::weakly_canonical(f.image));
  for (const auto& f : val_files)
    if (seen.count(std::filesystem::weakly_canonical(f.image)))
      throw Error("validation scene also appears in the training set: " + f.image.string());
  return train(cfg, train_set, val_set);
}

// ---------------------------------------------------------------------------
// Grouping evaluation

enum class FeatureKind { Embedding, Hypercolumn };

struct GroupingReport {
  double mean = 0;
  std::vector<double> per_scene;
};

inline Matrix<double> pixel_features(const Image& image, const PixelSample& sample, const ModelParams& params,
                                     FeatureKind kind) {
  if (kind == FeatureKind::Embedding) return run_embedding(image, sample, params).embeddings.vectors;
  return hypercolumns(forward_backbone(image, params), sample);
}

inline GroupingReport evaluate_grouping(const ModelParams& params, std::span<const Scene> scenes, std::size_t n_s,
                                        std::uint64_t seed, FeatureKind kind = FeatureKind::Embedding) {
  if (scenes.empty()) throw Error("evaluate_grouping: no scenes");
  GroupingReport rep;
  for (std::size_t j = 0; j < scenes.size(); ++j) {
    const auto& s = scenes[j];
    const auto sample = sample_pixels(s.image.height, s.image.width, n_s, mix_seed(seed, j));
    const auto feats = pixel_features(s.image, sample, params, kind);
    rep.per_scene.push_back(grouping_margin(feats, mask_ids(s.masks, sample.coords)));
  }
  double sum = 0;
  for (double m : rep.per_scene) sum += m;
  rep.mean = sum / static_cast<double>(rep.per_scene.size());
  return rep;
}

inline GroupingReport evaluate_grouping_run(const ModelParams& params, const std::filesystem::path& manifest,
                                            std::size_t n_s, std::uint64_t seed,
                                            FeatureKind kind = FeatureKind::Embedding) {
  const auto files = read_manifest(manifest);
  if (files.empty()) throw Error("manifest lists no scenes: " + manifest.string());
  std::vector<Scene> scenes;
  for (const auto& f : files) scenes.push_back(load_scene(f));
  return evaluate_grouping(params, scenes, n_s, seed, kind);
}

}  // namespace cpfs
