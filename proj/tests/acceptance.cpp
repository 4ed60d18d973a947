// Acceptance runner: one PASS/FAIL line per criterion.
//   acceptance                 run all criteria
//   acceptance --criterion N   run criterion N only (exit status 1 on FAIL)

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numbers>
#include <sstream>

#include "cpfs/cli.hpp"

using namespace cpfs;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kC1Tolerance = 1e-4;
constexpr double kC1Step = 1e-5;
constexpr double kC1Seconds = 5;
constexpr double kC2Tolerance = 1e-3;
constexpr double kC2Step = 1e-6;
constexpr double kC2Seconds = 30;
constexpr double kC3Tolerance = 1e-9;
constexpr double kC4SumTolerance = 1e-10;
constexpr double kC4EqualityTolerance = 1e-12;
constexpr double kC5Tolerance = 1.0 / 128;
constexpr double kC6Tolerance = 1e-12;
constexpr int kC7Steps = 500;
constexpr double kC7Ratio = 0.5;
constexpr double kC7Seconds = 120;
constexpr int kC8TrainScenes = 200;
constexpr int kC8ValScenes = 20;
constexpr int kC8HeldOutScenes = 20;
constexpr int kC8Steps = 600;
constexpr double kC8Margin = 0.3;
constexpr double kC8Seconds = 15 * 60;
constexpr double kC9Tolerance = 1e-9;
constexpr int kC9Steps = 200;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool report(int id, bool ok, const std::string& detail) {
  std::printf("criterion %d: %s  %s\n", id, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  return ok;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "cpfs_acceptance" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Matrix<double> gaussian_rows(Rng& rng, std::size_t n, std::size_t d) {
  Matrix<double> m(n, d);
  for (auto& v : m.data()) v = rng.normal();
  return m;
}

// Random orthogonal matrix: Gram-Schmidt on Gaussian columns.
Matrix<double> random_orthogonal(Rng& rng, std::size_t d) {
  Matrix<double> q = gaussian_rows(rng, d, d);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += q(i, j) * q(i, k);
      for (std::size_t i = 0; i < d; ++i) q(i, j) -= dot * q(i, k);
    }
    double norm = 0;
    for (std::size_t i = 0; i < d; ++i) norm += q(i, j) * q(i, j);
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < d; ++i) q(i, j) /= norm;
  }
  return q;
}

Matrix<double> times(const Matrix<double>& a, const Matrix<double>& b) {
  Matrix<double> c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k)
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += a(i, k) * b(k, j);
  return c;
}

bool criterion1() {
  const std::size_t sizes[] = {2, 5, 8};
  const std::size_t dims[] = {3, 16};
  const auto t0 = Clock::now();
  double worst = 0;
  for (int s = 0; s < 10; ++s) {
    const auto inst = random_loss_instance(mix_seed(101, s), sizes[s % 3], dims[(s / 3) % 2]);
    worst = std::max(worst, check_loss_gradients(inst, kC1Step, kC1Tolerance).max_rel_err());
  }
  const double secs = seconds_since(t0);
  return report(1, worst <= kC1Tolerance && secs < kC1Seconds,
                fmt("loss-level gradients: max rel err %.3e (<= %.0e), %.2f s (< %.0f s)", worst, kC1Tolerance, secs,
                    kC1Seconds));
}

bool criterion2() {
  const auto t0 = Clock::now();
  const auto inst = random_chain_instance(202, HeadKind::Embedding, 16, 4);
  const auto rep = check_chain_gradients(inst, 10, 203, kC2Step, kC2Tolerance);
  const double secs = seconds_since(t0);
  return report(2, rep.passed() && secs < kC2Seconds,
                fmt("full-chain gradients (16x16, n_s=4, 10 probes): max rel err %.3e (<= %.0e), %.2f s (< %.0f s)",
                    rep.max_rel_err(), kC2Tolerance, secs, kC2Seconds));
}

bool criterion3() {
  Rng rng(303);
  double rot = 0, scale = 0, shift = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.below(31), d = 2 + rng.below(15);
    std::vector<Vec2<double>> flows(n);
    for (auto& f : flows) f = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const auto emb = gaussian_rows(rng, n, d);
    const auto kp = KernelParams<double>::from_sigma_sq(rng.uniform(0.01, 1.0));
    const double base = cross_pixel_loss<double>(flows, emb, kp);

    rot = std::max(rot, std::fabs(cross_pixel_loss<double>(flows, times(emb, random_orthogonal(rng, d)), kp) - base));

    Matrix<double> scaled = emb;
    const double c = std::exp(rng.uniform(-3, 3));
    for (auto& v : scaled.data()) v *= c;
    scale = std::max(scale, std::fabs(cross_pixel_loss<double>(flows, scaled, kp) - base));

    const Vec2<double> offset{rng.uniform(-2, 2), rng.uniform(-2, 2)};
    auto moved = flows;
    for (auto& f : moved) f = {f[0] + offset[0], f[1] + offset[1]};
    shift = std::max(shift, std::fabs(cross_pixel_loss<double>(moved, emb, kp) - base));
  }
  const bool ok = rot <= kC3Tolerance && scale <= kC3Tolerance && shift <= kC3Tolerance;
  return report(3, ok,
                fmt("invariances over 100 instances each: rotation %.2e, scaling %.2e, flow shift %.2e (<= %.0e)", rot,
                    scale, shift, kC3Tolerance));
}

bool criterion4() {
  Rng rng(404);
  double worst_sum = 0, worst_gap = std::numeric_limits<double>::infinity(), worst_eq = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.below(63), d = 2 + rng.below(15);
    std::vector<Vec2<double>> flows(n);
    for (auto& f : flows) f = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const auto kp = KernelParams<double>::from_sigma_sq(rng.uniform(0.01, 1.0));
    const auto sf = flow_softmax(flow_kernel_matrix<double>(flows, kp));
    const auto se = embedding_softmax(embedding_kernel_matrix(gaussian_rows(rng, n, d)));
    for (const auto* s : {&sf, &se})
      for (std::size_t q = 0; q < n; ++q) {
        double sum = 0;
        for (std::size_t p = 0; p < n; ++p) sum += (*s)(p, q);
        worst_sum = std::max(worst_sum, std::fabs(sum - 1));
      }
    const double h = column_entropy(sf);
    worst_gap = std::min(worst_gap, column_cross_entropy(sf, se) - h);
    worst_eq = std::max(worst_eq, std::fabs(column_cross_entropy(sf, sf) - h));
  }
  const bool ok = worst_sum <= kC4SumTolerance && worst_gap >= 0 && worst_eq <= kC4EqualityTolerance;
  return report(4, ok,
                fmt("column sums |s-1| %.2e (<= %.0e), min L-H %.3e (>= 0), |L-H| at S_phi=S_f %.2e (<= %.0e)",
                    worst_sum, kC4SumTolerance, worst_gap, worst_eq, kC4EqualityTolerance));
}

bool criterion5() {
  constexpr int kPoints = 100000;
  double worst = 0;
  for (int i = 0; i < kPoints; ++i) {
    const double f = -500.0 + 1000.0 * i / (kPoints - 1);
    worst = std::max(worst, std::fabs(decode_component(encode_component(f)) - f));
  }
  Rng rng(505);
  const int h = 37, w = 53;
  std::vector<Vec2<double>> data(static_cast<std::size_t>(h) * w);
  for (auto& f : data) f = {rng.uniform(-500, 500), rng.uniform(-500, 500)};
  const auto enc = encode_flow(FlowField(w, h, data));
  const auto path = scratch("c5") / "field.flo16";
  write_flow_file(enc, path);
  const bool exact = read_flow_file(path) == enc;
  return report(5, worst <= kC5Tolerance && exact,
                fmt("codec: max round-trip error %.6f over 1e5 points (<= 1/128), .flo16 codes %s", worst,
                    exact ? "bit-exact" : "differ"));
}

bool criterion6() {
  Rng rng(606);
  const auto k = embedding_kernel_matrix(gaussian_rows(rng, 12, 4));
  KernelMatrix<double> k3{k.entries};
  for (auto& v : k3.entries.data()) v *= 3;
  Matrix<double> eye(2, 2), swap(2, 2);
  eye(0, 0) = eye(1, 1) = 1;
  swap(0, 1) = swap(1, 0) = 1;
  const double self = kta(k, k), scaled = kta(k, k3), perm = kta(KernelMatrix<double>{eye}, KernelMatrix<double>{swap});
  const bool ok = std::fabs(self - 1) <= kC6Tolerance && std::fabs(scaled - 1) <= kC6Tolerance && perm == 0.0;
  return report(6, ok, fmt("kta(K,K)=%.15f kta(K,3K)=%.15f kta(I,P)=%g", self, scaled, perm));
}

bool criterion7() {
  const auto t0 = Clock::now();
  auto cfg = TrainConfig::defaults_for(LossKind::Similarity);
  cfg.batch_size = 1;
  const SceneConfig scene_cfg;
  const std::vector<Example> batch{make_example(generate_scene(scene_cfg, 5), cfg.flow_bound)};
  const std::vector<PixelSample> samples{
      sample_pixels(scene_cfg.height, scene_cfg.width, static_cast<std::size_t>(cfg.pixels_per_image), 7)};
  auto params = init_params(cfg.arch, HeadKind::Embedding, 5);
  auto state = AdamState::for_params(params);

  auto floor_of = [&](const ModelParams& p) {
    const auto flows = flows_at(batch[0].flow, samples[0]);
    return column_entropy(flow_softmax(flow_kernel_matrix<double>(flows, p.kernel())));
  };
  const double loss0 = batch_objective(LossKind::Similarity, batch, samples, params, false).loss;
  const double floor0 = floor_of(params);
  for (int step = 0; step < kC7Steps; ++step) similarity_step(batch, samples, params, state, cfg);
  const double loss_end = batch_objective(LossKind::Similarity, batch, samples, params, false).loss;
  const double floor_end = floor_of(params);
  const double secs = seconds_since(t0);
  const double ratio = loss_end / loss0;
  const double excess = (loss_end - floor_end) / (loss0 - floor0);
  return report(7, ratio <= kC7Ratio && secs < kC7Seconds,
                fmt("overfit scene 5: loss %.4f -> %.4f, ratio %.4f (<= %.2f), %.1f s (< %.0f s); "
                    "entropy floor %.4f -> %.4f, excess loss ratio %.4f",
                    loss0, loss_end, ratio, kC7Ratio, secs, kC7Seconds, floor0, floor_end, excess));
}

bool criterion8() {
  const auto dir = scratch("c8");
  const SceneConfig scene_cfg;
  const auto train_manifest = generate_dataset(scene_cfg, kC8TrainScenes, 801, dir / "train");
  const auto val_manifest = generate_dataset(scene_cfg, kC8ValScenes, 802, dir / "val");
  const auto test_manifest = generate_dataset(scene_cfg, kC8HeldOutScenes, 803, dir / "test");

  auto run = [&](LossKind kind, double* secs) {
    auto cfg = TrainConfig::defaults_for(kind);
    cfg.max_steps = kC8Steps;
    cfg.val_interval = 50;
    cfg.seed = 8;
    const auto t0 = Clock::now();
    auto res = train(cfg, train_manifest, val_manifest);
    *secs = seconds_since(t0);
    return res;
  };
  double sim_secs = 0, base_secs = 0;
  const auto sim = run(LossKind::Similarity, &sim_secs);
  const auto sim_margin = evaluate_grouping_run(sim.best, test_manifest, 512, 804).mean;
  const auto init_margin =
      evaluate_grouping_run(init_params(ArchConfig{}, HeadKind::Embedding, 8), test_manifest, 512, 804).mean;
  const auto base = run(LossKind::Baseline, &base_secs);
  const auto base_margin = evaluate_grouping_run(base.best, test_manifest, 512, 804, FeatureKind::Hypercolumn).mean;
  return report(8, sim_margin >= kC8Margin && sim_secs <= kC8Seconds,
                fmt("held-out grouping margin %.4f (>= %.1f) after %d steps (best step %d) in %.0f s (<= %.0f s); "
                    "untrained %.4f; baseline hypercolumn margin %.4f (%d steps, %.0f s, reported)",
                    sim_margin, kC8Margin, sim.steps_run, sim.best_step, sim_secs, kC8Seconds, init_margin,
                    base_margin, base.steps_run, base_secs));
}

bool criterion9() {
  auto params = init_params(ArchConfig{}, HeadKind::FlowClassifier, 9);
  for (const char* n : {"cls.x.weight", "cls.x.bias", "cls.y.weight", "cls.y.bias"})
    for (auto& v : params.get(n).values) v = 0;
  const SceneConfig scene_cfg;
  const auto ex = make_example(generate_scene(scene_cfg, 9), kDefaultFlowBound);
  const auto sample = sample_pixels(scene_cfg.height, scene_cfg.width, 512, 9);
  std::vector<std::array<int, 2>> labels;
  for (const auto& p : sample.coords) labels.push_back(ex.classes.at(p.row, p.col));
  const double uniform = classifier_loss(ex.image, sample, labels, params, false).loss;
  const double anchor = 2 * std::log(16.0);

  auto cfg = TrainConfig::defaults_for(LossKind::Baseline);
  const std::vector<Example> batch{ex};
  const std::vector<PixelSample> samples{sample};
  auto trained = init_params(cfg.arch, HeadKind::FlowClassifier, 9);
  auto state = AdamState::for_params(trained);
  const double start = batch_objective(LossKind::Baseline, batch, samples, trained, false).loss;
  for (int step = 0; step < kC9Steps; ++step) baseline_step(batch, samples, trained, state, cfg);
  const double end = batch_objective(LossKind::Baseline, batch, samples, trained, false).loss;
  return report(9, std::fabs(uniform - anchor) <= kC9Tolerance && end < start,
                fmt("uniform logits loss %.12f vs 2 ln 16 %.12f (<= %.0e); baseline loss %.4f -> %.4f over %d steps",
                    uniform, anchor, kC9Tolerance, start, end, kC9Steps));
}

bool criterion10() {
  const auto dir = scratch("c10");
  auto cli = [](std::vector<std::string> args) {
    std::vector<const char*> argv{"cpfs"};
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int rc = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    if (rc != 0) std::fprintf(stderr, "%s", err.str().c_str());
    return rc;
  };
  bool ok = cli({"gen", "--count", "6", "--seed", "11", "--out", (dir / "train").string()}) == 0 &&
            cli({"gen", "--count", "2", "--seed", "12", "--out", (dir / "val").string()}) == 0;
  for (const char* run : {"a", "b"})
    ok = ok && cli({"train", "--train", (dir / "train" / kManifestName).string(), "--val",
                    (dir / "val" / kManifestName).string(), "--steps", "20", "--val-interval", "5", "--batch", "4",
                    "--pixels", "128", "--flip", "--seed", "3", "--out", (dir / run).string()}) == 0;
  if (!ok) return report(10, false, "train runs failed");
  const bool log_same = read_file_bytes(dir / "a" / "train_log.csv") == read_file_bytes(dir / "b" / "train_log.csv");
  const bool ckpt_same = read_file_bytes(dir / "a" / "model.cpm") == read_file_bytes(dir / "b" / "model.cpm");
  return report(10, log_same && ckpt_same,
                fmt("two identical-seed train runs: log %s, checkpoint %s", log_same ? "identical" : "differs",
                    ckpt_same ? "identical" : "differs"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cpfs acceptance criteria"};
  int only = 0;
  app.add_option("--criterion", only, "run a single criterion (1-10)")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::function<bool()>> all{criterion1, criterion2, criterion3, criterion4, criterion5,
                                               criterion6, criterion7, criterion8, criterion9, criterion10};
  int failures = 0;
  for (int i = 1; i <= 10; ++i) {
    if (only != 0 && only != i) continue;
    try {
      failures += !all[i - 1]();
    } catch (const std::exception& e) {
      report(i, false, std::string("error: ") + e.what());
      ++failures;
    }
  }
  return failures == 0 ? 0 : 1;
}
