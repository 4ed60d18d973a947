#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "cpfs/gradcheck.hpp"
#include "cpfs/kernel_core.hpp"

using namespace cpfs;

namespace {

using Flows = std::vector<Vec2<double>>;

Matrix<double> matrix(std::size_t r, std::size_t c, std::initializer_list<double> v) {
  Matrix<double> m(r, c);
  std::copy(v.begin(), v.end(), m.data().begin());
  return m;
}

Flows random_flows(Rng& rng, std::size_t n) {
  Flows f(n);
  for (auto& v : f) v = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
  return f;
}

Matrix<double> random_embeddings(Rng& rng, std::size_t n, std::size_t d) {
  Matrix<double> m(n, d);
  for (auto& v : m.data()) v = rng.normal();
  return m;
}

// Textbook column softmax, one column at a time.
Matrix<double> naive_softmax(const Matrix<double>& k, double diag) {
  const std::size_t n = k.rows();
  Matrix<double> s(n, n);
  for (std::size_t q = 0; q < n; ++q) {
    double total = 0;
    for (std::size_t p = 0; p < n; ++p) total += std::exp(p == q ? diag : k(p, q));
    for (std::size_t p = 0; p < n; ++p) s(p, q) = std::exp(p == q ? diag : k(p, q)) / total;
  }
  return s;
}

}  // namespace

TEST(FlowKernel, IdenticalFlowsGiveOne) {
  Flows f{{0.3, -0.2}, {0.3, -0.2}};
  const auto k = flow_kernel_matrix<double>(f, KernelParams<double>::from_sigma_sq(0.0036));
  EXPECT_EQ(k(0, 1), 1.0);
  EXPECT_EQ(k(0, 0), 1.0);
}

TEST(FlowKernel, LearnedBandwidthExample) {
  Flows f{{0.0, 0.0}, {0.06, 0.0}};
  const auto k = flow_kernel_matrix<double>(f, KernelParams<double>::from_sigma_sq(0.0036));
  EXPECT_NEAR(k(0, 1), 0.606530659712633423603799534991, 1e-12);
}

TEST(FlowKernel, MonotoneDecreasingInDistance) {
  const auto kp = KernelParams<double>::from_sigma_sq(0.25);
  double prev = 1.0;
  for (int i = 1; i <= 60; ++i) {
    Flows f{{0, 0}, {0.05 * i, 0}};
    const double v = flow_kernel_matrix<double>(f, kp)(0, 1);
    EXPECT_LT(v, prev);
    EXPECT_GT(v, 0.0);
    prev = v;
  }
}

TEST(FlowKernel, DegenerateSignal) {
  Flows f{{-1, -1}, {1, 1}, {0, 1}};
  KernelDiagnostics diag;
  flow_kernel_matrix<double>(f, KernelParams<double>{-40.0}, &diag);
  EXPECT_TRUE(diag.degenerate);
  flow_kernel_matrix<double>(f, KernelParams<double>::from_sigma_sq(0.25), &diag);
  EXPECT_FALSE(diag.degenerate);
}

TEST(FlowKernel, SigmaPositiveForExtremeRho) {
  EXPECT_GT(KernelParams<double>{-700.0}.sigma(), 0.0);
  EXPECT_GT(KernelParams<double>{0.0}.sigma(), 0.0);
  EXPECT_NEAR(KernelParams<double>::from_sigma_sq(0.25).sigma_sq(), 0.25, 1e-15);
}

TEST(EmbeddingKernel, Examples) {
  const auto k = embedding_kernel_matrix(matrix(3, 2, {2, 0, 0, 3, 5, 0}));
  EXPECT_DOUBLE_EQ(k(0, 2), 0.25);
  EXPECT_EQ(k(0, 1), 0.0);
  EXPECT_EQ(k(1, 1), 0.25);
}

TEST(EmbeddingKernel, RejectsZeroRowWithIndex) {
  try {
    embedding_kernel_matrix(matrix(3, 2, {1, 0, 0, 0, 0, 1}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos) << e.what();
  }
}

TEST(Kernels, SymmetryAndRange) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 1 + rng.below(30);
    const auto kf = flow_kernel_matrix<double>(random_flows(rng, n), KernelParams<double>::from_sigma_sq(0.1));
    const auto ke = embedding_kernel_matrix(random_embeddings(rng, n, 2 + rng.below(10)));
    for (std::size_t p = 0; p < n; ++p) {
      EXPECT_EQ(kf(p, p), 1.0);
      for (std::size_t q = 0; q < n; ++q) {
        EXPECT_LE(std::fabs(kf(p, q) - kf(q, p)), 1e-12);
        EXPECT_LE(std::fabs(ke(p, q) - ke(q, p)), 1e-12);
        EXPECT_GT(kf(p, q), 0.0);
        EXPECT_LE(kf(p, q), 1.0);
        EXPECT_GE(ke(p, q), -0.25);
        EXPECT_LE(ke(p, q), 0.25);
      }
    }
  }
}

TEST(ColumnSoftmax, SingleElement) {
  const auto s = column_softmax(KernelMatrix<double>{matrix(1, 1, {1})}, 0.0);
  EXPECT_EQ(s(0, 0), 1.0);
}

TEST(ColumnSoftmax, TwoByTwoFlow) {
  const auto s = flow_softmax(KernelMatrix<double>{matrix(2, 2, {1, 1, 1, 1})});
  const double e = std::numbers::e;
  EXPECT_NEAR(s(1, 0), e / (e + 1), 1e-15);
  EXPECT_NEAR(s(0, 0), 1 / (e + 1), 1e-15);
  EXPECT_NEAR(s(1, 0), 0.731058578630004879, 1e-15);
  EXPECT_NEAR(s(0, 0), 0.268941421369995121, 1e-15);
}

TEST(ColumnSoftmax, MatchesNaiveAndIsStochastic) {
  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 1 + rng.below(40);
    const auto ke = embedding_kernel_matrix(random_embeddings(rng, n, 4));
    const auto kf = flow_kernel_matrix<double>(random_flows(rng, n), KernelParams<double>::from_sigma_sq(0.05));
    const auto se = embedding_softmax(ke);
    const auto sf = flow_softmax(kf);
    const auto ne = naive_softmax(ke.entries, -0.75);
    const auto nf = naive_softmax(kf.entries, 0.0);
    for (std::size_t q = 0; q < n; ++q) {
      double ce = 0, cf = 0;
      for (std::size_t p = 0; p < n; ++p) {
        EXPECT_NEAR(se(p, q), ne(p, q), 1e-14);
        EXPECT_NEAR(sf(p, q), nf(p, q), 1e-14);
        EXPECT_GT(se(p, q), 0.0);
        EXPECT_GT(sf(p, q), 0.0);
        ce += se(p, q);
        cf += sf(p, q);
      }
      EXPECT_NEAR(ce, 1.0, 1e-10);
      EXPECT_NEAR(cf, 1.0, 1e-10);
    }
  }
}

TEST(ColumnSoftmax, LogMatchesLogOfProbabilities) {
  Rng rng(5);
  const auto ke = embedding_kernel_matrix(random_embeddings(rng, 12, 3));
  const auto s = embedding_softmax(ke);
  const auto l = column_log_softmax(ke, -0.75);
  for (std::size_t i = 0; i < l.size(); ++i) EXPECT_NEAR(l.data()[i], std::log(s.entries.data()[i]), 1e-13);
}

TEST(CrossPixelLoss, SinglePixelIsZero) {
  Flows f{{0.5, 0.5}};
  EXPECT_EQ(cross_pixel_loss<double>(f, matrix(1, 3, {1, 2, 3}), KernelParams<double>{}), 0.0);
}

TEST(CrossPixelLoss, EqualDistributionsGiveEntropy) {
  Rng rng(2);
  const auto sf = flow_softmax(flow_kernel_matrix<double>(random_flows(rng, 9), KernelParams<double>{}));
  double h = 0;
  for (std::size_t q = 0; q < 9; ++q)
    for (std::size_t p = 0; p < 9; ++p) h -= sf(p, q) * std::log(sf(p, q));
  EXPECT_NEAR(column_cross_entropy(sf, sf), h, 1e-12);
  EXPECT_NEAR(column_entropy(sf), h, 1e-12);
}

TEST(CrossPixelLoss, EntropyLowerBound) {
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    const auto flows = random_flows(rng, 8);
    const auto emb = random_embeddings(rng, 8, 4);
    const auto kp = KernelParams<double>::from_sigma_sq(rng.uniform(0.01, 1.0));
    const double l = cross_pixel_loss<double>(flows, emb, kp);
    const double h = column_entropy(flow_softmax(flow_kernel_matrix<double>(flows, kp)));
    EXPECT_GE(l, h - 1e-12);
    EXPECT_TRUE(std::isfinite(l));
    // Independent evaluation from the textbook formulas.
    const auto se = naive_softmax(embedding_kernel_matrix(emb).entries, -0.75);
    const auto sf = naive_softmax(flow_kernel_matrix<double>(flows, kp).entries, 0.0);
    double ref = 0;
    for (std::size_t i = 0; i < se.size(); ++i) ref -= sf.data()[i] * std::log(se.data()[i]);
    EXPECT_NEAR(l, ref, 1e-11);
  }
}

TEST(CrossPixelLoss, RejectsSizeMismatch) {
  Flows f{{0, 0}, {1, 1}};
  EXPECT_THROW(cross_pixel_loss<double>(f, matrix(3, 2, {1, 0, 0, 1, 1, 1}), KernelParams<double>{}), Error);
  EXPECT_THROW(loss_gradients<double>(f, matrix(3, 2, {1, 0, 0, 1, 1, 1}), KernelParams<double>{}), Error);
}

TEST(CrossPixelLoss, Invariances) {
  Rng rng(21);
  const std::size_t n = 10, d = 3;
  const auto flows = random_flows(rng, n);
  const auto emb = random_embeddings(rng, n, d);
  const auto kp = KernelParams<double>::from_sigma_sq(0.2);
  const double base = cross_pixel_loss<double>(flows, emb, kp);

  // Rotation about a random axis (Rodrigues), applied to every row.
  double ax[3] = {rng.normal(), rng.normal(), rng.normal()};
  const double an = std::sqrt(ax[0] * ax[0] + ax[1] * ax[1] + ax[2] * ax[2]);
  for (auto& a : ax) a /= an;
  const double th = 1.1, c = std::cos(th), s = std::sin(th);
  const double r[3][3] = {{c + ax[0] * ax[0] * (1 - c), ax[0] * ax[1] * (1 - c) - ax[2] * s, ax[0] * ax[2] * (1 - c) + ax[1] * s},
                          {ax[1] * ax[0] * (1 - c) + ax[2] * s, c + ax[1] * ax[1] * (1 - c), ax[1] * ax[2] * (1 - c) - ax[0] * s},
                          {ax[2] * ax[0] * (1 - c) - ax[1] * s, ax[2] * ax[1] * (1 - c) + ax[0] * s, c + ax[2] * ax[2] * (1 - c)}};
  Matrix<double> rotated(n, d), scaled(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t k = 0; k < d; ++k) rotated(i, j) += r[j][k] * emb(i, k);
      scaled(i, j) = 7.5 * emb(i, j);
    }
  EXPECT_NEAR(cross_pixel_loss<double>(flows, rotated, kp), base, 1e-9);
  const auto ke = embedding_kernel_matrix(emb), kr = embedding_kernel_matrix(rotated);
  for (std::size_t i = 0; i < ke.entries.size(); ++i) EXPECT_NEAR(ke.entries.data()[i], kr.entries.data()[i], 1e-9);
  EXPECT_NEAR(cross_pixel_loss<double>(flows, scaled, kp), base, 1e-9);

  Flows shifted = flows;
  for (auto& f : shifted) f = {f[0] + 0.37, f[1] - 1.2};
  EXPECT_NEAR(cross_pixel_loss<double>(shifted, emb, kp), base, 1e-9);
  const auto kf = flow_kernel_matrix<double>(flows, kp), ks = flow_kernel_matrix<double>(shifted, kp);
  for (std::size_t i = 0; i < kf.entries.size(); ++i) EXPECT_NEAR(kf.entries.data()[i], ks.entries.data()[i], 1e-9);
}

TEST(LossGradients, SinglePixelIsZero) {
  Flows f{{0.1, 0.2}};
  const auto g = loss_gradients<double>(f, matrix(1, 3, {1, 2, 3}), KernelParams<double>{});
  EXPECT_EQ(g.loss, 0.0);
  EXPECT_EQ(g.d_rho, 0.0);
  for (double v : g.d_embeddings.data()) EXPECT_EQ(v, 0.0);
}

TEST(LossGradients, IdenticalFlowsGiveZeroRhoGradient) {
  Rng rng(4);
  Flows f(6, Vec2<double>{0.3, -0.1});
  EXPECT_EQ(loss_gradients<double>(f, random_embeddings(rng, 6, 4), KernelParams<double>{}).d_rho, 0.0);
}

TEST(LossGradients, LossFieldMatchesForwardPass) {
  Rng rng(6);
  const auto flows = random_flows(rng, 7);
  const auto emb = random_embeddings(rng, 7, 5);
  const auto kp = KernelParams<double>::from_sigma_sq(0.3);
  EXPECT_NEAR(loss_gradients<double>(flows, emb, kp).loss, cross_pixel_loss<double>(flows, emb, kp), 1e-12);
}

TEST(LossGradients, FiniteDifferenceSeed17) {
  const auto rep = check_loss_gradients(random_loss_instance(17, 8, 4));
  EXPECT_TRUE(rep.passed()) << rep.max_rel_err();
}

TEST(LossGradients, FiniteDifferenceSweep) {
  for (std::size_t n : {2, 5, 8})
    for (std::size_t d : {3, 16})
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto rep = check_loss_gradients(random_loss_instance(seed * 100 + n * 10 + d, n, d));
        EXPECT_LE(rep.max_rel_err(), 1e-4) << "n=" << n << " d=" << d << " seed=" << seed;
      }
}

TEST(LossGradients, CorruptionIsDetected) {
  const auto inst = random_loss_instance(1, 5, 3);
  const auto rep = check_loss_gradients(inst, 1e-5, 1e-4, "d_rho");
  ASSERT_FALSE(rep.passed());
  EXPECT_EQ(rep.failing_blocks(), std::vector<std::string>{"d_rho"});
}

TEST(Kta, Examples) {
  Rng rng(1);
  const auto k = embedding_kernel_matrix(random_embeddings(rng, 5, 3));
  EXPECT_NEAR(kta(k, k), 1.0, 1e-15);
  KernelMatrix<double> k3{k.entries};
  for (auto& v : k3.entries.data()) v *= 3;
  EXPECT_NEAR(kta(k, k3), 1.0, 1e-15);
  const KernelMatrix<double> eye{matrix(2, 2, {1, 0, 0, 1})}, swap{matrix(2, 2, {0, 1, 1, 0})};
  EXPECT_EQ(kta(eye, swap), 0.0);
}

TEST(Kta, RangeAndErrors) {
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    const auto a = embedding_kernel_matrix(random_embeddings(rng, 6, 3));
    const auto b = embedding_kernel_matrix(random_embeddings(rng, 6, 3));
    const double v = kta(a, b);
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  const KernelMatrix<double> zero{Matrix<double>(2, 2)}, eye{matrix(2, 2, {1, 0, 0, 1})};
  EXPECT_THROW(kta(zero, eye), Error);
  EXPECT_THROW(kta(eye, KernelMatrix<double>{Matrix<double>(3, 3)}), Error);
}
