#pragma once

// Cross-pixel flow-similarity objective.
//
// Flow side:      K_f(p,q) = exp(-|f_p - f_q|^2 / (2 sigma^2)),  sigma = exp(rho)
// Embedding side: K_e(p,q) = 1/4 * cos(phi_p, phi_q)
//
// Each kernel column is turned into a distribution by a softmax in which the
// diagonal logit is replaced by (kernel maximum - 1): 0 for K_f, -3/4 for K_e.
// The loss is the cross entropy from S_f to S_e summed over columns.

#include <cmath>
#include <concepts>
#include <sstream>
#include <span>
#include <vector>

#include "cpfs/common.hpp"

namespace cpfs {

inline constexpr double kEmbeddingKernelScale = 0.25;
inline constexpr double kFlowDiagLogit = 1.0 - 1.0;
inline constexpr double kEmbeddingDiagLogit = kEmbeddingKernelScale - 1.0;
inline constexpr double kMinEmbeddingNorm = 1e-12;

template <std::floating_point Real>
struct KernelParams {
  Real rho = Real(0.5) * std::log(Real(0.25));  // sigma^2 = 0.25

  Real sigma() const { return std::exp(rho); }
  Real sigma_sq() const { return std::exp(Real(2) * rho); }

  static KernelParams from_sigma_sq(Real sigma_sq) {
    if (!(sigma_sq > 0)) throw Error("kernel bandwidth must be positive");
    return {Real(0.5) * std::log(sigma_sq)};
  }
};

template <std::floating_point Real>
struct EmbeddingField {
  Matrix<Real> vectors;  // n x D
  std::vector<PixelCoord> coords;

  std::size_t size() const { return vectors.rows(); }
  std::size_t dim() const { return vectors.cols(); }
};

template <std::floating_point Real>
struct KernelMatrix {
  Matrix<Real> entries;
  std::size_t size() const { return entries.rows(); }
  Real operator()(std::size_t p, std::size_t q) const { return entries(p, q); }
};

/// Column-stochastic: every column is a probability distribution over rows.
template <std::floating_point Real>
struct StochasticMatrix {
  Matrix<Real> entries;
  std::size_t size() const { return entries.rows(); }
  Real operator()(std::size_t p, std::size_t q) const { return entries(p, q); }
};

template <std::floating_point Real>
struct LossGradients {
  Matrix<Real> d_embeddings;
  Real d_rho = 0;
  Real loss = 0;
};

struct KernelDiagnostics {
  bool degenerate = false;  // every off-diagonal entry underflowed to zero
};

template <std::floating_point Real>
KernelMatrix<Real> flow_kernel_matrix(std::span<const Vec2<Real>> flows, const KernelParams<Real>& params,
                                      KernelDiagnostics* diag = nullptr) {
  const std::size_t n = flows.size();
  if (n == 0) throw Error("flow_kernel_matrix: empty input");
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(flows[i][0]) || !std::isfinite(flows[i][1]))
      throw Error("flow_kernel_matrix: non-finite flow at index " + std::to_string(i));
  const Real inv_two_sigma_sq = Real(1) / (Real(2) * params.sigma_sq());
  KernelMatrix<Real> k{Matrix<Real>(n, n)};
  bool all_zero = n > 1;
  for (std::size_t p = 0; p < n; ++p) {
    k.entries(p, p) = Real(1);
    for (std::size_t q = p + 1; q < n; ++q) {
      const Real dx = flows[p][0] - flows[q][0];
      const Real dy = flows[p][1] - flows[q][1];
      const Real v = std::exp(-(dx * dx + dy * dy) * inv_two_sigma_sq);
      k.entries(p, q) = v;
      k.entries(q, p) = v;
      all_zero = all_zero && v == Real(0);
    }
  }
  if (diag) diag->degenerate = all_zero;
  return k;
}

/// Rows of `vectors` scaled to unit L2 norm. Throws on a (near) zero row.
template <std::floating_point Real>
Matrix<Real> unit_rows(const Matrix<Real>& vectors, std::vector<Real>* norms = nullptr) {
  Matrix<Real> out = vectors;
  if (norms) norms->assign(vectors.rows(), Real(0));
  for (std::size_t i = 0; i < vectors.rows(); ++i) {
    Real sq = 0;
    for (Real v : vectors.row(i)) sq += v * v;
    const Real norm = std::sqrt(sq);
    if (!(norm >= Real(kMinEmbeddingNorm))) {
      std::ostringstream msg;
      msg << "embedding row " << i << " has zero norm";
      throw Error(msg.str());
    }
    for (Real& v : out.row(i)) v /= norm;
    if (norms) (*norms)[i] = norm;
  }
  return out;
}

template <std::floating_point Real>
KernelMatrix<Real> embedding_kernel_matrix(const Matrix<Real>& vectors) {
  const Matrix<Real> u = unit_rows(vectors);
  const std::size_t n = u.rows();
  const std::size_t d = u.cols();
  KernelMatrix<Real> k{Matrix<Real>(n, n)};
  for (std::size_t p = 0; p < n; ++p) {
    k.entries(p, p) = Real(kEmbeddingKernelScale);
    for (std::size_t q = p + 1; q < n; ++q) {
      Real dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += u(p, j) * u(q, j);
      dot = std::clamp(dot, Real(-1), Real(1));
      k.entries(p, q) = Real(kEmbeddingKernelScale) * dot;
      k.entries(q, p) = k.entries(p, q);
    }
  }
  return k;
}

template <std::floating_point Real>
KernelMatrix<Real> embedding_kernel_matrix(const EmbeddingField<Real>& emb) {
  return embedding_kernel_matrix(emb.vectors);
}

namespace detail {

// Column softmax of the corrected logits; fills probabilities and/or their
// logs with one exp per entry. Row-major passes only.
template <std::floating_point Real>
void column_softmax_into(const KernelMatrix<Real>& k, Real diag_logit, Matrix<Real>* probs, Matrix<Real>* logs) {
  const std::size_t n = k.size();
  if (k.entries.cols() != n) throw Error("column_softmax: kernel must be square");
  std::vector<Real> mx(n, diag_logit), total(n, Real(0));
  for (std::size_t p = 0; p < n; ++p) {
    const auto row = k.entries.row(p);
    for (std::size_t q = 0; q < n; ++q) {
      if (!std::isfinite(row[q])) throw Error("column_softmax: non-finite kernel entry");
      if (p != q) mx[q] = std::max(mx[q], row[q]);
    }
  }
  Matrix<Real> e(n, n);
  for (std::size_t p = 0; p < n; ++p) {
    const auto row = k.entries.row(p);
    auto erow = e.row(p);
    for (std::size_t q = 0; q < n; ++q) {
      erow[q] = std::exp((p == q ? diag_logit : row[q]) - mx[q]);
      total[q] += erow[q];
    }
  }
  if (logs) {
    *logs = Matrix<Real>(n, n);
    std::vector<Real> lse(n);
    for (std::size_t q = 0; q < n; ++q) lse[q] = mx[q] + std::log(total[q]);
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = 0; q < n; ++q) (*logs)(p, q) = (p == q ? diag_logit : k(p, q)) - lse[q];
  }
  if (probs) {
    for (auto& t : total) t = Real(1) / t;
    for (std::size_t p = 0; p < n; ++p) {
      auto erow = e.row(p);
      for (std::size_t q = 0; q < n; ++q) erow[q] *= total[q];
    }
    *probs = std::move(e);
  }
}

}  // namespace detail

/// Log of the column softmax with the diagonal logit replaced by `diag_logit`.
template <std::floating_point Real>
Matrix<Real> column_log_softmax(const KernelMatrix<Real>& k, Real diag_logit) {
  Matrix<Real> logs;
  detail::column_softmax_into<Real>(k, diag_logit, nullptr, &logs);
  return logs;
}

/// Softmax down each column with the diagonal logit replaced by `diag_logit`.
template <std::floating_point Real>
StochasticMatrix<Real> column_softmax(const KernelMatrix<Real>& k, Real diag_logit) {
  StochasticMatrix<Real> s;
  detail::column_softmax_into<Real>(k, diag_logit, &s.entries, nullptr);
  return s;
}

template <std::floating_point Real>
StochasticMatrix<Real> flow_softmax(const KernelMatrix<Real>& kf) {
  return column_softmax(kf, Real(kFlowDiagLogit));
}

template <std::floating_point Real>
StochasticMatrix<Real> embedding_softmax(const KernelMatrix<Real>& ke) {
  return column_softmax(ke, Real(kEmbeddingDiagLogit));
}

/// -sum_q sum_p target(p,q) log model(p,q)
template <std::floating_point Real>
Real column_cross_entropy(const StochasticMatrix<Real>& target, const StochasticMatrix<Real>& model) {
  const std::size_t n = target.size();
  if (model.size() != n) throw Error("column_cross_entropy: size mismatch");
  Real loss = 0;
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t p = 0; p < n; ++p) loss -= target(p, q) * std::log(model(p, q));
  return loss;
}

/// Shannon entropy of each column, summed over columns.
template <std::floating_point Real>
Real column_entropy(const StochasticMatrix<Real>& s) {
  return column_cross_entropy(s, s);
}

namespace detail {

template <std::floating_point Real>
void check_loss_inputs(std::span<const Vec2<Real>> flows, const Matrix<Real>& emb) {
  if (flows.size() != emb.rows())
    throw Error("cross_pixel_loss: " + std::to_string(flows.size()) + " flow vectors but " +
                std::to_string(emb.rows()) + " embeddings");
  if (flows.empty()) throw Error("cross_pixel_loss: no pixels");
}

}  // namespace detail

namespace detail {

template <std::floating_point Real>
Real cross_entropy_from_logs(const StochasticMatrix<Real>& target, const Matrix<Real>& log_model) {
  Real loss = 0;
  const auto& t = target.entries.data();
  const auto& l = log_model.data();
  for (std::size_t i = 0; i < t.size(); ++i) loss -= t[i] * l[i];
  return loss;
}

}  // namespace detail

template <std::floating_point Real>
Real cross_pixel_loss(std::span<const Vec2<Real>> flows, const Matrix<Real>& emb, const KernelParams<Real>& params) {
  detail::check_loss_inputs(flows, emb);
  const auto sf = flow_softmax(flow_kernel_matrix(flows, params));
  const auto log_se = column_log_softmax(embedding_kernel_matrix(emb), Real(kEmbeddingDiagLogit));
  return detail::cross_entropy_from_logs(sf, log_se);
}

template <std::floating_point Real>
Real cross_pixel_loss(std::span<const Vec2<Real>> flows, const EmbeddingField<Real>& emb,
                      const KernelParams<Real>& params) {
  return cross_pixel_loss(flows, emb.vectors, params);
}

/// Loss plus analytic gradients with respect to the raw embedding rows and rho.
///
/// With A, B the corrected logits of S_e, S_f:
///   dL/dA(p,q) = S_e(p,q) - S_f(p,q)                       (p != q)
///   dL/dB(p,q) = S_f(p,q) (c(p,q) - sum_p' S_f(p',q) c(p',q)),  c = -log S_e
///   dK_f/drho  = K_f * |f_p - f_q|^2 / sigma^2
template <std::floating_point Real>
LossGradients<Real> loss_gradients(std::span<const Vec2<Real>> flows, const Matrix<Real>& emb,
                                   const KernelParams<Real>& params) {
  detail::check_loss_inputs(flows, emb);
  const std::size_t n = emb.rows();
  const std::size_t d = emb.cols();

  std::vector<Real> norms;
  const Matrix<Real> u = unit_rows(emb, &norms);
  const auto kf = flow_kernel_matrix(flows, params);
  const auto sf = flow_softmax(kf);
  Matrix<Real> se, log_se;
  detail::column_softmax_into<Real>(embedding_kernel_matrix(emb), Real(kEmbeddingDiagLogit), &se, &log_se);

  LossGradients<Real> out;
  out.loss = detail::cross_entropy_from_logs(sf, log_se);
  out.d_embeddings = Matrix<Real>(n, d);

  // Embedding side: dL/du_p = 1/4 sum_q (G(p,q) + G(q,p)) u_q, G = S_e - S_f off the diagonal.
  Matrix<Real> g(n, n);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = 0; q < n; ++q) g(p, q) = p == q ? Real(0) : se(p, q) - sf(p, q);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = p + 1; q < n; ++q) {
      const Real v = Real(kEmbeddingKernelScale) * (g(p, q) + g(q, p));
      g(p, q) = v;
      g(q, p) = v;
    }
  }
  Matrix<Real> du(n, d);
  for (std::size_t p = 0; p < n; ++p) {
    const auto grow = g.row(p);
    auto drow = du.row(p);
    for (std::size_t q = 0; q < n; ++q) {
      const Real w = grow[q];
      const auto urow = u.row(q);
      for (std::size_t j = 0; j < d; ++j) drow[j] += w * urow[j];
    }
  }
  // Through the normalization: (I - u u^T) / |phi|.
  for (std::size_t p = 0; p < n; ++p) {
    Real radial = 0;
    for (std::size_t j = 0; j < d; ++j) radial += du(p, j) * u(p, j);
    for (std::size_t j = 0; j < d; ++j) out.d_embeddings(p, j) = (du(p, j) - radial * u(p, j)) / norms[p];
  }

  // Bandwidth side.
  std::vector<Real> mean_c(n, Real(0));
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = 0; q < n; ++q) mean_c[q] -= sf(p, q) * log_se(p, q);
  const Real inv_sigma_sq = Real(1) / params.sigma_sq();
  Real d_rho = 0;
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = 0; q < n; ++q) {
      if (p == q) continue;
      const Real dx = flows[p][0] - flows[q][0];
      const Real dy = flows[p][1] - flows[q][1];
      const Real dk_drho = kf(p, q) * (dx * dx + dy * dy) * inv_sigma_sq;
      d_rho += sf(p, q) * (-log_se(p, q) - mean_c[q]) * dk_drho;
    }
  }
  out.d_rho = d_rho;
  return out;
}

template <std::floating_point Real>
LossGradients<Real> loss_gradients(std::span<const Vec2<Real>> flows, const EmbeddingField<Real>& emb,
                                   const KernelParams<Real>& params) {
  return loss_gradients(flows, emb.vectors, params);
}

/// Kernel target alignment: <K, K'>_F / (|K|_F |K'|_F).
template <std::floating_point Real>
Real kta(const KernelMatrix<Real>& a, const KernelMatrix<Real>& b) {
  if (a.size() != b.size() || a.entries.cols() != b.entries.cols()) throw Error("kta: size mismatch");
  Real ab = 0, aa = 0, bb = 0;
  const auto& x = a.entries.data();
  const auto& y = b.entries.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    ab += x[i] * y[i];
    aa += x[i] * x[i];
    bb += y[i] * y[i];
  }
  if (aa == Real(0) || bb == Real(0)) throw Error("kta: all-zero kernel");
  return ab / std::sqrt(aa * bb);
}

}  // namespace cpfs
