#ifndef TGP_SVGP_HPP
#define TGP_SVGP_HPP

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tgp/common.hpp"
#include "tgp/kernels.hpp"

namespace tgp {

// ---------------------------------------------------------------------------
// Sparse variational GP regression with inducing points.
//
// The posterior over the M inducing values u is a free-form Gaussian
// q(u) = N(m, S) with S = L L^T; L is stored "raw" (off-diagonal entries
// verbatim, diagonal through softplus) so every parameter is unconstrained.
// Training maximises the minibatch evidence lower bound
//
//   sum_i a_i [ -log(2 pi)/2 + log(beta_i)/2
//               - beta_i (r_i^2 + ktilde_ii + q_i)/2 ]  -  KL(q(u) || p(u))
//
// where a_i = (total_n / batch) * w_i rescales the minibatch (w_i are
// optional importance weights), r_i is the residual against the predictive
// mean, ktilde_ii the Nystrom remainder and q_i the variational correction.
// The observation precision beta_i is either one shared constant or, in the
// heteroscedastic variant, exp(-s(x_i)) with s the plug-in mean of a second
// sparse GP over the log noise variance (its own KL joins the objective).
//
// All gradients are analytic.  Kernel hyper-parameter and inducing-location
// gradients are assembled in a second pass that contracts the Gram-matrix
// adjoints with per-entry kernel derivatives, relying on the per-dimension
// stationarity of every kernel in kernels.hpp.
// ---------------------------------------------------------------------------

enum class NoiseKind { kConstant, kHeteroscedastic };

// Second sparse GP whose plug-in mean models the log observation variance.
template <class NK>
struct LatentNoiseGp {
  NK kernel;
  PointsMatrix Z;
  Eigen::VectorXd m;
  Eigen::MatrixXd L_raw;
  double offset = 0.0;  // constant added to the latent mean
};

template <class K, class NK = K>
struct SvgpState {
  K kernel;
  PointsMatrix Z;           // M x dim inducing locations
  Eigen::VectorXd m;        // variational mean
  Eigen::MatrixXd L_raw;    // lower triangle; diagonal is softplus-encoded
  NoiseKind noise_kind = NoiseKind::kConstant;
  double log_beta = 0.0;    // log precision (constant-noise variant)
  std::optional<LatentNoiseGp<NK>> latent;  // heteroscedastic variant
  double jitter_rel = 1e-6;

  int num_inducing() const { return static_cast<int>(Z.rows()); }
};

// ---------------------------------------------------------------------------
// Cholesky-factor encoding.
// ---------------------------------------------------------------------------

// Raw storage -> usable lower-triangular factor with positive diagonal.
inline Eigen::MatrixXd materialize_cholesky(const Eigen::MatrixXd &raw) {
  const Eigen::Index n = raw.rows();
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) L(i, j) = raw(i, j);
    L(i, i) = softplus(raw(i, i));
  }
  return L;
}

// Inverse of materialize_cholesky; requires a strictly positive diagonal.
inline Eigen::MatrixXd raw_from_cholesky(const Eigen::MatrixXd &L) {
  const Eigen::Index n = L.rows();
  Eigen::MatrixXd raw = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) raw(i, j) = L(i, j);
    raw(i, i) = softplus_inv(L(i, i));
  }
  return raw;
}

// ---------------------------------------------------------------------------
// Jittered Cholesky with escalation: start from `rel` times the mean signal
// level on the diagonal, double on failure, and give up past 1e-2 relative.
// ---------------------------------------------------------------------------

inline Eigen::LLT<Eigen::MatrixXd> chol_with_jitter(const Eigen::MatrixXd &K, double rel) {
  const double scale = std::max(K.diagonal().mean(), 1e-300);
  double jitter = rel * scale;
  const double cap = 1e-2 * scale;
  Eigen::LLT<Eigen::MatrixXd> llt;
  while (true) {
    Eigen::MatrixXd Kj = K;
    Kj.diagonal().array() += jitter;
    llt.compute(Kj);
    if (llt.info() == Eigen::Success) return llt;
    jitter *= 2.0;
    if (jitter > cap)
      throw NumericalError("cholesky failed even with jitter at 1e-2 of the signal level");
  }
}

// KL(N(m, L L^T) || N(0, Kmm)) for a positive-definite prior covariance.
inline double kl_q_p(const Eigen::VectorXd &m, const Eigen::MatrixXd &L,
                     const Eigen::MatrixXd &Kmm) {
  const Eigen::Index M = m.size();
  Eigen::LLT<Eigen::MatrixXd> llt(Kmm);
  if (llt.info() != Eigen::Success)
    throw NumericalError("kl_q_p: prior covariance is not positive definite");
  const Eigen::MatrixXd half = llt.matrixL().solve(L);
  const double trace = half.squaredNorm();
  const double quad = m.dot(llt.solve(m));
  double logdet_k = 0.0, logdet_s = 0.0;
  for (Eigen::Index i = 0; i < M; ++i) {
    logdet_k += 2.0 * std::log(llt.matrixL()(i, i));
    logdet_s += 2.0 * std::log(L(i, i));
  }
  return 0.5 * (trace + quad - static_cast<double>(M) + logdet_k - logdet_s);
}

// ---------------------------------------------------------------------------
// Gradients, one slot per trainable parameter block.  Latent blocks are
// filled only for heteroscedastic states.
// ---------------------------------------------------------------------------

struct SvgpGradients {
  Eigen::VectorXd m;
  Eigen::MatrixXd L_raw;
  Eigen::VectorXd hypers;
  PointsMatrix Z;
  double log_beta = 0.0;
  Eigen::VectorXd lat_m;
  Eigen::MatrixXd lat_L_raw;
  Eigen::VectorXd lat_hypers;
  PointsMatrix lat_Z;
  double lat_offset = 0.0;
};

namespace detail {

// Contract Gram-matrix adjoints against per-entry kernel derivatives.
// Kbar_mm is the adjoint of gram(Z, Z), Kbar_mn of gram(Z, X), kdiag_bar
// (optional) of the diagonal k(x_i, x_i).  Symmetric pairs are visited once
// using stationarity: dk/du at (z_q, z_p) is the negation of dk/du at
// (z_p, z_q), so one evaluation serves both entries.  Accumulates into
// ghyp / gZ, which must be pre-sized and zeroed by the caller.
template <class Kern>
void accumulate_kernel_adjoints(const Kern &k, const PointsMatrix &Z, const PointsMatrix &X,
                                const Eigen::MatrixXd &Kbar_mm, const Eigen::MatrixXd &Kbar_mn,
                                const Eigen::VectorXd *kdiag_bar, Eigen::VectorXd *ghyp,
                                PointsMatrix *gZ) {
  constexpr int kMaxHypers = 16;
  const int M = static_cast<int>(Z.rows());
  const int b = static_cast<int>(X.rows());
  const int nh = k.num_hypers();
  if (nh > kMaxHypers) throw NumericalError("kernel exposes more hyper-parameters than supported");
  double dhyp[kMaxHypers];
  double du[Kern::kDim];

  for (int p = 0; p < M; ++p) {
    const double *zp = Z.data() + p * Kern::kDim;
    // Diagonal entry: distance zero, so position derivatives vanish and only
    // the hyper-parameters receive a contribution.
    k.eval_grad(zp, zp, dhyp, du);
    const double gpp = Kbar_mm(p, p);
    if (gpp != 0.0)
      for (int h = 0; h < nh; ++h) (*ghyp)[h] += gpp * dhyp[h];
    for (int q = p + 1; q < M; ++q) {
      const double g2 = Kbar_mm(p, q) + Kbar_mm(q, p);
      if (g2 == 0.0) continue;
      const double *zq = Z.data() + q * Kern::kDim;
      k.eval_grad(zp, zq, dhyp, du);
      for (int h = 0; h < nh; ++h) (*ghyp)[h] += g2 * dhyp[h];
      if (gZ != nullptr) {
        for (int d = 0; d < Kern::kDim; ++d) {
          (*gZ)(p, d) += g2 * du[d];
          (*gZ)(q, d) -= g2 * du[d];
        }
      }
    }
  }

  for (int p = 0; p < M; ++p) {
    const double *zp = Z.data() + p * Kern::kDim;
    for (int i = 0; i < b; ++i) {
      const double g = Kbar_mn(p, i);
      if (g == 0.0) continue;
      k.eval_grad(zp, X.data() + i * Kern::kDim, dhyp, du);
      for (int h = 0; h < nh; ++h) (*ghyp)[h] += g * dhyp[h];
      if (gZ != nullptr)
        for (int d = 0; d < Kern::kDim; ++d) (*gZ)(p, d) += g * du[d];
    }
  }

  if (kdiag_bar != nullptr) {
    for (int i = 0; i < b; ++i) {
      const double g = (*kdiag_bar)[i];
      if (g == 0.0) continue;
      const double *xi = X.data() + i * Kern::kDim;
      k.eval_grad(xi, xi, dhyp, du);
      for (int h = 0; h < nh; ++h) (*ghyp)[h] += g * dhyp[h];
    }
  }
}

// Shared evaluation path for the objective and its gradients.  When `grads`
// is null only the objective value is computed.
template <class K, class NK>
double elbo_impl(const PointsMatrix &X, const Eigen::VectorXd &y, const Eigen::VectorXd *w,
                 const SvgpState<K, NK> &st, double total_n, SvgpGradients *grads) {
  const int b = static_cast<int>(X.rows());
  const int M = st.num_inducing();
  if (b == 0) throw DataError("elbo: empty batch");
  if (y.size() != b) throw DataError("elbo: targets do not match batch size");
  if (X.cols() != K::kDim) throw DataError("elbo: input dimension does not match kernel");
  if (st.m.size() != M || st.L_raw.rows() != M || st.L_raw.cols() != M)
    throw DataError("elbo: variational shapes do not match inducing count");
  if (total_n <= 0.0) throw DataError("elbo: total_n must be positive");
  if (total_n < static_cast<double>(b) * (1.0 - 1e-12))
    throw DataError("elbo: total_n must be at least the batch size");

  Eigen::VectorXd a = Eigen::VectorXd::Constant(b, total_n / b);
  if (w != nullptr) {
    if (w->size() != b) throw DataError("elbo: weights do not match batch size");
    a.array() *= w->array();
  }

  const bool hetero = st.noise_kind == NoiseKind::kHeteroscedastic;
  if (hetero && !st.latent.has_value())
    throw DataError("elbo: heteroscedastic state has no latent noise model");

  // Observation precision per point, plus the latent solves kept for grads.
  Eigen::VectorXd log_beta_v(b), beta(b);
  Eigen::LLT<Eigen::MatrixXd> llt_g;
  Eigen::MatrixXd Ag, Lg, Sg;
  Eigen::VectorXd Bg_mg, s;
  int Mg = 0;
  if (hetero) {
    const auto &lat = *st.latent;
    Mg = static_cast<int>(lat.Z.rows());
    llt_g = chol_with_jitter(gram_self(lat.Z, lat.kernel, 0.0), st.jitter_rel);
    const Eigen::MatrixXd Kg_mn = gram(lat.Z, X, lat.kernel);
    Ag = llt_g.solve(Kg_mn);
    Bg_mg = llt_g.solve(lat.m);
    s = ((Kg_mn.transpose() * Bg_mg).array() + lat.offset).matrix();
    log_beta_v = -s;
    beta = (-s.array()).exp().matrix();
    Lg = materialize_cholesky(lat.L_raw);
    Sg.noalias() = Lg * Lg.transpose();
  } else {
    log_beta_v.setConstant(st.log_beta);
    beta.setConstant(std::exp(st.log_beta));
  }

  const Eigen::LLT<Eigen::MatrixXd> llt =
      chol_with_jitter(gram_self(st.Z, st.kernel, 0.0), st.jitter_rel);
  const Eigen::MatrixXd Kmn = gram(st.Z, X, st.kernel);
  Eigen::VectorXd kdiag(b);
  for (int i = 0; i < b; ++i) {
    const double *xi = X.data() + i * K::kDim;
    kdiag[i] = st.kernel(xi, xi);
  }
  const Eigen::MatrixXd A = llt.solve(Kmn);
  const Eigen::VectorXd Bm = llt.solve(st.m);
  const Eigen::VectorXd mu = Kmn.transpose() * Bm;
  const Eigen::VectorXd r = y - mu;
  const Eigen::MatrixXd L = materialize_cholesky(st.L_raw);
  Eigen::MatrixXd S(M, M);
  S.noalias() = L * L.transpose();
  Eigen::MatrixXd SA(M, b);
  SA.noalias() = S * A;
  const Eigen::VectorXd q = (A.array() * SA.array()).colwise().sum().matrix().transpose();
  const Eigen::VectorXd ktil = kdiag - (Kmn.array() * A.array()).colwise().sum().matrix().transpose();
  const Eigen::VectorXd R = r.array().square().matrix() + ktil + q;

  const double log2pi = std::log(2.0 * kPi);
  const double data_fit =
      (a.array() * (-0.5 * log2pi + 0.5 * log_beta_v.array() - 0.5 * beta.array() * R.array()))
          .sum();

  auto kl_from_llt = [](const Eigen::LLT<Eigen::MatrixXd> &f, const Eigen::VectorXd &mean,
                        const Eigen::MatrixXd &Lq, const Eigen::VectorXd &prior_solve_m) {
    const Eigen::Index n = mean.size();
    const Eigen::MatrixXd half = f.matrixL().solve(Lq);
    double logdet_k = 0.0, logdet_s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      logdet_k += 2.0 * std::log(f.matrixL()(i, i));
      logdet_s += 2.0 * std::log(Lq(i, i));
    }
    return 0.5 * (half.squaredNorm() + mean.dot(prior_solve_m) - static_cast<double>(n) +
                  logdet_k - logdet_s);
  };

  double objective = data_fit - kl_from_llt(llt, st.m, L, Bm);
  if (hetero) objective -= kl_from_llt(llt_g, st.latent->m, Lg, Bg_mg);
  if (grads == nullptr) return objective;

  // ---- adjoints ----
  const Eigen::VectorXd ab = (a.array() * beta.array()).matrix();
  const Eigen::VectorXd c = (ab.array() * r.array()).matrix();
  const Eigen::VectorXd Ac = A * c;
  const Eigen::MatrixXd identity = Eigen::MatrixXd::Identity(M, M);
  const Eigen::MatrixXd Binv = llt.solve(identity);
  const Eigen::MatrixXd Linv = L.triangularView<Eigen::Lower>().solve(identity);
  Eigen::MatrixXd Sinv(M, M);
  Sinv.noalias() = Linv.transpose() * Linv;
  Eigen::MatrixXd What(M, M);
  What.noalias() = A * ab.asDiagonal() * A.transpose();
  const Eigen::MatrixXd W2 = llt.solve(S);         // Kmm^-1 S
  const Eigen::MatrixXd BSA = llt.solve(SA);       // Kmm^-1 S A
  Eigen::MatrixXd BSB = llt.solve(W2.transpose());  // Kmm^-1 S Kmm^-1
  BSB = 0.5 * (BSB + BSB.transpose()).eval();

  grads->m = Ac - Bm;

  const Eigen::MatrixXd G_S = -0.5 * What - 0.5 * Binv + 0.5 * Sinv;
  Eigen::MatrixXd gL_full(M, M);
  gL_full.noalias() = 2.0 * G_S * L;
  grads->L_raw = Eigen::MatrixXd::Zero(M, M);
  for (int i = 0; i < M; ++i) {
    for (int j = 0; j < i; ++j) grads->L_raw(i, j) = gL_full(i, j);
    grads->L_raw(i, i) = gL_full(i, i) * sigmoid(st.L_raw(i, i));
  }

  Eigen::MatrixXd Kbar_mn(M, b);
  Kbar_mn.noalias() = Bm * c.transpose();
  Kbar_mn.noalias() += (A - BSA) * ab.asDiagonal();

  Eigen::MatrixXd X1(M, M);
  X1.noalias() = What * W2.transpose();  // What S Kmm^-1
  Eigen::MatrixXd Kbar_mm(M, M);
  Kbar_mm.noalias() = -Ac * Bm.transpose();
  Kbar_mm += -0.5 * What + 0.5 * (X1 + X1.transpose()) + 0.5 * BSB;
  Kbar_mm.noalias() += 0.5 * Bm * Bm.transpose();
  Kbar_mm -= 0.5 * Binv;

  const Eigen::VectorXd kdiag_bar = -0.5 * ab;

  grads->hypers = Eigen::VectorXd::Zero(st.kernel.num_hypers());
  grads->Z = PointsMatrix::Zero(M, K::kDim);
  accumulate_kernel_adjoints(st.kernel, st.Z, X, Kbar_mm, Kbar_mn, &kdiag_bar, &grads->hypers,
                             &grads->Z);

  // Noise side.  g_s is the sensitivity of the objective to the per-point
  // log noise variance s_i = -log beta_i.
  const Eigen::VectorXd g_s = (a.array() * (-0.5 + 0.5 * beta.array() * R.array())).matrix();
  if (!hetero) {
    grads->log_beta = -g_s.sum();
    grads->lat_m.resize(0);
    grads->lat_L_raw.resize(0, 0);
    grads->lat_hypers.resize(0);
    grads->lat_Z.resize(0, 0);
    grads->lat_offset = 0.0;
    return objective;
  }

  const auto &lat = *st.latent;
  grads->log_beta = 0.0;
  grads->lat_offset = g_s.sum();
  const Eigen::VectorXd Ag_gs = Ag * g_s;
  grads->lat_m = Ag_gs - Bg_mg;

  const Eigen::MatrixXd identity_g = Eigen::MatrixXd::Identity(Mg, Mg);
  const Eigen::MatrixXd Binv_g = llt_g.solve(identity_g);
  const Eigen::MatrixXd Lg_inv = Lg.triangularView<Eigen::Lower>().solve(identity_g);
  Eigen::MatrixXd Sg_inv(Mg, Mg);
  Sg_inv.noalias() = Lg_inv.transpose() * Lg_inv;
  const Eigen::MatrixXd W2g = llt_g.solve(Sg);
  Eigen::MatrixXd BSB_g = llt_g.solve(W2g.transpose());
  BSB_g = 0.5 * (BSB_g + BSB_g.transpose()).eval();

  const Eigen::MatrixXd G_Sg = 0.5 * (Sg_inv - Binv_g);
  Eigen::MatrixXd gLg_full(Mg, Mg);
  gLg_full.noalias() = 2.0 * G_Sg * Lg;
  grads->lat_L_raw = Eigen::MatrixXd::Zero(Mg, Mg);
  for (int i = 0; i < Mg; ++i) {
    for (int j = 0; j < i; ++j) grads->lat_L_raw(i, j) = gLg_full(i, j);
    grads->lat_L_raw(i, i) = gLg_full(i, i) * sigmoid(lat.L_raw(i, i));
  }

  Eigen::MatrixXd Kbar_g_mn(Mg, b);
  Kbar_g_mn.noalias() = Bg_mg * g_s.transpose();
  Eigen::MatrixXd Kbar_g_mm(Mg, Mg);
  Kbar_g_mm.noalias() = -Ag_gs * Bg_mg.transpose();
  Kbar_g_mm += 0.5 * BSB_g;
  Kbar_g_mm.noalias() += 0.5 * Bg_mg * Bg_mg.transpose();
  Kbar_g_mm -= 0.5 * Binv_g;

  grads->lat_hypers = Eigen::VectorXd::Zero(lat.kernel.num_hypers());
  grads->lat_Z = PointsMatrix::Zero(Mg, NK::kDim);
  accumulate_kernel_adjoints(lat.kernel, lat.Z, X, Kbar_g_mm, Kbar_g_mn, nullptr,
                             &grads->lat_hypers, &grads->lat_Z);
  return objective;
}

}  // namespace detail

// Minibatch evidence lower bound (the full training objective: for
// heteroscedastic states the latent GP's KL term is included).
template <class K, class NK>
double elbo(const PointsMatrix &X, const Eigen::VectorXd &y, const SvgpState<K, NK> &st,
            double total_n, const Eigen::VectorXd *weights = nullptr) {
  return detail::elbo_impl(X, y, weights, st, total_n, nullptr);
}

// Objective value plus analytic gradients for every trainable block.
template <class K, class NK>
double elbo_grad(const PointsMatrix &X, const Eigen::VectorXd &y, const SvgpState<K, NK> &st,
                 double total_n, SvgpGradients *grads,
                 const Eigen::VectorXd *weights = nullptr) {
  return detail::elbo_impl(X, y, weights, st, total_n, grads);
}

// ---------------------------------------------------------------------------
// Prediction.
// ---------------------------------------------------------------------------

struct PredictResult {
  Eigen::VectorXd mean;
  Eigen::VectorXd var;
};

// Per-point observation variance (constant, or the latent field's plug-in
// mean pushed through exp).
template <class K, class NK>
Eigen::VectorXd noise_variance(const SvgpState<K, NK> &st, const PointsMatrix &Xq) {
  const int nq = static_cast<int>(Xq.rows());
  if (st.noise_kind == NoiseKind::kConstant)
    return Eigen::VectorXd::Constant(nq, std::exp(-st.log_beta));
  const auto &lat = *st.latent;
  const auto llt_g = chol_with_jitter(gram_self(lat.Z, lat.kernel, 0.0), st.jitter_rel);
  const Eigen::MatrixXd Kg_mq = gram(lat.Z, Xq, lat.kernel);
  const Eigen::VectorXd s =
      ((Kg_mq.transpose() * llt_g.solve(lat.m)).array() + lat.offset).matrix();
  return s.array().exp().matrix();
}

// Marginal predictive moments.  The latent-function variance is clamped at
// zero before the (strictly positive) observation variance is added, so the
// returned variance is positive whenever include_noise is set.
template <class K, class NK>
PredictResult predict(const SvgpState<K, NK> &st, const PointsMatrix &Xq,
                      bool include_noise = true) {
  const int nq = static_cast<int>(Xq.rows());
  if (Xq.cols() != K::kDim) throw DataError("predict: input dimension does not match kernel");
  const auto llt = chol_with_jitter(gram_self(st.Z, st.kernel, 0.0), st.jitter_rel);
  const Eigen::MatrixXd Kmq = gram(st.Z, Xq, st.kernel);
  const Eigen::MatrixXd Aq = llt.solve(Kmq);
  const Eigen::VectorXd Bm = llt.solve(st.m);
  PredictResult out;
  out.mean = Kmq.transpose() * Bm;
  const Eigen::MatrixXd L = materialize_cholesky(st.L_raw);
  Eigen::MatrixXd S(st.num_inducing(), st.num_inducing());
  S.noalias() = L * L.transpose();
  const Eigen::MatrixXd SAq = S * Aq;
  out.var.resize(nq);
  for (int i = 0; i < nq; ++i) {
    const double *xi = Xq.data() + i * K::kDim;
    const double kun = st.kernel(xi, xi);
    const double fvar = kun - Kmq.col(i).dot(Aq.col(i)) + Aq.col(i).dot(SAq.col(i));
    out.var[i] = std::max(fvar, 0.0);
  }
  if (include_noise) out.var += noise_variance(st, Xq);
  return out;
}

// Joint latent-function posterior over a set of query points (needed when
// sampling coherent paths rather than marginals).
template <class K, class NK>
void predict_f_joint(const SvgpState<K, NK> &st, const PointsMatrix &Xq, Eigen::VectorXd *mean,
                     Eigen::MatrixXd *cov) {
  if (Xq.cols() != K::kDim) throw DataError("predict_f_joint: input dimension mismatch");
  const auto llt = chol_with_jitter(gram_self(st.Z, st.kernel, 0.0), st.jitter_rel);
  const Eigen::MatrixXd Kmq = gram(st.Z, Xq, st.kernel);
  const Eigen::MatrixXd Aq = llt.solve(Kmq);
  *mean = Kmq.transpose() * llt.solve(st.m);
  const Eigen::MatrixXd L = materialize_cholesky(st.L_raw);
  Eigen::MatrixXd S(st.num_inducing(), st.num_inducing());
  S.noalias() = L * L.transpose();
  Eigen::MatrixXd c = gram_self(Xq, st.kernel, 0.0);
  c.noalias() -= Kmq.transpose() * Aq;
  c.noalias() += Aq.transpose() * S * Aq;
  *cov = 0.5 * (c + c.transpose());
}

// ---------------------------------------------------------------------------
// Initialisation and training.
// ---------------------------------------------------------------------------

struct TrainConfig {
  int num_inducing = 10;
  int num_inducing_noise = 10;
  int batch_size = 400;
  int steps = 1000;
  double learning_rate = 1e-2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double jitter_rel = 1e-6;
  double init_noise_fraction = 0.1;  // noise variance as a share of var(y)
  double init_chol_scale = 0.1;      // shrink on the prior Cholesky for L
  std::uint64_t seed = 0;
  NoiseKind noise_kind = NoiseKind::kConstant;
  bool train_inducing = true;
  int trace_every = 10;
};

namespace detail {

inline constexpr std::uint64_t kStreamInducing = 11;
inline constexpr std::uint64_t kStreamInducingNoise = 12;
inline constexpr std::uint64_t kStreamBatch = 13;

// Quantile value of a sorted column at fractional position p in (0, 1).
inline double sorted_quantile(const std::vector<double> &sorted, double p) {
  const auto n = static_cast<std::ptrdiff_t>(sorted.size());
  auto idx = static_cast<std::ptrdiff_t>(p * static_cast<double>(n));
  idx = std::clamp<std::ptrdiff_t>(idx, 0, n - 1);
  return sorted[static_cast<std::size_t>(idx)];
}

}  // namespace detail

// Spread inducing locations over the data: empirical quantiles per dimension
// (uniform circle spacing on the angular dimension).  When M is a perfect
// d-th power the per-dimension sequences are combined as a lattice; otherwise
// the sequences are paired Latin-hypercube style, shuffling every dimension
// after the first with a counter-based RNG so the pairing is deterministic.
inline PointsMatrix init_inducing(const PointsMatrix &X, int M, int theta_index,
                                  CounterRng rng) {
  const int n = static_cast<int>(X.rows());
  const int d = static_cast<int>(X.cols());
  if (n == 0) throw DataError("init_inducing: empty data");
  if (M <= 0) throw DataError("init_inducing: need at least one inducing point");

  // Lattice side length if M is a perfect d-th power (and d > 1).
  int side = 0;
  if (d > 1) {
    const int guess = static_cast<int>(std::lround(std::pow(static_cast<double>(M), 1.0 / d)));
    for (int k = std::max(1, guess - 1); k <= guess + 1; ++k) {
      long long p = 1;
      for (int j = 0; j < d; ++j) p *= k;
      if (p == M) side = k;
    }
  }
  const int per_dim = side > 0 ? side : M;

  std::vector<std::vector<double>> values(d, std::vector<double>(per_dim));
  for (int dim = 0; dim < d; ++dim) {
    if (dim == theta_index) {
      for (int i = 0; i < per_dim; ++i)
        values[dim][i] = -kPi + kTwoPi * (i + 0.5) / per_dim;
      continue;
    }
    std::vector<double> col(n);
    for (int i = 0; i < n; ++i) col[i] = X(i, dim);
    std::sort(col.begin(), col.end());
    for (int i = 0; i < per_dim; ++i)
      values[dim][i] = detail::sorted_quantile(col, (i + 0.5) / per_dim);
  }

  PointsMatrix Z(M, d);
  if (side > 0) {
    for (int i = 0; i < M; ++i) {
      int rem = i;
      for (int dim = 0; dim < d; ++dim) {
        Z(i, dim) = values[dim][rem % side];
        rem /= side;
      }
    }
    return Z;
  }

  for (int dim = 0; dim < d; ++dim) {
    std::vector<int> order(M);
    std::iota(order.begin(), order.end(), 0);
    if (dim > 0) {
      CounterRng sub = rng.substream(static_cast<std::uint64_t>(dim));
      for (int i = M - 1; i > 0; --i) {
        const int j = static_cast<int>(sub.uniform_index(static_cast<std::uint64_t>(i + 1)));
        std::swap(order[i], order[j]);
      }
    }
    for (int i = 0; i < M; ++i) Z(i, dim) = values[dim][order[i]];
  }
  return Z;
}

// Build a ready-to-train state from data statistics: quantile-spread inducing
// locations, signal variance matched to var(y), lengthscales to per-dimension
// spread, q(u) centred at zero with a shrunk prior Cholesky, and the noise
// level started at a fixed fraction of the target variance.
template <class K, class NK = K>
SvgpState<K, NK> init_state(const PointsMatrix &X, const Eigen::VectorXd &y, K kernel,
                            NK noise_kernel, const TrainConfig &cfg) {
  const int n = static_cast<int>(X.rows());
  const int d = static_cast<int>(X.cols());
  if (n == 0) throw DataError("init_state: empty data");
  if (y.size() != n) throw DataError("init_state: targets do not match data");
  if (d != K::kDim) throw DataError("init_state: input dimension does not match kernel");

  Eigen::VectorXd spread(d);
  for (int dim = 0; dim < d; ++dim) {
    const double mean = X.col(dim).mean();
    const double var = (X.col(dim).array() - mean).square().sum() / n;
    spread[dim] = std::sqrt(std::max(var, 1e-12));
  }
  const double y_mean = y.mean();
  const double var_y = std::max((y.array() - y_mean).square().sum() / n, 1e-8);

  CounterRng rng(cfg.seed, detail::kStreamInducing);

  SvgpState<K, NK> st;
  st.kernel = kernel;
  st.kernel.init_hypers(spread, var_y);
  st.Z = init_inducing(X, cfg.num_inducing, K::kThetaIndex, rng);
  st.m = Eigen::VectorXd::Zero(cfg.num_inducing);
  st.jitter_rel = cfg.jitter_rel;
  {
    const auto llt = chol_with_jitter(gram_self(st.Z, st.kernel, 0.0), st.jitter_rel);
    const Eigen::MatrixXd L0 = Eigen::MatrixXd(llt.matrixL()) * cfg.init_chol_scale;
    st.L_raw = raw_from_cholesky(L0);
  }

  st.noise_kind = cfg.noise_kind;
  if (cfg.noise_kind == NoiseKind::kConstant) {
    st.log_beta = -std::log(cfg.init_noise_fraction * var_y);
    return st;
  }

  LatentNoiseGp<NK> lat;
  lat.kernel = noise_kernel;
  // The latent field models a log variance; unit signal variance is the
  // natural scale for its wiggles.
  lat.kernel.init_hypers(spread, 1.0);
  lat.Z = init_inducing(X, cfg.num_inducing_noise, NK::kThetaIndex,
                        CounterRng(cfg.seed, detail::kStreamInducingNoise));
  lat.m = Eigen::VectorXd::Zero(cfg.num_inducing_noise);
  lat.offset = std::log(cfg.init_noise_fraction * var_y);
  {
    const auto llt = chol_with_jitter(gram_self(lat.Z, lat.kernel, 0.0), cfg.jitter_rel);
    const Eigen::MatrixXd L0 = Eigen::MatrixXd(llt.matrixL()) * cfg.init_chol_scale;
    lat.L_raw = raw_from_cholesky(L0);
  }
  st.latent = std::move(lat);
  return st;
}

template <class K, class NK = K>
SvgpState<K, NK> init_state(const PointsMatrix &X, const Eigen::VectorXd &y, K kernel,
                            const TrainConfig &cfg) {
  return init_state<K, NK>(X, y, kernel, NK{}, cfg);
}

namespace detail {

// Flat parameter order: m | lower(L_raw) | kernel hypers | vec(Z) | noise
// block (log_beta, or the latent GP's m | lower(L) | hypers | vec(Z) | offset).
template <class K, class NK>
int packed_size(const SvgpState<K, NK> &st) {
  const int M = st.num_inducing();
  int total = M + M * (M + 1) / 2 + st.kernel.num_hypers() + M * K::kDim;
  if (st.noise_kind == NoiseKind::kConstant) return total + 1;
  const int Mg = static_cast<int>(st.latent->Z.rows());
  return total + Mg + Mg * (Mg + 1) / 2 + st.latent->kernel.num_hypers() + Mg * NK::kDim + 1;
}

template <class K, class NK>
Eigen::VectorXd pack_state(const SvgpState<K, NK> &st) {
  Eigen::VectorXd v(packed_size(st));
  int at = 0;
  const int M = st.num_inducing();
  for (int i = 0; i < M; ++i) v[at++] = st.m[i];
  for (int i = 0; i < M; ++i)
    for (int j = 0; j <= i; ++j) v[at++] = st.L_raw(i, j);
  const Eigen::VectorXd h = st.kernel.hypers();
  for (int i = 0; i < h.size(); ++i) v[at++] = h[i];
  for (int i = 0; i < M; ++i)
    for (int d = 0; d < K::kDim; ++d) v[at++] = st.Z(i, d);
  if (st.noise_kind == NoiseKind::kConstant) {
    v[at++] = st.log_beta;
  } else {
    const auto &lat = *st.latent;
    const int Mg = static_cast<int>(lat.Z.rows());
    for (int i = 0; i < Mg; ++i) v[at++] = lat.m[i];
    for (int i = 0; i < Mg; ++i)
      for (int j = 0; j <= i; ++j) v[at++] = lat.L_raw(i, j);
    const Eigen::VectorXd hg = lat.kernel.hypers();
    for (int i = 0; i < hg.size(); ++i) v[at++] = hg[i];
    for (int i = 0; i < Mg; ++i)
      for (int d = 0; d < NK::kDim; ++d) v[at++] = lat.Z(i, d);
    v[at++] = lat.offset;
  }
  return v;
}

template <class K, class NK>
void unpack_state(const Eigen::VectorXd &v, SvgpState<K, NK> *st) {
  int at = 0;
  const int M = st->num_inducing();
  for (int i = 0; i < M; ++i) st->m[i] = v[at++];
  for (int i = 0; i < M; ++i)
    for (int j = 0; j <= i; ++j) st->L_raw(i, j) = v[at++];
  Eigen::VectorXd h(st->kernel.num_hypers());
  for (int i = 0; i < h.size(); ++i) h[i] = v[at++];
  st->kernel.set_hypers(h);
  for (int i = 0; i < M; ++i)
    for (int d = 0; d < K::kDim; ++d) st->Z(i, d) = v[at++];
  if (st->noise_kind == NoiseKind::kConstant) {
    st->log_beta = v[at++];
  } else {
    auto &lat = *st->latent;
    const int Mg = static_cast<int>(lat.Z.rows());
    for (int i = 0; i < Mg; ++i) lat.m[i] = v[at++];
    for (int i = 0; i < Mg; ++i)
      for (int j = 0; j <= i; ++j) lat.L_raw(i, j) = v[at++];
    Eigen::VectorXd hg(lat.kernel.num_hypers());
    for (int i = 0; i < hg.size(); ++i) hg[i] = v[at++];
    lat.kernel.set_hypers(hg);
    for (int i = 0; i < Mg; ++i)
      for (int d = 0; d < NK::kDim; ++d) lat.Z(i, d) = v[at++];
    lat.offset = v[at++];
  }
}

template <class K, class NK>
Eigen::VectorXd pack_grads(const SvgpGradients &g, const SvgpState<K, NK> &st,
                           bool train_inducing) {
  Eigen::VectorXd v(packed_size(st));
  int at = 0;
  const int M = st.num_inducing();
  for (int i = 0; i < M; ++i) v[at++] = g.m[i];
  for (int i = 0; i < M; ++i)
    for (int j = 0; j <= i; ++j) v[at++] = g.L_raw(i, j);
  for (int i = 0; i < g.hypers.size(); ++i) v[at++] = g.hypers[i];
  for (int i = 0; i < M; ++i)
    for (int d = 0; d < K::kDim; ++d) v[at++] = train_inducing ? g.Z(i, d) : 0.0;
  if (st.noise_kind == NoiseKind::kConstant) {
    v[at++] = g.log_beta;
  } else {
    const int Mg = static_cast<int>(st.latent->Z.rows());
    for (int i = 0; i < Mg; ++i) v[at++] = g.lat_m[i];
    for (int i = 0; i < Mg; ++i)
      for (int j = 0; j <= i; ++j) v[at++] = g.lat_L_raw(i, j);
    for (int i = 0; i < g.lat_hypers.size(); ++i) v[at++] = g.lat_hypers[i];
    for (int i = 0; i < Mg; ++i)
      for (int d = 0; d < NK::kDim; ++d) v[at++] = train_inducing ? g.lat_Z(i, d) : 0.0;
    v[at++] = g.lat_offset;
  }
  return v;
}

template <class K, class NK>
void wrap_angular_inducing(SvgpState<K, NK> *st) {
  if constexpr (K::kThetaIndex >= 0) {
    for (int i = 0; i < st->Z.rows(); ++i)
      st->Z(i, K::kThetaIndex) = wrap_angle(st->Z(i, K::kThetaIndex));
  }
  if (st->noise_kind == NoiseKind::kHeteroscedastic) {
    if constexpr (NK::kThetaIndex >= 0) {
      for (int i = 0; i < st->latent->Z.rows(); ++i)
        st->latent->Z(i, NK::kThetaIndex) = wrap_angle(st->latent->Z(i, NK::kThetaIndex));
    }
  }
}

}  // namespace detail

template <class K, class NK>
struct TrainOutcome {
  SvgpState<K, NK> state;
  std::vector<int> trace_steps;    // steps at which the objective was recorded
  std::vector<double> elbo_trace;  // minibatch objective at those steps
};

// Adam ascent on the minibatch objective.  Minibatches are drawn uniformly
// with replacement from a counter-based stream, so the whole run is a pure
// function of (data, config, initial state).  Weights, when given, are
// renormalised to mean one so total_n keeps its meaning as a point count.
// A non-finite objective or gradient aborts with TrainingDiverged carrying
// the last state whose evaluation was finite.
template <class K, class NK>
TrainOutcome<K, NK> train(const PointsMatrix &X, const Eigen::VectorXd &y,
                          const Eigen::VectorXd *weights, SvgpState<K, NK> state,
                          const TrainConfig &cfg) {
  const int n = static_cast<int>(X.rows());
  if (n == 0) throw DataError("train: empty dataset");
  if (y.size() != n) throw DataError("train: targets do not match data");
  if (cfg.steps < 0 || cfg.batch_size <= 0 || cfg.learning_rate <= 0.0)
    throw DataError("train: invalid optimiser configuration");

  Eigen::VectorXd wn;
  if (weights != nullptr) {
    if (weights->size() != n) throw DataError("train: weights do not match data");
    if (!(weights->array() > 0.0).all() || !weights->allFinite())
      throw DataError("train: weights must be finite and positive");
    wn = *weights * (static_cast<double>(n) / weights->sum());
  }

  const int b = std::min(cfg.batch_size, n);
  const bool full_batch = b >= n;
  CounterRng rng(cfg.seed, detail::kStreamBatch);

  Eigen::VectorXd flat = detail::pack_state(state);
  Eigen::VectorXd prev = flat;
  Eigen::VectorXd adam_m = Eigen::VectorXd::Zero(flat.size());
  Eigen::VectorXd adam_v = Eigen::VectorXd::Zero(flat.size());

  TrainOutcome<K, NK> out;
  PointsMatrix Xb(b, X.cols());
  Eigen::VectorXd yb(b), wb(b);
  SvgpGradients grads;

  for (int step = 1; step <= cfg.steps; ++step) {
    if (full_batch) {
      Xb = X;
      yb = y;
      if (weights != nullptr) wb = wn;
    } else {
      for (int i = 0; i < b; ++i) {
        const auto idx = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n)));
        Xb.row(i) = X.row(idx);
        yb[i] = y[idx];
        if (weights != nullptr) wb[i] = wn[idx];
      }
    }

    detail::unpack_state(flat, &state);
    double value = 0.0;
    try {
      value = detail::elbo_impl(Xb, yb, weights != nullptr ? &wb : nullptr, state,
                                static_cast<double>(n), &grads);
    } catch (const NumericalError &err) {
      // An optimiser step that walks into a numerically unusable region is a
      // divergence: report it with the last state that still evaluated.
      detail::unpack_state(prev, &state);
      throw TrainingDiverged<SvgpState<K, NK>>(
          std::string("train: numerical failure at step ") + std::to_string(step) + " (" +
              err.what() + ")",
          state, step);
    }
    Eigen::VectorXd g = detail::pack_grads(grads, state, cfg.train_inducing);
    if (!std::isfinite(value) || !g.allFinite()) {
      detail::unpack_state(prev, &state);
      throw TrainingDiverged<SvgpState<K, NK>>(
          "train: non-finite objective or gradient at step " + std::to_string(step), state, step);
    }
    prev = flat;

    if (step == 1 || step == cfg.steps || (cfg.trace_every > 0 && step % cfg.trace_every == 0)) {
      out.trace_steps.push_back(step);
      out.elbo_trace.push_back(value);
    }

    adam_m = cfg.adam_beta1 * adam_m + (1.0 - cfg.adam_beta1) * g;
    adam_v = cfg.adam_beta2 * adam_v + (1.0 - cfg.adam_beta2) * g.array().square().matrix();
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, step);
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, step);
    flat.array() += cfg.learning_rate * (adam_m.array() / bc1) /
                    ((adam_v.array() / bc2).sqrt() + cfg.adam_eps);

    detail::unpack_state(flat, &state);
    detail::wrap_angular_inducing(&state);
    flat = detail::pack_state(state);
  }

  detail::unpack_state(flat, &state);
  out.state = std::move(state);
  return out;
}

}  // namespace tgp

#endif  // TGP_SVGP_HPP
