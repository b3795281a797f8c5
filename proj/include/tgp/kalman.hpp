// Linear-Gaussian state-space machinery: filtering, RTS smoothing, and
// expectation-maximization for the noise covariances and the initial state.
//
// The model is time-invariant with affine offsets:
//   x_{t+1} = A x_t + b + w_t,   w_t ~ N(0, Q)
//   y_t     = C x_t + d + v_t,   v_t ~ N(0, R)
// EM re-estimates Q, R, mu0, Sigma0 and keeps A, C, b, d fixed (the
// dynamics are dictated by the kinematic model, not learned).  Every
// iteration is guaranteed not to decrease the observed-data log-likelihood;
// covariance updates that lose positive definiteness are floored at
// 1e-9 * I, and each such repair is reported as a warning string.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "tgp/common.hpp"

namespace tgp {

struct KalmanParams {
  Eigen::MatrixXd A;   // state transition
  Eigen::MatrixXd C;   // observation map
  Eigen::MatrixXd Q;   // transition noise covariance
  Eigen::MatrixXd R;   // observation noise covariance
  Eigen::VectorXd b;   // transition offset
  Eigen::VectorXd d;   // observation offset
  Eigen::VectorXd mu0;
  Eigen::MatrixXd Sigma0;

  int state_dim() const { return static_cast<int>(A.rows()); }
  int obs_dim() const { return static_cast<int>(C.rows()); }

  void validate() const {
    const auto n = A.rows();
    const auto m = C.rows();
    if (A.cols() != n) throw DataError("kalman: A must be square");
    if (C.cols() != n) throw DataError("kalman: C column count must match the state dimension");
    if (Q.rows() != n || Q.cols() != n) throw DataError("kalman: Q must be state x state");
    if (R.rows() != m || R.cols() != m)
      throw DataError("kalman: R must be observation x observation");
    if (b.size() != n || d.size() != m || mu0.size() != n)
      throw DataError("kalman: offset/initial-state sizes disagree with A and C");
    if (Sigma0.rows() != n || Sigma0.cols() != n)
      throw DataError("kalman: Sigma0 must be state x state");
    for (const auto *mat : {&Q, &R, &Sigma0}) {
      if (((*mat) - mat->transpose()).cwiseAbs().maxCoeff() > 1e-9)
        throw DataError("kalman: covariance matrices must be symmetric");
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(*mat, Eigen::EigenvaluesOnly);
      if (es.eigenvalues().minCoeff() < -1e-9)
        throw DataError("kalman: covariance matrices must be positive semi-definite");
    }
  }
};

// Convenience constructor for the per-axis constant-velocity model used by
// the descent-rate estimator: state (position, velocity), position observed.
inline KalmanParams constant_velocity_params(double dt, double q_scale, double r_scale,
                                             double pos0, double vel0) {
  KalmanParams p;
  p.A.resize(2, 2);
  p.A << 1.0, dt, 0.0, 1.0;
  p.C.resize(1, 2);
  p.C << 1.0, 0.0;
  p.Q = q_scale * Eigen::MatrixXd::Identity(2, 2);
  p.R = r_scale * Eigen::MatrixXd::Identity(1, 1);
  p.b = Eigen::VectorXd::Zero(2);
  p.d = Eigen::VectorXd::Zero(1);
  p.mu0.resize(2);
  p.mu0 << pos0, vel0;
  p.Sigma0 = 10.0 * Eigen::MatrixXd::Identity(2, 2);
  return p;
}

struct KalmanSmoothed {
  Eigen::MatrixXd means;               // T x state_dim, smoothed E[x_t | y_1..T]
  std::vector<Eigen::MatrixXd> covs;   // smoothed Cov[x_t | y_1..T]
  double loglik = 0.0;                 // observed-data log-likelihood of the run
};

namespace detail {

struct KalmanPass {
  // Filtered and one-step-predicted moments, plus the pieces the smoother
  // and the EM statistics need.
  std::vector<Eigen::VectorXd> x_pred, x_filt;
  std::vector<Eigen::MatrixXd> p_pred, p_filt;
  Eigen::MatrixXd last_gain_c;  // (I - K_T C), for the lag-one recursion
  double loglik = 0.0;
};

inline KalmanPass kalman_filter(const Eigen::MatrixXd &obs, const KalmanParams &p) {
  const auto T = obs.rows();
  const int n = p.state_dim();
  KalmanPass out;
  out.x_pred.reserve(T);
  out.x_filt.reserve(T);
  out.p_pred.reserve(T);
  out.p_filt.reserve(T);
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd xf;
  Eigen::MatrixXd pf;
  for (Eigen::Index t = 0; t < T; ++t) {
    Eigen::VectorXd xp = (t == 0) ? p.mu0 : Eigen::VectorXd(p.A * xf + p.b);
    Eigen::MatrixXd pp = (t == 0) ? p.Sigma0 : Eigen::MatrixXd(p.A * pf * p.A.transpose() + p.Q);
    pp = 0.5 * (pp + pp.transpose()).eval();

    const Eigen::VectorXd e = obs.row(t).transpose() - p.C * xp - p.d;
    Eigen::MatrixXd S = p.C * pp * p.C.transpose() + p.R;
    S = 0.5 * (S + S.transpose()).eval();
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success)
      throw NumericalError("kalman filter: innovation covariance is not positive definite");
    const Eigen::VectorXd alpha = llt.solve(e);
    double logdet = 0.0;
    for (int i = 0; i < p.obs_dim(); ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
    out.loglik +=
        -0.5 * (p.obs_dim() * std::log(2.0 * kPi) + logdet + e.dot(alpha));

    const Eigen::MatrixXd K = llt.solve(p.C * pp).transpose();
    xf = xp + K * e;
    const Eigen::MatrixXd ikc = I - K * p.C;
    pf = ikc * pp * ikc.transpose() + K * p.R * K.transpose();  // Joseph form
    pf = 0.5 * (pf + pf.transpose()).eval();

    out.x_pred.push_back(std::move(xp));
    out.p_pred.push_back(std::move(pp));
    out.x_filt.push_back(xf);
    out.p_filt.push_back(pf);
    if (t == T - 1) out.last_gain_c = ikc;
  }
  return out;
}

}  // namespace detail

inline double kalman_loglik(const Eigen::MatrixXd &obs, const KalmanParams &p) {
  p.validate();
  if (obs.cols() != p.obs_dim())
    throw DataError("kalman: observation width disagrees with C");
  return detail::kalman_filter(obs, p).loglik;
}

// Rauch-Tung-Striebel smoother.  Also returns the lag-one smoothed
// cross-covariances when a non-null pointer is supplied (the EM E-step
// needs them; plain smoothing does not).
inline KalmanSmoothed kalman_smooth(const Eigen::MatrixXd &obs, const KalmanParams &p,
                                    std::vector<Eigen::MatrixXd> *lag_one = nullptr) {
  p.validate();
  if (obs.cols() != p.obs_dim())
    throw DataError("kalman: observation width disagrees with C");
  const auto T = obs.rows();
  if (T < 2) throw DataError("kalman: need at least two observations to smooth");
  const auto pass = detail::kalman_filter(obs, p);
  const int n = p.state_dim();

  std::vector<Eigen::VectorXd> xs(static_cast<std::size_t>(T));
  std::vector<Eigen::MatrixXd> ps(static_cast<std::size_t>(T));
  std::vector<Eigen::MatrixXd> J(static_cast<std::size_t>(T - 1));
  xs[T - 1] = pass.x_filt[T - 1];
  ps[T - 1] = pass.p_filt[T - 1];
  for (Eigen::Index t = T - 2; t >= 0; --t) {
    Eigen::LLT<Eigen::MatrixXd> llt(pass.p_pred[t + 1]);
    if (llt.info() != Eigen::Success)
      throw NumericalError("kalman smoother: predicted covariance is not positive definite");
    J[t] = llt.solve(p.A * pass.p_filt[t]).transpose();
    xs[t] = pass.x_filt[t] + J[t] * (xs[t + 1] - pass.x_pred[t + 1]);
    ps[t] = pass.p_filt[t] + J[t] * (ps[t + 1] - pass.p_pred[t + 1]) * J[t].transpose();
    ps[t] = 0.5 * (ps[t] + ps[t].transpose()).eval();
  }

  if (lag_one != nullptr) {
    // Shumway-Stoffer recursion for Cov[x_t, x_{t-1} | y_1..T].
    auto &lo = *lag_one;
    lo.assign(static_cast<std::size_t>(T), Eigen::MatrixXd());
    lo[T - 1] = pass.last_gain_c * p.A * pass.p_filt[T - 2];
    for (Eigen::Index t = T - 2; t >= 1; --t)
      lo[t] = pass.p_filt[t] * J[t - 1].transpose() +
              J[t] * (lo[t + 1] - p.A * pass.p_filt[t]) * J[t - 1].transpose();
  }

  KalmanSmoothed out;
  out.means.resize(T, n);
  out.covs.resize(static_cast<std::size_t>(T));
  for (Eigen::Index t = 0; t < T; ++t) {
    out.means.row(t) = xs[t].transpose();
    out.covs[static_cast<std::size_t>(t)] = ps[t];
  }
  out.loglik = pass.loglik;
  return out;
}

struct KalmanEmResult {
  KalmanParams params;
  KalmanSmoothed smoothed;
  Eigen::VectorXd loglik_trace;      // one entry per EM iteration
  std::vector<std::string> warnings;
};

namespace detail {

// Clamp a symmetric matrix onto the PSD cone with eigenvalue floor 1e-9.
inline bool floor_psd(Eigen::MatrixXd *m) {
  *m = 0.5 * (*m + m->transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(*m);
  if (es.eigenvalues().minCoeff() >= 1e-9) return false;
  const Eigen::VectorXd clamped = es.eigenvalues().cwiseMax(1e-9);
  *m = es.eigenvectors() * clamped.asDiagonal() * es.eigenvectors().transpose();
  *m = 0.5 * (*m + m->transpose()).eval();
  return true;
}

}  // namespace detail

inline KalmanEmResult kalman_em(const Eigen::MatrixXd &obs, const KalmanParams &initial,
                                int n_iterations) {
  initial.validate();
  if (obs.rows() < 10) throw DataError("kalman_em: need at least 10 observations");
  if (obs.cols() != initial.obs_dim())
    throw DataError("kalman: observation width disagrees with C");
  if (n_iterations < 1) throw DataError("kalman_em: need at least one iteration");

  const auto T = obs.rows();
  KalmanEmResult out;
  out.params = initial;
  out.loglik_trace.resize(n_iterations);

  std::vector<Eigen::MatrixXd> lag_one;
  for (int it = 0; it < n_iterations; ++it) {
    KalmanParams &p = out.params;
    const KalmanSmoothed sm = kalman_smooth(obs, p, &lag_one);
    out.loglik_trace[it] = sm.loglik;

    // M step.  mu0/Sigma0 from the smoothed start; Q from smoothed
    // transition residuals; R from smoothed observation residuals.
    const Eigen::VectorXd xs0 = sm.means.row(0).transpose();
    Eigen::MatrixXd sigma0 = sm.covs[0];

    Eigen::MatrixXd q_acc = Eigen::MatrixXd::Zero(p.state_dim(), p.state_dim());
    for (Eigen::Index t = 0; t + 1 < T; ++t) {
      const Eigen::VectorXd x_next = sm.means.row(t + 1).transpose();
      const Eigen::VectorXd x_cur = sm.means.row(t).transpose();
      const Eigen::VectorXd e = x_next - p.A * x_cur - p.b;
      const Eigen::MatrixXd &cross = lag_one[static_cast<std::size_t>(t + 1)];
      q_acc += e * e.transpose() + sm.covs[static_cast<std::size_t>(t + 1)] +
               p.A * sm.covs[static_cast<std::size_t>(t)] * p.A.transpose() -
               cross * p.A.transpose() - p.A * cross.transpose();
    }
    Eigen::MatrixXd q_new = q_acc / static_cast<double>(T - 1);

    Eigen::MatrixXd r_acc = Eigen::MatrixXd::Zero(p.obs_dim(), p.obs_dim());
    for (Eigen::Index t = 0; t < T; ++t) {
      const Eigen::VectorXd x_cur = sm.means.row(t).transpose();
      const Eigen::VectorXd e = obs.row(t).transpose() - p.C * x_cur - p.d;
      r_acc += e * e.transpose() + p.C * sm.covs[static_cast<std::size_t>(t)] * p.C.transpose();
    }
    Eigen::MatrixXd r_new = r_acc / static_cast<double>(T);

    const char *names[3] = {"Sigma0", "Q", "R"};
    Eigen::MatrixXd *mats[3] = {&sigma0, &q_new, &r_new};
    for (int k = 0; k < 3; ++k) {
      if (detail::floor_psd(mats[k]))
        out.warnings.push_back(std::string("kalman_em: ") + names[k] +
                               " lost positive definiteness at iteration " +
                               std::to_string(it) + "; floored at 1e-9");
    }

    p.mu0 = xs0;
    p.Sigma0 = sigma0;
    p.Q = q_new;
    p.R = r_new;
  }
  out.smoothed = kalman_smooth(obs, out.params, nullptr);
  return out;
}

}  // namespace tgp
