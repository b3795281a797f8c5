#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

#include "support/exact_gp.hpp"
#include "support/test_util.hpp"
#include "tgp/svgp.hpp"

namespace {

using Catch::Approx;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Fixtures.  Everything is deterministic: inputs come from fixed arithmetic
// patterns or counter-based RNG with pinned seeds.
// ---------------------------------------------------------------------------

// Smallest distance from any pairwise angular configuration to a geodesic
// kink (distance 0 or pi) or to the Wendland support boundary c.  The
// gradient fixtures must keep this margin comfortably above the FD step.
double kink_margin(const std::vector<double> &thetas, double c) {
  double margin = tgp::kPi;
  for (std::size_t i = 0; i < thetas.size(); ++i) {
    for (std::size_t j = i + 1; j < thetas.size(); ++j) {
      const double t = tgp::geodesic_distance(thetas[i], thetas[j]);
      margin = std::min({margin, t, tgp::kPi - t, std::abs(t - c)});
    }
  }
  return margin;
}

struct TunnelInputs {
  tgp::PointsMatrix X;
  VectorXd y;
  VectorXd w;
};

TunnelInputs make_tunnel_inputs(int n) {
  TunnelInputs f;
  f.X.resize(n, 2);
  f.y.resize(n);
  f.w.resize(n);
  for (int i = 0; i < n; ++i) {
    f.X(i, 0) = tgp::wrap_angle(0.37 + 0.683 * i);
    f.X(i, 1) = -1.5 + 3.0 * (i + 0.5) / n + 0.07 * std::sin(2.3 * i);
    f.y[i] = 0.9 * std::sin(f.X(i, 0) + 0.4 * f.X(i, 1)) + 0.1 * std::cos(3.0 * i);
    f.w[i] = 0.6 + 0.25 * (1.0 + std::sin(1.7 * i));
  }
  return f;
}

// Five inducing points on (theta, l) offset from the data pattern.
tgp::PointsMatrix make_tunnel_inducing(int m, double theta0, double theta_step) {
  tgp::PointsMatrix Z(m, 2);
  for (int p = 0; p < m; ++p) {
    Z(p, 0) = tgp::wrap_angle(theta0 + theta_step * p);
    Z(p, 1) = -1.2 + 0.6 * p;
  }
  return Z;
}

MatrixXd patterned_l_raw(int m, double diag0, double diag_step, double off_scale) {
  MatrixXd raw = MatrixXd::Zero(m, m);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < i; ++j) raw(i, j) = off_scale * std::cos(2.1 * i + 0.7 * j);
    raw(i, i) = diag0 + diag_step * i;
  }
  return raw;
}

tgp::SvgpState<tgp::TunnelKernel> make_const_noise_state() {
  tgp::SvgpState<tgp::TunnelKernel> st;
  st.kernel = tgp::TunnelKernel(tgp::kPi / 2.0, 4.0, 1.2, 0.8, 1.3);
  st.Z = make_tunnel_inducing(5, 1.1, 0.9);
  st.m.resize(5);
  for (int p = 0; p < 5; ++p) st.m[p] = 0.4 * std::sin(1.0 + p);
  st.L_raw = patterned_l_raw(5, 0.3, -0.15, 0.12);
  st.noise_kind = tgp::NoiseKind::kConstant;
  st.log_beta = 0.35;
  st.jitter_rel = 1e-6;
  return st;
}

tgp::SvgpState<tgp::DiametralKernel, tgp::MirroredTunnelKernel> make_hetero_state() {
  tgp::SvgpState<tgp::DiametralKernel, tgp::MirroredTunnelKernel> st;
  st.kernel = tgp::DiametralKernel(tgp::TunnelKernel(tgp::kPi / 2.0, 4.0, 1.3, 0.9, 1.1));
  st.Z = make_tunnel_inducing(5, 1.1, 0.9);
  st.m.resize(5);
  for (int p = 0; p < 5; ++p) st.m[p] = 0.35 * std::cos(0.8 + 1.3 * p);
  st.L_raw = patterned_l_raw(5, 0.25, -0.12, 0.1);
  st.noise_kind = tgp::NoiseKind::kHeteroscedastic;
  st.jitter_rel = 1e-6;
  tgp::LatentNoiseGp<tgp::MirroredTunnelKernel> lat;
  lat.kernel = tgp::MirroredTunnelKernel(tgp::TunnelKernel(tgp::kPi / 2.0, 4.0, 0.7, 1.1, 1.7));
  lat.Z.resize(4, 2);
  for (int p = 0; p < 4; ++p) {
    lat.Z(p, 0) = tgp::wrap_angle(0.53 + 1.21 * p);
    lat.Z(p, 1) = -1.0 + 0.55 * p;
  }
  lat.m.resize(4);
  for (int p = 0; p < 4; ++p) lat.m[p] = 0.3 * std::cos(1.0 + p);
  lat.L_raw = patterned_l_raw(4, 0.2, -0.13, 0.1);
  lat.offset = -1.2;
  st.latent = lat;
  return st;
}

// All theta values that take part in any kernel evaluation of a fixture.
template <class K, class NK>
std::vector<double> all_thetas(const tgp::SvgpState<K, NK> &st, const tgp::PointsMatrix &X,
                               int theta_col) {
  std::vector<double> t;
  for (int i = 0; i < X.rows(); ++i) t.push_back(X(i, theta_col));
  for (int i = 0; i < st.Z.rows(); ++i) t.push_back(st.Z(i, theta_col));
  if (st.latent.has_value())
    for (int i = 0; i < st.latent->Z.rows(); ++i) t.push_back(st.latent->Z(i, theta_col));
  return t;
}

// Central finite differences over every packed coordinate, spec step 1e-5,
// relative tolerance 1e-4 (absolute floor for near-zero entries).
template <class K, class NK>
void check_elbo_gradients(const tgp::SvgpState<K, NK> &st, const tgp::PointsMatrix &X,
                          const VectorXd &y, const VectorXd *w, double total_n) {
  tgp::SvgpGradients grads;
  tgp::elbo_grad(X, y, st, total_n, &grads, w);
  const VectorXd flat = tgp::detail::pack_state(st);
  const VectorXd analytic = tgp::detail::pack_grads(grads, st, true);
  const double h = 1e-5;
  auto st_pert = st;
  for (int i = 0; i < flat.size(); ++i) {
    VectorXd fp = flat, fm = flat;
    fp[i] += h;
    fm[i] -= h;
    tgp::detail::unpack_state(fp, &st_pert);
    const double ep = tgp::elbo(X, y, st_pert, total_n, w);
    tgp::detail::unpack_state(fm, &st_pert);
    const double em = tgp::elbo(X, y, st_pert, total_n, w);
    const double fd = (ep - em) / (2.0 * h);
    const double tol = 1e-4 * std::max({1.0, std::abs(analytic[i]), std::abs(fd)});
    INFO("coordinate " << i << " analytic " << analytic[i] << " fd " << fd);
    REQUIRE(std::abs(analytic[i] - fd) <= tol);
  }
}

// Optimal free-form q(u) for fixed hyper-parameters when Z sits on the data,
// derived in closed form from the stationarity of the bound.  Mirrors the
// jitter the library applies so the construction is exactly optimal for the
// objective under test.
template <class Kern>
tgp::SvgpState<Kern> collapsed_state(const tgp::PointsMatrix &X, const VectorXd &y,
                                     const Kern &kern, double noise_var) {
  const int n = static_cast<int>(X.rows());
  tgp::SvgpState<Kern> st;
  st.kernel = kern;
  st.Z = X;
  st.noise_kind = tgp::NoiseKind::kConstant;
  st.log_beta = -std::log(noise_var);
  st.jitter_rel = 1e-6;
  MatrixXd K = test_support::dense_gram(X, X, kern);
  MatrixXd Kj = K;
  Kj.diagonal().array() += st.jitter_rel * K.diagonal().mean();
  Eigen::LLT<MatrixXd> llt(Kj);
  REQUIRE(llt.info() == Eigen::Success);
  const MatrixXd A = llt.solve(K);
  const MatrixXd Kinv = llt.solve(MatrixXd::Identity(n, n));
  const double beta = 1.0 / noise_var;
  MatrixXd P = beta * A * A.transpose() + Kinv;
  P = 0.5 * (P + P.transpose()).eval();
  const MatrixXd S = P.inverse();
  st.m = S * (beta * (A * y));
  Eigen::LLT<MatrixXd> llt_s(0.5 * (S + S.transpose()));
  REQUIRE(llt_s.info() == Eigen::Success);
  st.L_raw = tgp::raw_from_cholesky(MatrixXd(llt_s.matrixL()));
  return st;
}

// Deterministic 1-D regression set drawn from the counter RNG.
struct SineData {
  tgp::PointsMatrix X;
  VectorXd y;
};

SineData make_sine_data(int n, double noise_std, std::uint64_t seed) {
  SineData d;
  d.X.resize(n, 1);
  d.y.resize(n);
  tgp::CounterRng rng(seed, 900);
  for (int i = 0; i < n; ++i) {
    d.X(i, 0) = rng.uniform(-3.0, 3.0);
    d.y[i] = std::sin(d.X(i, 0)) + noise_std * rng.normal();
  }
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// Cholesky-with-jitter and the KL building block.
// ---------------------------------------------------------------------------

TEST_CASE("jittered cholesky escalates on rank deficiency and reports hard failures") {
  MatrixXd rank1 = MatrixXd::Constant(3, 3, 2.0);
  const auto llt = tgp::chol_with_jitter(rank1, 1e-6);
  const MatrixXd L(llt.matrixL());
  REQUIRE(((L * L.transpose()) - rank1).cwiseAbs().maxCoeff() <= 0.1);

  MatrixXd indefinite = MatrixXd::Identity(3, 3);
  indefinite(2, 2) = -1.0;
  REQUIRE_THROWS_AS(tgp::chol_with_jitter(indefinite, 1e-6), tgp::NumericalError);
}

TEST_CASE("kl divergence closed forms, positivity, and failure modes") {
  SECTION("scalar oracle at m=1, s=1, k=1") {
    VectorXd m(1);
    m << 1.0;
    MatrixXd L = MatrixXd::Identity(1, 1);
    MatrixXd K = MatrixXd::Identity(1, 1);
    REQUIRE(tgp::kl_q_p(m, L, K) == Approx(0.5).epsilon(1e-12));
  }

  SECTION("scalar formula half*(m^2 + s - 1 - log s) against unit prior") {
    for (int c = 0; c < 10; ++c) {
      const double mv = -1.5 + 0.37 * c;
      const double sd = 0.3 + 0.21 * c;  // standard deviation of q
      VectorXd m(1);
      m << mv;
      MatrixXd L = MatrixXd::Constant(1, 1, sd);
      MatrixXd K = MatrixXd::Identity(1, 1);
      const double expected = 0.5 * (mv * mv + sd * sd - 1.0 - std::log(sd * sd));
      REQUIRE(tgp::kl_q_p(m, L, K) == Approx(expected).margin(1e-12));
    }
  }

  SECTION("q equal to p gives zero") {
    tgp::CounterRng rng(5, 1);
    MatrixXd A(4, 4);
    for (int i = 0; i < 16; ++i) A(i / 4, i % 4) = rng.normal();
    const MatrixXd K = A * A.transpose() + MatrixXd::Identity(4, 4);
    const Eigen::LLT<MatrixXd> llt(K);
    REQUIRE(std::abs(tgp::kl_q_p(VectorXd::Zero(4), MatrixXd(llt.matrixL()), K)) <= 1e-9);
  }

  SECTION("non-negative on random valid triples") {
    tgp::CounterRng rng(17, 2);
    for (int rep = 0; rep < 100; ++rep) {
      const int M = 4;
      MatrixXd A(M, M);
      for (int i = 0; i < M * M; ++i) A(i / M, i % M) = rng.normal();
      const MatrixXd K = A * A.transpose() + MatrixXd::Identity(M, M);
      MatrixXd L = MatrixXd::Zero(M, M);
      for (int i = 0; i < M; ++i) {
        for (int j = 0; j < i; ++j) L(i, j) = 0.4 * rng.normal();
        L(i, i) = tgp::softplus(rng.normal());
      }
      VectorXd m(M);
      for (int i = 0; i < M; ++i) m[i] = rng.normal();
      REQUIRE(tgp::kl_q_p(m, L, K) >= -1e-9);
    }
  }

  SECTION("non positive definite prior raises") {
    VectorXd m = VectorXd::Zero(2);
    MatrixXd L = MatrixXd::Identity(2, 2);
    MatrixXd K = MatrixXd::Identity(2, 2);
    K(1, 1) = -2.0;
    REQUIRE_THROWS_AS(tgp::kl_q_p(m, L, K), tgp::NumericalError);
  }
}

// ---------------------------------------------------------------------------
// ELBO closed forms and bounds.
// ---------------------------------------------------------------------------

TEST_CASE("elbo matches the one-point one-inducing closed form") {
  // With y = 0, m = 0 and S equal to the (jittered) prior, the residual and
  // KL vanish and the Nystrom + variational corrections recombine into the
  // full prior variance: ELBO = -log(2 pi)/2 + log(beta)/2 - beta*k(x,x)/2.
  tgp::SvgpState<tgp::TunnelKernel> st;
  st.kernel = tgp::TunnelKernel(tgp::kPi / 2.0, 4.0, 1.5, 0.8, 1.2);
  st.Z.resize(1, 2);
  st.Z << 0.3, 0.5;
  st.m = VectorXd::Zero(1);
  st.noise_kind = tgp::NoiseKind::kConstant;
  st.log_beta = 0.4;
  st.jitter_rel = 1e-6;
  const double kxx = 1.5 * 0.8;  // product of the two variance factors
  const double kprior = kxx * (1.0 + st.jitter_rel);
  st.L_raw = tgp::raw_from_cholesky(MatrixXd::Constant(1, 1, std::sqrt(kprior)));

  tgp::PointsMatrix X(1, 2);
  X << 1.9, -0.4;
  VectorXd y = VectorXd::Zero(1);
  const double expected =
      -0.5 * std::log(2.0 * tgp::kPi) + 0.5 * st.log_beta - 0.5 * std::exp(st.log_beta) * kxx;
  REQUIRE(tgp::elbo(X, y, st, 1.0) == Approx(expected).epsilon(1e-10));
}

TEST_CASE("elbo never exceeds the exact log marginal likelihood") {
  tgp::CounterRng rng(23, 3);
  for (int n : {10, 30, 50}) {
    tgp::PointsMatrix X(n, 1);
    VectorXd y(n);
    for (int i = 0; i < n; ++i) {
      X(i, 0) = rng.uniform(-3.0, 3.0);
      y[i] = std::sin(1.3 * X(i, 0)) + 0.3 * rng.normal();
    }
    Eigen::Matrix<double, 1, 1> ls;
    ls << 0.9;
    const tgp::RbfKernel<1> kern(1.1, ls);
    const double noise_var = 0.25;
    const double logml = test_support::exact_log_marginal(X, y, kern, noise_var);

    for (int rep = 0; rep < 3; ++rep) {
      tgp::SvgpState<tgp::RbfKernel<1>> st;
      st.kernel = kern;
      st.noise_kind = tgp::NoiseKind::kConstant;
      st.log_beta = -std::log(noise_var);
      st.jitter_rel = 1e-6;
      // Alternate between full-rank (Z = X) and a thin random inducing set.
      if (rep % 2 == 0) {
        st.Z = X;
      } else {
        st.Z.resize(7, 1);
        for (int p = 0; p < 7; ++p) st.Z(p, 0) = rng.uniform(-3.0, 3.0);
      }
      const int M = static_cast<int>(st.Z.rows());
      st.m.resize(M);
      for (int p = 0; p < M; ++p) st.m[p] = 0.5 * rng.normal();
      st.L_raw = MatrixXd::Zero(M, M);
      for (int i = 0; i < M; ++i) {
        for (int j = 0; j < i; ++j) st.L_raw(i, j) = 0.1 * rng.normal();
        st.L_raw(i, i) = rng.uniform(-0.5, 0.5);
      }
      const double bound = tgp::elbo(X, y, st, static_cast<double>(n));
      REQUIRE(bound <= logml + 1e-7 * std::abs(logml) + 1e-9);
    }
  }
}

TEST_CASE("optimal full-rank variational state collapses onto the exact posterior") {
  const int n = 30;
  tgp::PointsMatrix X(n, 1);
  VectorXd y(n);
  tgp::CounterRng rng(31, 4);
  for (int i = 0; i < n; ++i) {
    X(i, 0) = -3.0 + 6.0 * (i + 0.5) / n + 0.05 * std::sin(3.0 * i);
    y[i] = std::sin(1.2 * X(i, 0)) + 0.3 * rng.normal();
  }
  Eigen::Matrix<double, 1, 1> ls;
  ls << 0.9;
  const tgp::RbfKernel<1> kern(1.4, ls);
  const double noise_var = 0.09;
  const auto st = collapsed_state(X, y, kern, noise_var);

  const double logml = test_support::exact_log_marginal(X, y, kern, noise_var);
  const double bound = tgp::elbo(X, y, st, static_cast<double>(n));
  REQUIRE(std::abs(bound - logml) <= 1e-3 * std::abs(logml));

  tgp::PointsMatrix Xq(25, 1);
  for (int i = 0; i < 25; ++i) Xq(i, 0) = -2.7 + 5.4 * i / 24.0;
  VectorXd mean_ex, var_ex;
  test_support::exact_predict(X, y, kern, noise_var, Xq, &mean_ex, &var_ex, false);
  const auto pred = tgp::predict(st, Xq, false);
  REQUIRE((pred.mean - mean_ex).norm() <= 1e-3 * mean_ex.norm());
  for (int i = 0; i < 25; ++i)
    REQUIRE(std::abs(pred.var[i] - var_ex[i]) <= 1e-2 * std::abs(var_ex[i]) + 1e-6);
}

TEST_CASE("trained full-rank svgp matches the exact posterior mean") {
  const int n = 30;
  SineData d = make_sine_data(n, 0.1, 41);
  Eigen::Matrix<double, 1, 1> ls;
  ls << 1.0;
  tgp::TrainConfig cfg;
  cfg.num_inducing = n;
  cfg.batch_size = 400;  // larger than n: deterministic full-batch steps
  cfg.steps = 6000;
  cfg.learning_rate = 3e-3;
  cfg.seed = 3;
  cfg.train_inducing = false;
  auto st0 = tgp::init_state(d.X, d.y, tgp::RbfKernel<1>(1.0, ls), cfg);
  st0.Z = d.X;  // full rank with inducing points on the data
  const auto out = tgp::train(d.X, d.y, nullptr, st0, cfg);

  // Compare against the dense posterior under the hyper-parameters the run
  // ended with; the variational fit should have closed the gap.
  const double noise_var = std::exp(-out.state.log_beta);
  tgp::PointsMatrix Xq(25, 1);
  for (int i = 0; i < 25; ++i) Xq(i, 0) = -2.7 + 5.4 * i / 24.0;
  VectorXd mean_ex, var_ex;
  test_support::exact_predict(d.X, d.y, out.state.kernel, noise_var, Xq, &mean_ex, &var_ex,
                              false);
  const auto pred = tgp::predict(out.state, Xq, false);
  REQUIRE((pred.mean - mean_ex).norm() <= 1e-2 * mean_ex.norm());
}

// ---------------------------------------------------------------------------
// Gradient checks: every trainable parameter class against central
// differences on the fixed 20-point, M=5 fixture.
// ---------------------------------------------------------------------------

TEST_CASE("analytic elbo gradients match finite differences") {
  const auto inputs = make_tunnel_inputs(20);

  SECTION("constant noise, tunnel kernel, importance weights") {
    const auto st = make_const_noise_state();
    auto thetas = all_thetas(st, inputs.X, 0);
    REQUIRE(kink_margin(thetas, tgp::kPi / 2.0) > 1e-3);
    check_elbo_gradients(st, inputs.X, inputs.y, &inputs.w, 37.0);
  }

  SECTION("heteroscedastic noise, antipodal kernels") {
    const auto st = make_hetero_state();
    auto thetas = all_thetas(st, inputs.X, 0);
    REQUIRE(kink_margin(thetas, tgp::kPi / 2.0) > 1e-3);
    check_elbo_gradients(st, inputs.X, inputs.y, &inputs.w, 37.0);
  }

  SECTION("constant noise, rbf kernel, unweighted") {
    tgp::SvgpState<tgp::RbfKernel<1>> st;
    Eigen::Matrix<double, 1, 1> ls;
    ls << 0.8;
    st.kernel = tgp::RbfKernel<1>(1.3, ls);
    st.Z.resize(5, 1);
    for (int p = 0; p < 5; ++p) st.Z(p, 0) = -1.6 + 0.8 * p;
    st.m.resize(5);
    for (int p = 0; p < 5; ++p) st.m[p] = 0.4 * std::sin(1.0 + p);
    st.L_raw = patterned_l_raw(5, 0.3, -0.15, 0.12);
    st.noise_kind = tgp::NoiseKind::kConstant;
    st.log_beta = 0.2;
    st.jitter_rel = 1e-6;
    tgp::PointsMatrix X(20, 1);
    VectorXd y(20);
    for (int i = 0; i < 20; ++i) {
      X(i, 0) = -2.0 + 4.0 * (i + 0.5) / 20.0;
      y[i] = std::sin(1.4 * X(i, 0)) + 0.1 * std::cos(5.0 * i);
    }
    check_elbo_gradients(st, X, y, nullptr, 20.0);
  }
}

// ---------------------------------------------------------------------------
// Structural ELBO properties.
// ---------------------------------------------------------------------------

TEST_CASE("elbo is invariant under batch reordering") {
  const auto inputs = make_tunnel_inputs(20);
  const auto st = make_const_noise_state();
  const double base = tgp::elbo(inputs.X, inputs.y, st, 40.0, &inputs.w);

  std::vector<int> perm(20);
  for (int i = 0; i < 20; ++i) perm[i] = (7 * i + 3) % 20;  // fixed bijection
  tgp::PointsMatrix Xp(20, 2);
  VectorXd yp(20), wp(20);
  for (int i = 0; i < 20; ++i) {
    Xp.row(i) = inputs.X.row(perm[i]);
    yp[i] = inputs.y[perm[i]];
    wp[i] = inputs.w[perm[i]];
  }
  const double permuted = tgp::elbo(Xp, yp, st, 40.0, &wp);
  REQUIRE(std::abs(base - permuted) <= 1e-10 * std::max(1.0, std::abs(base)));
}

TEST_CASE("doubling total_n doubles the data fit and leaves the kl terms") {
  const auto inputs = make_tunnel_inputs(20);

  SECTION("constant noise") {
    const auto st = make_const_noise_state();
    const double e1 = tgp::elbo(inputs.X, inputs.y, st, 20.0, &inputs.w);
    const double e2 = tgp::elbo(inputs.X, inputs.y, st, 40.0, &inputs.w);
    MatrixXd Kmm = tgp::gram_self(st.Z, st.kernel, 0.0);
    Kmm.diagonal().array() += st.jitter_rel * Kmm.diagonal().mean();
    const double kl = tgp::kl_q_p(st.m, tgp::materialize_cholesky(st.L_raw), Kmm);
    REQUIRE(e2 - 2.0 * e1 == Approx(kl).epsilon(1e-8));
  }

  SECTION("heteroscedastic noise adds the latent kl") {
    const auto st = make_hetero_state();
    const double e1 = tgp::elbo(inputs.X, inputs.y, st, 20.0, &inputs.w);
    const double e2 = tgp::elbo(inputs.X, inputs.y, st, 40.0, &inputs.w);
    MatrixXd Kmm = tgp::gram_self(st.Z, st.kernel, 0.0);
    Kmm.diagonal().array() += st.jitter_rel * Kmm.diagonal().mean();
    double kl = tgp::kl_q_p(st.m, tgp::materialize_cholesky(st.L_raw), Kmm);
    MatrixXd Kg = tgp::gram_self(st.latent->Z, st.latent->kernel, 0.0);
    Kg.diagonal().array() += st.jitter_rel * Kg.diagonal().mean();
    kl += tgp::kl_q_p(st.latent->m, tgp::materialize_cholesky(st.latent->L_raw), Kg);
    REQUIRE(e2 - 2.0 * e1 == Approx(kl).epsilon(1e-8));
  }
}

// ---------------------------------------------------------------------------
// Initialisation.
// ---------------------------------------------------------------------------

TEST_CASE("inducing initialisation spreads quantiles, lattices and circles") {
  tgp::CounterRng data_rng(77, 5);

  SECTION("one dimension: ordered quantiles inside the data range") {
    tgp::PointsMatrix X(200, 1);
    for (int i = 0; i < 200; ++i) X(i, 0) = data_rng.uniform(0.0, 10.0);
    const auto Z = tgp::init_inducing(X, 8, -1, tgp::CounterRng(1, 2));
    REQUIRE(Z.rows() == 8);
    for (int i = 1; i < 8; ++i) REQUIRE(Z(i, 0) >= Z(i - 1, 0));
    for (int i = 0; i < 8; ++i) {
      REQUIRE(Z(i, 0) >= X.col(0).minCoeff());
      REQUIRE(Z(i, 0) <= X.col(0).maxCoeff());
      // Uniform data: quantiles land near 10*(i+0.5)/8.
      REQUIRE(std::abs(Z(i, 0) - 10.0 * (i + 0.5) / 8.0) <= 0.6);
    }
  }

  SECTION("perfect square count on two dimensions forms a lattice") {
    tgp::PointsMatrix X(300, 2);
    for (int i = 0; i < 300; ++i) {
      X(i, 0) = data_rng.uniform(-1.0, 1.0);
      X(i, 1) = data_rng.uniform(5.0, 9.0);
    }
    const auto Z = tgp::init_inducing(X, 9, -1, tgp::CounterRng(1, 2));
    for (int dim = 0; dim < 2; ++dim) {
      std::vector<double> vals;
      for (int i = 0; i < 9; ++i) vals.push_back(Z(i, dim));
      std::sort(vals.begin(), vals.end());
      vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
      REQUIRE(vals.size() == 3);
    }
  }

  SECTION("non-lattice count pairs per-dimension quantiles") {
    tgp::PointsMatrix X(300, 2);
    for (int i = 0; i < 300; ++i) {
      X(i, 0) = data_rng.uniform(-1.0, 1.0);
      X(i, 1) = data_rng.uniform(5.0, 9.0);
    }
    const auto Z = tgp::init_inducing(X, 7, -1, tgp::CounterRng(1, 2));
    REQUIRE(Z.rows() == 7);
    // Column 0 keeps quantile order; column 1 is a permutation of its own
    // quantile sequence.
    for (int i = 1; i < 7; ++i) REQUIRE(Z(i, 0) >= Z(i - 1, 0));
    std::vector<double> col1;
    for (int i = 0; i < 7; ++i) col1.push_back(Z(i, 1));
    std::sort(col1.begin(), col1.end());
    for (int i = 1; i < 7; ++i) REQUIRE(col1[i] >= col1[i - 1]);
    REQUIRE(col1.front() >= 5.0);
    REQUIRE(col1.back() <= 9.0);
  }

  SECTION("angular dimension is spaced uniformly on the circle") {
    tgp::PointsMatrix X(100, 2);
    for (int i = 0; i < 100; ++i) {
      X(i, 0) = data_rng.uniform(0.0, tgp::kPi);  // data occupies a half circle
      X(i, 1) = data_rng.uniform(-1.0, 1.0);
    }
    const auto Z = tgp::init_inducing(X, 6, 0, tgp::CounterRng(1, 2));
    std::vector<double> theta;
    for (int i = 0; i < 6; ++i) theta.push_back(Z(i, 0));
    std::sort(theta.begin(), theta.end());
    for (int i = 0; i < 6; ++i)
      REQUIRE(theta[i] == Approx(-tgp::kPi + tgp::kTwoPi * (i + 0.5) / 6.0).margin(1e-12));
  }
}

TEST_CASE("state initialisation follows the data statistics") {
  SineData d = make_sine_data(400, 0.1, 55);
  tgp::TrainConfig cfg;
  cfg.num_inducing = 10;
  cfg.num_inducing_noise = 6;

  const double y_mean = d.y.mean();
  const double var_y = (d.y.array() - y_mean).square().sum() / d.y.size();
  const double x_mean = d.X.col(0).mean();
  const double sd_x = std::sqrt((d.X.col(0).array() - x_mean).square().sum() / d.X.rows());

  SECTION("constant noise") {
    auto st = tgp::init_state(d.X, d.y, tgp::RbfKernel<1>(), cfg);
    REQUIRE(st.kernel.hypers()[0] == Approx(std::log(var_y)).margin(1e-12));
    REQUIRE(st.kernel.hypers()[1] == Approx(std::log(sd_x)).margin(1e-12));
    REQUIRE(st.m.cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(st.log_beta == Approx(-std::log(0.1 * var_y)).margin(1e-12));
    // L is the prior Cholesky shrunk by 0.1.
    MatrixXd Kmm = tgp::gram_self(st.Z, st.kernel, 0.0);
    Kmm.diagonal().array() += st.jitter_rel * Kmm.diagonal().mean();
    const Eigen::LLT<MatrixXd> llt(Kmm);
    const MatrixXd expected = MatrixXd(llt.matrixL()) * 0.1;
    REQUIRE((tgp::materialize_cholesky(st.L_raw) - expected).cwiseAbs().maxCoeff() <= 1e-10);
  }

  SECTION("heteroscedastic latent starts at the same noise target") {
    cfg.noise_kind = tgp::NoiseKind::kHeteroscedastic;
    auto st = tgp::init_state(d.X, d.y, tgp::RbfKernel<1>(), cfg);
    REQUIRE(st.latent.has_value());
    REQUIRE(st.latent->Z.rows() == 6);
    REQUIRE(st.latent->offset == Approx(std::log(0.1 * var_y)).margin(1e-12));
    REQUIRE(st.latent->kernel.hypers()[0] == Approx(0.0).margin(1e-12));  // unit variance
    REQUIRE(st.latent->m.cwiseAbs().maxCoeff() == 0.0);
  }
}

// ---------------------------------------------------------------------------
// Prediction contracts.
// ---------------------------------------------------------------------------

TEST_CASE("prediction interpolates inducing values, reverts to prior, stays positive") {
  Eigen::Matrix<double, 1, 1> ls;
  ls << 0.7;
  tgp::SvgpState<tgp::RbfKernel<1>> st;
  st.kernel = tgp::RbfKernel<1>(1.6, ls);
  st.Z.resize(4, 1);
  st.Z << -1.5, -0.5, 0.5, 1.5;
  st.m.resize(4);
  st.m << 0.8, -0.3, 0.4, 1.1;
  st.L_raw = MatrixXd::Constant(4, 4, 0.0);
  for (int i = 0; i < 4; ++i) st.L_raw(i, i) = tgp::softplus_inv(1e-6);
  st.L_raw = st.L_raw.triangularView<Eigen::Lower>();
  st.noise_kind = tgp::NoiseKind::kConstant;
  st.log_beta = std::log(1e8);  // near-zero observation noise
  st.jitter_rel = 1e-8;

  SECTION("query at inducing locations with collapsed S returns m entries") {
    const auto pred = tgp::predict(st, st.Z, false);
    for (int i = 0; i < 4; ++i)
      REQUIRE(std::abs(pred.mean[i] - st.m[i]) <= 1e-4 * std::max(1.0, std::abs(st.m[i])));
  }

  SECTION("far from data the prior reasserts itself") {
    tgp::PointsMatrix Xq(1, 1);
    Xq << 50.0;
    const auto pred = tgp::predict(st, Xq, true);
    REQUIRE(std::abs(pred.mean[0]) <= 1e-8);
    REQUIRE(pred.var[0] == Approx(1.6 + 1e-8).epsilon(1e-6));
  }

  SECTION("variances strictly positive with noise, non-negative without") {
    tgp::PointsMatrix Xq(9, 1);
    for (int i = 0; i < 9; ++i) Xq(i, 0) = -2.0 + 0.5 * i;
    const auto with_noise = tgp::predict(st, Xq, true);
    const auto without = tgp::predict(st, Xq, false);
    for (int i = 0; i < 9; ++i) {
      REQUIRE(with_noise.var[i] > 0.0);
      REQUIRE(without.var[i] >= 0.0);
    }
  }
}

TEST_CASE("full-rank training on noiseless targets interpolates them") {
  const int n = 20;
  tgp::PointsMatrix X(n, 1);
  VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    X(i, 0) = -3.0 + 6.0 * (i + 0.5) / n;
    y[i] = std::sin(1.1 * X(i, 0));
  }
  Eigen::Matrix<double, 1, 1> ls;
  ls << 0.8;
  // Warm start at the closed-form optimum for fixed hyper-parameters; the
  // variational objective keeps pushing towards exact interpolation from
  // there, so training must preserve (and tighten) the fit.
  auto st0 = collapsed_state(X, y, tgp::RbfKernel<1>(1.2, ls), 1e-4);
  const double elbo_before = tgp::elbo(X, y, st0, static_cast<double>(n));
  tgp::TrainConfig cfg;
  cfg.num_inducing = n;
  cfg.batch_size = 400;
  cfg.steps = 2000;
  cfg.seed = 9;
  cfg.train_inducing = false;
  const auto out = tgp::train(X, y, nullptr, st0, cfg);
  REQUIRE(tgp::elbo(X, y, out.state, static_cast<double>(n)) >= elbo_before);
  const auto pred = tgp::predict(out.state, X, false);
  for (int i = 0; i < n; ++i) REQUIRE(std::abs(pred.mean[i] - y[i]) <= 1e-3);
}

TEST_CASE("joint posterior agrees with marginal prediction on the diagonal") {
  const auto st = make_const_noise_state();
  tgp::PointsMatrix Xq(8, 2);
  for (int i = 0; i < 8; ++i) {
    Xq(i, 0) = tgp::wrap_angle(0.2 + 0.74 * i);
    Xq(i, 1) = -1.0 + 0.25 * i;
  }
  VectorXd mean;
  MatrixXd cov;
  tgp::predict_f_joint(st, Xq, &mean, &cov);
  const auto marg = tgp::predict(st, Xq, false);
  REQUIRE((mean - marg.mean).cwiseAbs().maxCoeff() <= 1e-10);
  for (int i = 0; i < 8; ++i)
    REQUIRE(std::abs(cov(i, i) - marg.var[i]) <= 1e-9 * std::max(1.0, std::abs(cov(i, i))));
  REQUIRE((cov - cov.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
  REQUIRE(tgp_test::min_eigenvalue(cov) >= -1e-8);
}

// ---------------------------------------------------------------------------
// Training behaviour.
// ---------------------------------------------------------------------------

TEST_CASE("one dimensional sine regression meets the error target") {
  SineData d = make_sine_data(500, 0.1, 7);
  tgp::TrainConfig cfg;
  cfg.num_inducing = 10;
  cfg.batch_size = 400;
  cfg.steps = 2000;
  cfg.seed = 7;
  cfg.trace_every = 1;  // full-resolution trace for the smoothing check below
  auto st0 = tgp::init_state(d.X, d.y, tgp::RbfKernel<1>(), cfg);
  const auto out = tgp::train(d.X, d.y, nullptr, st0, cfg);

  tgp::PointsMatrix Xq(200, 1);
  for (int i = 0; i < 200; ++i) Xq(i, 0) = -2.9 + 5.8 * i / 199.0;
  const auto pred = tgp::predict(out.state, Xq, false);
  double sse = 0.0;
  for (int i = 0; i < 200; ++i) {
    const double err = pred.mean[i] - std::sin(Xq(i, 0));
    sse += err * err;
  }
  REQUIRE(std::sqrt(sse / 200.0) <= 0.05);

  // Learned observation variance lands near the generating 0.01.
  REQUIRE(std::exp(-out.state.log_beta) > 0.002);
  REQUIRE(std::exp(-out.state.log_beta) < 0.04);

  // Smoothed minibatch objective (moving average over 100 steps) is
  // non-decreasing over the final quarter of the run.
  const auto &tr = out.elbo_trace;
  REQUIRE(tr.size() >= 400);
  const int window = 100;
  std::vector<double> smooth;
  for (std::size_t k = window - 1; k < tr.size(); ++k) {
    double acc = 0.0;
    for (int j = 0; j < window; ++j) acc += tr[k - j];
    smooth.push_back(acc / window);
  }
  const std::size_t start = (3 * smooth.size()) / 4;
  for (std::size_t k = start + 1; k < smooth.size(); ++k)
    REQUIRE(smooth[k] >= smooth[k - 1] - 0.005 * std::abs(smooth[k - 1]));
}

TEST_CASE("constant targets collapse to a constant prediction") {
  const int n = 120;
  tgp::PointsMatrix X(n, 1);
  VectorXd y = VectorXd::Constant(n, 2.5);
  tgp::CounterRng rng(61, 6);
  for (int i = 0; i < n; ++i) X(i, 0) = rng.uniform(-2.0, 2.0);
  tgp::TrainConfig cfg;
  cfg.num_inducing = 6;
  cfg.batch_size = 400;  // full batch
  cfg.steps = 16000;     // the variance scale has to travel far from its floor
  cfg.seed = 5;
  auto st0 = tgp::init_state(X, y, tgp::RbfKernel<1>(), cfg);
  const auto out = tgp::train(X, y, nullptr, st0, cfg);
  tgp::PointsMatrix Xq(25, 1);
  for (int i = 0; i < 25; ++i) Xq(i, 0) = -1.8 + 3.6 * i / 24.0;
  const auto pred = tgp::predict(out.state, Xq, false);
  for (int i = 0; i < 25; ++i) REQUIRE(std::abs(pred.mean[i] - 2.5) <= 1e-2);
}

TEST_CASE("heteroscedastic training recovers an increasing noise profile") {
  const int n = 800;
  tgp::PointsMatrix X(n, 1);
  VectorXd y(n);
  tgp::CounterRng rng(71, 7);
  for (int i = 0; i < n; ++i) {
    X(i, 0) = rng.uniform(-2.0, 2.0);
    const double noise_std = 0.05 + 0.3 * std::abs(X(i, 0));
    y[i] = std::sin(X(i, 0)) + noise_std * rng.normal();
  }
  tgp::TrainConfig cfg;
  cfg.num_inducing = 12;
  cfg.num_inducing_noise = 8;
  cfg.batch_size = 400;
  cfg.steps = 2000;
  cfg.seed = 11;
  cfg.noise_kind = tgp::NoiseKind::kHeteroscedastic;
  auto st0 = tgp::init_state(X, y, tgp::RbfKernel<1>(), tgp::RbfKernel<1>(), cfg);
  const auto out = tgp::train(X, y, nullptr, st0, cfg);

  tgp::PointsMatrix q0(1, 1), q1(1, 1);
  q0 << 0.0;
  q1 << 1.0;
  const double var_center = tgp::noise_variance(out.state, q0)[0];
  const double var_off = tgp::noise_variance(out.state, q1)[0];
  REQUIRE(var_center < var_off);  // strictly, per the generating profile
  // And the learned levels sit in the right ballpark (true stds 0.05, 0.35).
  REQUIRE(std::sqrt(var_center) < 0.2);
  REQUIRE(std::sqrt(var_off) > 0.15);
}

TEST_CASE("training is deterministic in the seed and sensitive to it") {
  SineData d = make_sine_data(100, 0.1, 91);
  tgp::TrainConfig cfg;
  cfg.num_inducing = 5;
  cfg.batch_size = 32;
  cfg.steps = 60;
  cfg.seed = 13;
  auto st0 = tgp::init_state(d.X, d.y, tgp::RbfKernel<1>(), cfg);
  const auto a = tgp::train(d.X, d.y, nullptr, st0, cfg);
  const auto b = tgp::train(d.X, d.y, nullptr, st0, cfg);
  REQUIRE((tgp::detail::pack_state(a.state) - tgp::detail::pack_state(b.state))
              .cwiseAbs()
              .maxCoeff() == 0.0);

  cfg.seed = 14;
  const auto c = tgp::train(d.X, d.y, nullptr, st0, cfg);
  REQUIRE((tgp::detail::pack_state(a.state) - tgp::detail::pack_state(c.state))
              .cwiseAbs()
              .maxCoeff() > 0.0);
}

TEST_CASE("divergent training raises with the last finite state attached") {
  SineData d = make_sine_data(100, 0.1, 101);
  tgp::TrainConfig cfg;
  cfg.num_inducing = 5;
  cfg.batch_size = 32;
  cfg.steps = 40;
  cfg.learning_rate = 1e5;  // deliberately absurd
  cfg.seed = 17;
  auto st0 = tgp::init_state(d.X, d.y, tgp::RbfKernel<1>(), cfg);
  using Diverged = tgp::TrainingDiverged<tgp::SvgpState<tgp::RbfKernel<1>>>;
  bool thrown = false;
  try {
    tgp::train(d.X, d.y, nullptr, st0, cfg);
  } catch (const Diverged &e) {
    thrown = true;
    REQUIRE(e.step >= 1);
    REQUIRE(tgp::detail::pack_state(e.last_finite_state).allFinite());
  }
  REQUIRE(thrown);
}

TEST_CASE("angular inducing locations stay wrapped during training") {
  const auto inputs = make_tunnel_inputs(60);
  tgp::TrainConfig cfg;
  cfg.num_inducing = 4;
  cfg.batch_size = 32;
  cfg.steps = 30;
  cfg.seed = 19;
  auto st0 = tgp::init_state(inputs.X, inputs.y,
                             tgp::TunnelKernel(tgp::kPi / 2.0, 4.0, 1.0, 1.0, 1.0), cfg);
  const auto out = tgp::train(inputs.X, inputs.y, nullptr, st0, cfg);
  for (int i = 0; i < out.state.Z.rows(); ++i) {
    REQUIRE(out.state.Z(i, 0) >= -tgp::kPi);
    REQUIRE(out.state.Z(i, 0) < tgp::kPi);
  }
}
