#ifndef TGP_KERNELS_HPP
#define TGP_KERNELS_HPP

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "tgp/common.hpp"

namespace tgp {

// Points are stored one-per-row; row-major keeps a single point contiguous so
// kernel loops can walk raw pointers.
using PointsMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Scalar primitives.
// ---------------------------------------------------------------------------

// Shortest arc length between two angles; both are wrapped first, so any
// finite input is accepted.  Result lies in [0, pi].
inline double geodesic_distance(double theta_a, double theta_b) {
  const double delta = std::fabs(wrap_angle(theta_a) - wrap_angle(theta_b));
  return std::min(delta, kTwoPi - delta);
}

// Derivative of geodesic_distance w.r.t. its first argument:
//   -sign(d) * sign(|d|-pi)  with d the wrapped difference.
// The distance has kinks at coincident (d = 0) and antipodal (|d| = pi)
// angles; there we return the subgradient choice 0.  Downstream kernels are
// insensitive to the choice because the Wendland slope vanishes at both
// kink distances.
inline double geodesic_distance_derivative(double theta_a, double theta_b) {
  const double d = wrap_angle(theta_a) - wrap_angle(theta_b);
  if (d == 0.0) return 0.0;
  const double a = std::fabs(d);
  if (a == kPi) return 0.0;
  const double sd = d > 0.0 ? 1.0 : -1.0;
  const double sa = a > kPi ? 1.0 : -1.0;
  return -sd * sa;
}

// Compactly supported Wendland-C2 profile
//   W_c(t) = (1 + tau*t/c) * (1 - t/c)^tau   for t in [0, c), else 0.
// Validity on the circle with the geodesic distance requires 0 < c <= pi and
// tau >= 4; both are enforced here rather than at each call site.
inline void check_wendland_args(double c, double tau) {
  if (!(c > 0.0 && c <= kPi)) throw std::invalid_argument("wendland: support c must lie in (0, pi]");
  if (!(tau >= 4.0)) throw std::invalid_argument("wendland: exponent tau must be >= 4");
}

inline double wendland_c2(double t, double c, double tau) {
  check_wendland_args(c, tau);
  if (!(t >= 0.0 && t <= kPi)) throw std::invalid_argument("wendland: distance must lie in [0, pi]");
  if (t >= c) return 0.0;
  const double r = t / c;
  return (1.0 + tau * r) * std::pow(1.0 - r, tau);
}

// d/dt of the profile above: -tau*(tau+1) * t/c^2 * (1 - t/c)^(tau-1).
inline double wendland_c2_deriv(double t, double c, double tau) {
  if (t >= c || t < 0.0) return 0.0;
  const double r = t / c;
  return -tau * (tau + 1.0) * (t / (c * c)) * std::pow(1.0 - r, tau - 1.0);
}

// ---------------------------------------------------------------------------
// Parameter bundles.
// ---------------------------------------------------------------------------

struct KernelParams {
  double variance = 1.0;
  Eigen::VectorXd lengthscales;  // one per non-angular dimension
  double wendland_c = kPi;
  double wendland_tau = 4.0;

  void validate(int expected_lengthscales) const {
    if (!(variance > 0.0)) throw std::invalid_argument("kernel params: variance must be positive");
    if (lengthscales.size() != expected_lengthscales)
      throw std::invalid_argument("kernel params: wrong number of lengthscales");
    for (int i = 0; i < lengthscales.size(); ++i)
      if (!(lengthscales[i] > 0.0))
        throw std::invalid_argument("kernel params: lengthscales must be positive");
    check_wendland_args(wendland_c, wendland_tau);
  }
};

// Tensor-product bundles: one factor per input block.
struct TunnelKernelParams {
  KernelParams angular;       // variance + Wendland support/exponent
  KernelParams longitudinal;  // variance + one lengthscale
};

struct ParamKernelParams {
  KernelParams radial;        // variance + one lengthscale
  KernelParams angular;
  KernelParams longitudinal;  // variance + one lengthscale
};

// ---------------------------------------------------------------------------
// Stateless kernel evaluations on parameter bundles.
// ---------------------------------------------------------------------------

// Isotropic-per-dimension squared-exponential.
inline double rbf(const Eigen::VectorXd &u, const Eigen::VectorXd &v, const KernelParams &p) {
  p.validate(static_cast<int>(u.size()));
  if (u.size() != v.size()) throw std::invalid_argument("rbf: dimension mismatch");
  double q = 0.0;
  for (int d = 0; d < u.size(); ++d) {
    const double z = (u[d] - v[d]) / p.lengthscales[d];
    q += z * z;
  }
  return p.variance * std::exp(-0.5 * q);
}

namespace detail {

inline double rbf1(double du, double variance, double ls) {
  const double z = du / ls;
  return variance * std::exp(-0.5 * z * z);
}

inline double angular_factor(double theta_u, double theta_v, const KernelParams &a) {
  return a.variance * wendland_c2(geodesic_distance(theta_u, theta_v), a.wendland_c, a.wendland_tau);
}

}  // namespace detail

// Model-1 covariance over cylindrical coordinates u = (theta, l):
// Wendland-on-geodesic angular factor times squared-exponential in l.
inline double tunnel_kernel(const Eigen::Vector2d &u, const Eigen::Vector2d &v,
                            const TunnelKernelParams &p) {
  p.angular.validate(0);
  p.longitudinal.validate(1);
  return detail::angular_factor(u[0], v[0], p.angular) *
         detail::rbf1(u[1] - v[1], p.longitudinal.variance, p.longitudinal.lengthscales[0]);
}

// Model-2 covariance over u = (rho, theta, l): radial and longitudinal
// squared-exponential factors around the same angular factor.
inline double param_kernel(const Eigen::Vector3d &u, const Eigen::Vector3d &v,
                           const ParamKernelParams &p) {
  p.radial.validate(1);
  p.angular.validate(0);
  p.longitudinal.validate(1);
  return detail::rbf1(u[0] - v[0], p.radial.variance, p.radial.lengthscales[0]) *
         detail::angular_factor(u[1], v[1], p.angular) *
         detail::rbf1(u[2] - v[2], p.longitudinal.variance, p.longitudinal.lengthscales[0]);
}

// ---------------------------------------------------------------------------
// Gram builders.  The two-argument form never adds jitter; the self form
// adds `jitter` to the diagonal.
// ---------------------------------------------------------------------------

template <class KernelFn>
Eigen::MatrixXd gram(const PointsMatrix &a, const PointsMatrix &b, const KernelFn &k) {
  if (a.cols() != b.cols()) throw std::invalid_argument("gram: dimension mismatch");
  Eigen::MatrixXd out(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j)
      out(i, j) = k(a.data() + i * a.cols(), b.data() + j * b.cols());
  return out;
}

template <class KernelFn>
Eigen::MatrixXd gram_self(const PointsMatrix &a, const KernelFn &k, double jitter) {
  Eigen::MatrixXd out(a.rows(), a.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double *pi = a.data() + i * a.cols();
    out(i, i) = k(pi, pi) + jitter;
    for (Eigen::Index j = 0; j < i; ++j) {
      const double v = k(pi, a.data() + j * a.cols());
      out(i, j) = v;
      out(j, i) = v;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trainable kernels.  Hyper-parameters live in log space so unconstrained
// optimisation keeps them positive; eval_grad reports d k / d log-param and
// d k / d u (first argument).  All kernels here are stationary per dimension,
// which the sparse-GP gradient accumulation relies on
// (dk/du evaluated at (v,u) equals the negation of dk/du at (u,v)).
// ---------------------------------------------------------------------------

template <int Dim>
class RbfKernel {
 public:
  static constexpr int kDim = Dim;
  static constexpr int kThetaIndex = -1;  // no angular dimension

  RbfKernel() {
    log_variance_ = 0.0;
    log_ls_.setZero();
  }
  RbfKernel(double variance, const Eigen::Matrix<double, Dim, 1> &ls) {
    log_variance_ = std::log(variance);
    for (int d = 0; d < Dim; ++d) log_ls_[d] = std::log(ls[d]);
  }

  int num_hypers() const { return 1 + Dim; }

  Eigen::VectorXd hypers() const {
    Eigen::VectorXd h(num_hypers());
    h[0] = log_variance_;
    for (int d = 0; d < Dim; ++d) h[1 + d] = log_ls_[d];
    return h;
  }
  void set_hypers(const Eigen::VectorXd &h) {
    log_variance_ = h[0];
    for (int d = 0; d < Dim; ++d) log_ls_[d] = h[1 + d];
  }
  std::vector<std::string> hyper_names() const {
    std::vector<std::string> n{"log_variance"};
    for (int d = 0; d < Dim; ++d) n.push_back("log_lengthscale_" + std::to_string(d));
    return n;
  }

  // Data-driven start: signal variance = target, lengthscale = spread per dim.
  void init_hypers(const Eigen::VectorXd &col_spread, double target_variance) {
    log_variance_ = std::log(target_variance);
    for (int d = 0; d < Dim; ++d) log_ls_[d] = std::log(col_spread[d]);
  }

  double operator()(const double *u, const double *v) const {
    double q = 0.0;
    for (int d = 0; d < Dim; ++d) {
      const double z = (u[d] - v[d]) * std::exp(-log_ls_[d]);
      q += z * z;
    }
    return std::exp(log_variance_ - 0.5 * q);
  }

  double eval_grad(const double *u, const double *v, double *dhyp, double *du) const {
    double q = 0.0;
    double z[Dim];
    for (int d = 0; d < Dim; ++d) {
      z[d] = (u[d] - v[d]) * std::exp(-log_ls_[d]);
      q += z[d] * z[d];
    }
    const double k = std::exp(log_variance_ - 0.5 * q);
    dhyp[0] = k;
    for (int d = 0; d < Dim; ++d) {
      dhyp[1 + d] = k * z[d] * z[d];
      du[d] = -k * z[d] * std::exp(-log_ls_[d]);
    }
    return k;
  }

  double variance() const { return std::exp(log_variance_); }
  double lengthscale(int d) const { return std::exp(log_ls_[d]); }

 private:
  double log_variance_;
  Eigen::Matrix<double, Dim, 1> log_ls_;
};

// Model-1 trainable kernel over (theta, l).  The angular support c and
// exponent tau are structural constants, not trained.
class TunnelKernel {
 public:
  static constexpr int kDim = 2;
  static constexpr int kThetaIndex = 0;

  TunnelKernel() : c_(kPi / 2.0), tau_(4.0) {}
  TunnelKernel(double c, double tau, double var_a, double var_l, double ls_l) : c_(c), tau_(tau) {
    check_wendland_args(c, tau);
    log_var_a_ = std::log(var_a);
    log_var_l_ = std::log(var_l);
    log_ls_l_ = std::log(ls_l);
  }

  static TunnelKernel from_params(const TunnelKernelParams &p) {
    p.angular.validate(0);
    p.longitudinal.validate(1);
    return TunnelKernel(p.angular.wendland_c, p.angular.wendland_tau, p.angular.variance,
                        p.longitudinal.variance, p.longitudinal.lengthscales[0]);
  }
  TunnelKernelParams to_params() const {
    TunnelKernelParams p;
    p.angular.variance = std::exp(log_var_a_);
    p.angular.wendland_c = c_;
    p.angular.wendland_tau = tau_;
    p.longitudinal.variance = std::exp(log_var_l_);
    p.longitudinal.lengthscales = Eigen::VectorXd::Constant(1, std::exp(log_ls_l_));
    return p;
  }

  int num_hypers() const { return 3; }
  Eigen::VectorXd hypers() const {
    Eigen::VectorXd h(3);
    h << log_var_a_, log_var_l_, log_ls_l_;
    return h;
  }
  void set_hypers(const Eigen::VectorXd &h) {
    log_var_a_ = h[0];
    log_var_l_ = h[1];
    log_ls_l_ = h[2];
  }
  std::vector<std::string> hyper_names() const {
    return {"log_variance_angular", "log_variance_longitudinal", "log_lengthscale_longitudinal"};
  }

  // Data-driven start: the product of the two variance factors equals the
  // target, the longitudinal lengthscale follows the data spread in l.
  void init_hypers(const Eigen::VectorXd &col_spread, double target_variance) {
    log_var_a_ = 0.5 * std::log(target_variance);
    log_var_l_ = 0.5 * std::log(target_variance);
    log_ls_l_ = std::log(col_spread[1]);
  }

  double operator()(const double *u, const double *v) const {
    const double t = geodesic_distance(u[0], v[0]);
    if (t >= c_) return 0.0;
    const double r = t / c_;
    const double w = (1.0 + tau_ * r) * std::pow(1.0 - r, tau_);
    const double zl = (u[1] - v[1]) * std::exp(-log_ls_l_);
    return std::exp(log_var_a_ + log_var_l_ - 0.5 * zl * zl) * w;
  }

  double eval_grad(const double *u, const double *v, double *dhyp, double *du) const {
    const double t = geodesic_distance(u[0], v[0]);
    const double zl = (u[1] - v[1]) * std::exp(-log_ls_l_);
    const double amp = std::exp(log_var_a_ + log_var_l_ - 0.5 * zl * zl);
    double w = 0.0, wd = 0.0;
    if (t < c_) {
      const double r = t / c_;
      const double pw = std::pow(1.0 - r, tau_ - 1.0);
      w = (1.0 + tau_ * r) * pw * (1.0 - r);
      wd = -tau_ * (tau_ + 1.0) * (t / (c_ * c_)) * pw;
    }
    const double k = amp * w;
    dhyp[0] = k;
    dhyp[1] = k;
    dhyp[2] = k * zl * zl;
    du[0] = amp * wd * geodesic_distance_derivative(u[0], v[0]);
    du[1] = -k * zl * std::exp(-log_ls_l_);
    return k;
  }

  double support() const { return c_; }
  double tau() const { return tau_; }

 private:
  double c_, tau_;
  double log_var_a_ = 0.0, log_var_l_ = 0.0, log_ls_l_ = 0.0;
};

// Model-2 trainable kernel over (rho, theta, l).
class ParamKernel {
 public:
  static constexpr int kDim = 3;
  static constexpr int kThetaIndex = 1;

  ParamKernel() : c_(kPi), tau_(4.0) {}
  ParamKernel(double c, double tau, double var_r, double ls_r, double var_a, double var_l,
              double ls_l)
      : c_(c), tau_(tau) {
    check_wendland_args(c, tau);
    log_var_r_ = std::log(var_r);
    log_ls_r_ = std::log(ls_r);
    log_var_a_ = std::log(var_a);
    log_var_l_ = std::log(var_l);
    log_ls_l_ = std::log(ls_l);
  }

  static ParamKernel from_params(const ParamKernelParams &p) {
    p.radial.validate(1);
    p.angular.validate(0);
    p.longitudinal.validate(1);
    return ParamKernel(p.angular.wendland_c, p.angular.wendland_tau, p.radial.variance,
                       p.radial.lengthscales[0], p.angular.variance, p.longitudinal.variance,
                       p.longitudinal.lengthscales[0]);
  }
  ParamKernelParams to_params() const {
    ParamKernelParams p;
    p.radial.variance = std::exp(log_var_r_);
    p.radial.lengthscales = Eigen::VectorXd::Constant(1, std::exp(log_ls_r_));
    p.angular.variance = std::exp(log_var_a_);
    p.angular.wendland_c = c_;
    p.angular.wendland_tau = tau_;
    p.longitudinal.variance = std::exp(log_var_l_);
    p.longitudinal.lengthscales = Eigen::VectorXd::Constant(1, std::exp(log_ls_l_));
    return p;
  }

  double support() const { return c_; }
  double tau() const { return tau_; }

  int num_hypers() const { return 5; }
  Eigen::VectorXd hypers() const {
    Eigen::VectorXd h(5);
    h << log_var_r_, log_ls_r_, log_var_a_, log_var_l_, log_ls_l_;
    return h;
  }
  void set_hypers(const Eigen::VectorXd &h) {
    log_var_r_ = h[0];
    log_ls_r_ = h[1];
    log_var_a_ = h[2];
    log_var_l_ = h[3];
    log_ls_l_ = h[4];
  }
  std::vector<std::string> hyper_names() const {
    return {"log_variance_radial", "log_lengthscale_radial", "log_variance_angular",
            "log_variance_longitudinal", "log_lengthscale_longitudinal"};
  }

  // Data-driven start: the product of the three variance factors equals the
  // target; lengthscales follow the data spread in rho (dim 0) and l (dim 2).
  void init_hypers(const Eigen::VectorXd &col_spread, double target_variance) {
    const double third = std::log(target_variance) / 3.0;
    log_var_r_ = third;
    log_var_a_ = third;
    log_var_l_ = third;
    log_ls_r_ = std::log(col_spread[0]);
    log_ls_l_ = std::log(col_spread[2]);
  }

  double operator()(const double *u, const double *v) const {
    const double t = geodesic_distance(u[1], v[1]);
    if (t >= c_) return 0.0;
    const double r = t / c_;
    const double w = (1.0 + tau_ * r) * std::pow(1.0 - r, tau_);
    const double zr = (u[0] - v[0]) * std::exp(-log_ls_r_);
    const double zl = (u[2] - v[2]) * std::exp(-log_ls_l_);
    return std::exp(log_var_r_ + log_var_a_ + log_var_l_ - 0.5 * (zr * zr + zl * zl)) * w;
  }

  double eval_grad(const double *u, const double *v, double *dhyp, double *du) const {
    const double t = geodesic_distance(u[1], v[1]);
    const double zr = (u[0] - v[0]) * std::exp(-log_ls_r_);
    const double zl = (u[2] - v[2]) * std::exp(-log_ls_l_);
    const double amp = std::exp(log_var_r_ + log_var_a_ + log_var_l_ - 0.5 * (zr * zr + zl * zl));
    double w = 0.0, wd = 0.0;
    if (t < c_) {
      const double r = t / c_;
      const double pw = std::pow(1.0 - r, tau_ - 1.0);
      w = (1.0 + tau_ * r) * pw * (1.0 - r);
      wd = -tau_ * (tau_ + 1.0) * (t / (c_ * c_)) * pw;
    }
    const double k = amp * w;
    dhyp[0] = k;
    dhyp[1] = k * zr * zr;
    dhyp[2] = k;
    dhyp[3] = k;
    dhyp[4] = k * zl * zl;
    du[0] = -k * zr * std::exp(-log_ls_r_);
    du[1] = amp * wd * geodesic_distance_derivative(u[1], v[1]);
    du[2] = -k * zl * std::exp(-log_ls_l_);
    return k;
  }

 private:
  double c_, tau_;
  double log_var_r_ = 0.0, log_ls_r_ = 0.0;
  double log_var_a_ = 0.0, log_var_l_ = 0.0, log_ls_l_ = 0.0;
};

// ---------------------------------------------------------------------------
// Antipodal adaptor: k_A(u, v) = k(u, v) + Sign * k(u, v + pi e_theta).
// Sign = -1 builds the antisymmetric process used for diametral radii
// (f(theta + pi) = -f(theta) exactly); Sign = +1 builds the symmetric
// process used for fields that must match at antipodes (noise levels).
// Both are valid covariances: they are the covariances of the (anti-)
// symmetrised base process (g(u) -+ g(u~)) / sqrt(2).
// ---------------------------------------------------------------------------

template <class Base, int Sign>
class AntipodalKernel {
  static_assert(Sign == 1 || Sign == -1, "Sign must be +1 or -1");

 public:
  static constexpr int kDim = Base::kDim;
  static constexpr int kThetaIndex = Base::kThetaIndex;

  AntipodalKernel() = default;
  explicit AntipodalKernel(const Base &base) : base_(base) {}

  const Base &base() const { return base_; }
  Base &base() { return base_; }
  static constexpr int sign() { return Sign; }

  int num_hypers() const { return base_.num_hypers(); }
  Eigen::VectorXd hypers() const { return base_.hypers(); }
  void set_hypers(const Eigen::VectorXd &h) { base_.set_hypers(h); }
  std::vector<std::string> hyper_names() const { return base_.hyper_names(); }
  void init_hypers(const Eigen::VectorXd &col_spread, double target_variance) {
    base_.init_hypers(col_spread, target_variance);
  }

  double operator()(const double *u, const double *v) const {
    double flipped[kDim];
    flip(v, flipped);
    return base_(u, v) + Sign * base_(u, flipped);
  }

  double eval_grad(const double *u, const double *v, double *dhyp, double *du) const {
    double flipped[kDim];
    flip(v, flipped);
    const int nh = base_.num_hypers();
    double dhyp2[16];
    double du2[kDim];
    const double k1 = base_.eval_grad(u, v, dhyp, du);
    const double k2 = base_.eval_grad(u, flipped, dhyp2, du2);
    for (int i = 0; i < nh; ++i) dhyp[i] += Sign * dhyp2[i];
    for (int d = 0; d < kDim; ++d) du[d] += Sign * du2[d];
    return k1 + Sign * k2;
  }

 private:
  static void flip(const double *v, double *out) {
    for (int d = 0; d < kDim; ++d) out[d] = v[d];
    out[kThetaIndex] = wrap_angle(v[kThetaIndex] + kPi);
  }
  Base base_;
};

using DiametralKernel = AntipodalKernel<TunnelKernel, -1>;
using MirroredTunnelKernel = AntipodalKernel<TunnelKernel, 1>;

}  // namespace tgp

#endif  // TGP_KERNELS_HPP
