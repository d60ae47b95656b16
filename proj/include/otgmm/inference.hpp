#pragma once

#include <optional>
#include <string>
#include <vector>

#include "otgmm/moment_model.hpp"
#include "otgmm/transport.hpp"

namespace otgmm {

struct TestResult {
  double stat = 0;
  int df = 0;
  double pvalue = 1;
};

/// Sandwich V/n with bread G'M^{-1}G and meat G'M^{-1} S M^{-1}G, where
/// M = E[H P H'], S = E[g g'] and G = E[dg/dtheta'], all at (z, theta_hat).
/// z defaults to the observed data.
Matrix variance_small_error(const MomentModel& model, const Dataset& data, const Vector& theta_hat,
                            const ErrorConstraint* constraint = nullptr,
                            const Matrix* z = nullptr);

/// Jacobian and outer product of the stacked moment
/// g~ = (dg/dtheta'(q)' lambda ; g(q)), q = q(x, theta, lambda).
struct LargeErrorComponents {
  Index d_theta = 0;
  Index d_g = 0;
  Matrix Gtilde;  // rows: theta FOC then g; columns: theta then lambda
  Matrix Omega;
  std::optional<Matrix> W;  // G~' Omega^{-1} G~, when Omega is invertible

  Matrix block_thetatheta() const { return Gtilde.topLeftCorner(d_theta, d_theta); }
  Matrix block_thetalambda() const { return Gtilde.topRightCorner(d_theta, d_g); }
  Matrix block_lambdatheta() const { return Gtilde.bottomLeftCorner(d_g, d_theta); }
  Matrix block_lambdalambda() const { return Gtilde.bottomRightCorner(d_g, d_g); }
};

struct LargeErrorVariance {
  LargeErrorComponents components;
  Matrix cov_full;   // G~^{-1} Omega G~^{-T} / n over (theta, lambda)
  Matrix cov_theta;  // theta block
  Matrix z;          // transported points used
};

/// Builds g~, Omega and G~ through q_map. When z_hat is given it is taken as
/// the transport map at every row (skipping the root search).
LargeErrorVariance variance_large_error(const MomentModel& model, const Dataset& data,
                                        const Vector& theta_hat, const Vector& lambda_hat,
                                        const ErrorConstraint* constraint = nullptr,
                                        const Matrix* z_hat = nullptr,
                                        const QMapOptions& opts = {});

/// E[g~] and its analytic Jacobian at (theta, lambda). The transported points
/// are written to *z when given.
struct StackedMoment {
  Vector mean;
  Matrix jacobian;
  Matrix z;
};
StackedMoment stacked_moment(const MomentModel& model, const Matrix& x, const Vector& theta,
                             const Vector& lambda, const Matrix* projection,
                             const QMapOptions& opts = {}, const Matrix* z_start = nullptr);

/// Wald statistic lambda' Avar(lambda)^+ lambda with df = d_g - d_theta.
TestResult error_absence_test(const LargeErrorVariance& variance, const Vector& lambda_hat);

struct ColumnErrorSd {
  std::string name;
  double sd_correction = 0;  // sd of z - x
  double sd_observed = 0;    // sd of x
  double mean_correction = 0;
};

/// Sample standard deviations (n - 1 denominator) per column.
std::vector<ColumnErrorSd> error_sd_report(const Matrix& z_hat, const Dataset& data);

struct ReferenceVariances {
  double v_otgmm = 0;
  double v_gmm = 0;
};

/// Asymptotic variances for g_l = z_l - theta with independent columns of
/// variance omega_l.
ReferenceVariances reference_variances_mean_model(const Vector& omegas);

/// Q(s, x) = Gamma(s, x) / Gamma(s).
double regularized_gamma_q(double s, double x);
double chi2_upper_tail(double stat, int df);

}  // namespace otgmm
