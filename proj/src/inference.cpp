#include "otgmm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "otgmm/errors.hpp"

namespace otgmm {

Matrix variance_small_error(const MomentModel& model, const Dataset& data, const Vector& theta_hat,
                            const ErrorConstraint* constraint, const Matrix* z) {
  const EuclideanProblem e = euclidean_problem(model, data, constraint);
  Matrix at = z ? *z : data.values;
  if (z && e.scale.size() > 0) at = at * e.scale.cwiseInverse().asDiagonal();
  const Index n = data.n();
  const Index dg = model.d_g;

  Matrix S = Matrix::Zero(dg, dg);
  for (Index i = 0; i < n; ++i) {
    const Vector gi = eval_g_checked(e.model, at.row(i).transpose(), theta_hat, i);
    S.noalias() += gi * gi.transpose();
  }
  S /= static_cast<double>(n);
  const MomentStack st = eval_moment_stack(e.model, e.data, at, theta_hat, e.P());

  const Matrix MinvG = solve_checked(st.Hbar_outer, st.Gbar, "E[HPH'] in the small-error variance");
  const Matrix bread = st.Gbar.transpose() * MinvG;
  const Matrix meat = MinvG.transpose() * S * MinvG;
  const Matrix binv_meat = solve_checked(bread, meat, "G'M^{-1}G in the small-error variance");
  const Matrix V = solve_checked(bread, Matrix(binv_meat.transpose()),
                                 "G'M^{-1}G in the small-error variance");
  return symmetrize(V) / static_cast<double>(n);
}

StackedMoment stacked_moment(const MomentModel& model, const Matrix& x, const Vector& theta,
                             const Vector& lambda, const Matrix* P, const QMapOptions& opts,
                             const Matrix* z_start) {
  const Index n = x.rows();
  const Index dt = model.d_theta;
  const Index dg = model.d_g;
  const Index dx = model.d_x;
  StackedMoment out;
  out.mean = Vector::Zero(dt + dg);
  out.jacobian = Matrix::Zero(dt + dg, dt + dg);
  out.z.resize(n, dx);
  for (Index i = 0; i < n; ++i) {
    const Vector xi = x.row(i).transpose();
    const Vector z = z_start ? q_map_from(model, xi, Vector(z_start->row(i).transpose()), theta,
                                          lambda, opts, P)
                             : q_map(model, xi, theta, lambda, opts, P);
    out.z.row(i) = z.transpose();
    const Vector g = eval_g_checked(model, z, theta, i);
    const Matrix G = model.G(z, theta);
    const Matrix H = model.H(z, theta);
    const Matrix hzt = model.hess_ztheta(z, theta, lambda);
    const Matrix htt = model.hess_thetatheta(z, theta, lambda);
    const Matrix dqt = dq_dtheta_at(model, z, theta, lambda, P);
    const Matrix dql = dq_dlambda_at(model, z, theta, lambda, P);

    out.mean.head(dt) += G.transpose() * lambda;
    out.mean.tail(dg) += g;
    out.jacobian.topLeftCorner(dt, dt) += htt + hzt.transpose() * dqt;
    out.jacobian.topRightCorner(dt, dg) += G.transpose() + hzt.transpose() * dql;
    out.jacobian.bottomLeftCorner(dg, dt) += G + H * dqt;
    out.jacobian.bottomRightCorner(dg, dg) += H * dql;
  }
  out.mean /= static_cast<double>(n);
  out.jacobian /= static_cast<double>(n);
  return out;
}

LargeErrorVariance variance_large_error(const MomentModel& model, const Dataset& data,
                                        const Vector& theta_hat, const Vector& lambda_hat,
                                        const ErrorConstraint* constraint, const Matrix* z_hat,
                                        const QMapOptions& opts) {
  const EuclideanProblem e = euclidean_problem(model, data, constraint);
  Matrix zu;
  if (z_hat) {
    zu = e.scale.size() > 0 ? Matrix(*z_hat * e.scale.cwiseInverse().asDiagonal()) : *z_hat;
  }
  const StackedMoment sm = stacked_moment(e.model, e.data.values, theta_hat, lambda_hat, e.P(),
                                          opts, z_hat ? &zu : nullptr);
  const Index n = data.n();
  const Index dt = model.d_theta;
  const Index dg = model.d_g;

  LargeErrorVariance out;
  out.z = e.to_original(sm.z);
  LargeErrorComponents& c = out.components;
  c.d_theta = dt;
  c.d_g = dg;
  c.Gtilde = sm.jacobian;
  c.Omega = Matrix::Zero(dt + dg, dt + dg);
  for (Index i = 0; i < n; ++i) {
    const Vector z = sm.z.row(i).transpose();
    Vector gt(dt + dg);
    gt.head(dt) = e.model.G(z, theta_hat).transpose() * lambda_hat;
    gt.tail(dg) = e.model.g(z, theta_hat);
    c.Omega.noalias() += gt * gt.transpose();
  }
  c.Omega /= static_cast<double>(n);
  if (condition_number(c.Omega) <= kMaxCondition) {
    c.W = symmetrize(c.Gtilde.transpose() * c.Omega.fullPivLu().solve(c.Gtilde));
  }

  const Matrix Ginv = inverse_checked(c.Gtilde, "G~ in the large-error variance");
  out.cov_full = symmetrize(Ginv * c.Omega * Ginv.transpose()) / static_cast<double>(n);
  out.cov_theta = out.cov_full.topLeftCorner(dt, dt);
  return out;
}

TestResult error_absence_test(const LargeErrorVariance& variance, const Vector& lambda_hat) {
  const Index dt = variance.components.d_theta;
  const Index dg = variance.components.d_g;
  TestResult t;
  t.df = static_cast<int>(dg - dt);
  if (t.df <= 0 || lambda_hat.squaredNorm() == 0.0) {
    t.stat = 0;
    t.pvalue = 1;
    return t;
  }
  const Matrix V = symmetrize(variance.cov_full.bottomRightCorner(dg, dg));
  Eigen::SelfAdjointEigenSolver<Matrix> es(V);
  const Vector& ev = es.eigenvalues();  // ascending
  const double scale = std::max(ev.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
  double stat = 0;
  for (Index k = dg - t.df; k < dg; ++k) {
    if (!(ev(k) > 1e-14 * scale)) {
      std::string msg = "covariance of lambda is not positive on its range; eigenvalues:";
      for (Index j = 0; j < dg; ++j) msg += " " + std::to_string(ev(j));
      throw SingularError(msg, std::numeric_limits<double>::infinity());
    }
    const double proj = es.eigenvectors().col(k).dot(lambda_hat);
    stat += proj * proj / ev(k);
  }
  t.stat = stat;
  t.pvalue = chi2_upper_tail(stat, t.df);
  return t;
}

std::vector<ColumnErrorSd> error_sd_report(const Matrix& z_hat, const Dataset& data) {
  if (z_hat.rows() != data.n() || z_hat.cols() != data.d_x()) {
    throw Error(ErrorKind::kConfig, "error_sd_report: z_hat does not match the data shape");
  }
  const Index n = data.n();
  auto sd = [n](const Vector& v) {
    if (n < 2) return 0.0;
    const double m = v.mean();
    return std::sqrt((v.array() - m).square().sum() / static_cast<double>(n - 1));
  };
  std::vector<ColumnErrorSd> out;
  for (Index j = 0; j < data.d_x(); ++j) {
    ColumnErrorSd c;
    c.name = j < static_cast<Index>(data.columns.size()) ? data.columns[j] : "x" + std::to_string(j);
    const Vector d = z_hat.col(j) - data.values.col(j);
    c.sd_correction = sd(d);
    c.sd_observed = sd(data.values.col(j));
    c.mean_correction = d.mean();
    out.push_back(c);
  }
  return out;
}

ReferenceVariances reference_variances_mean_model(const Vector& omegas) {
  if (omegas.size() == 0 || !(omegas.array() > 0).all() || !omegas.allFinite()) {
    throw Error(ErrorKind::kConfig, "omegas must be positive and finite");
  }
  const double d = static_cast<double>(omegas.size());
  return {omegas.sum() / (d * d), 1.0 / omegas.cwiseInverse().sum()};
}

double regularized_gamma_q(double s, double x) {
  if (!(s > 0) || !(x >= 0)) throw Error(ErrorKind::kDomain, "regularized_gamma_q: need s > 0, x >= 0");
  if (x == 0) return 1.0;
  if (std::isinf(x)) return 0.0;
  const double log_prefix = s * std::log(x) - x - std::lgamma(s);
  constexpr double kEps = 1e-16;
  if (x < s + 1) {
    // Series for P(s, x).
    double term = 1.0 / s;
    double sum = term;
    for (int k = 1; k < 100000; ++k) {
      term *= x / (s + k);
      sum += term;
      if (std::abs(term) < std::abs(sum) * kEps) break;
    }
    return std::max(0.0, 1.0 - sum * std::exp(log_prefix));
  }
  // Continued fraction for Q(s, x), modified Lentz.
  constexpr double kTiny = 1e-300;
  double b = x + 1 - s;
  double c = 1 / kTiny;
  double d = 1 / b;
  double h = d;
  for (int k = 1; k < 100000; ++k) {
    const double an = -k * (k - s);
    b += 2;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1) < kEps) break;
  }
  return std::exp(log_prefix) * h;
}

double chi2_upper_tail(double stat, int df) {
  if (df <= 0) throw Error(ErrorKind::kDomain, "chi-square needs df >= 1");
  if (!(stat > 0)) return 1.0;
  return regularized_gamma_q(0.5 * df, 0.5 * stat);
}

}  // namespace otgmm
