#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "otgmm/linalg.hpp"

namespace otgmm {

/// g(z, theta) -> vector[d_g]
using MomentFn = std::function<Vector(const Vector& z, const Vector& theta)>;
/// H = dg/dz' (d_g x d_x) or G = dg/dtheta' (d_g x d_theta)
using JacobianFn = std::function<Matrix(const Vector& z, const Vector& theta)>;
/// Second derivative blocks of the scalar lambda'g(z, theta).
using HessianFn =
    std::function<Matrix(const Vector& z, const Vector& theta, const Vector& lambda)>;
/// Writes g and H into caller-owned storage of the right size.
using FusedFn = std::function<void(const Vector& z, const Vector& theta, Vector& g, Matrix& H)>;

/// Which evaluators were substituted by central finite differences.
struct FallbackFlags {
  bool H = false;
  bool G = false;
  bool hess_zz = false;
  bool hess_ztheta = false;
  bool hess_thetatheta = false;

  bool any() const { return H || G || hess_zz || hess_ztheta || hess_thetatheta; }
};

/// A per-observation moment condition model E[g(z_i, theta)] = 0.
///
/// Only `g` is mandatory. Missing derivative evaluators are filled with finite
/// differences by complete_with_finite_differences(), and flagged.
struct MomentModel {
  std::string name;
  Index d_g = 0;
  Index d_x = 0;
  Index d_theta = 0;

  MomentFn g;
  JacobianFn H;             // d_g x d_x
  JacobianFn G;             // d_g x d_theta
  HessianFn hess_zz;        // d_x x d_x
  HessianFn hess_ztheta;    // d_x x d_theta
  HessianFn hess_thetatheta;  // d_theta x d_theta

  /// Optional allocation-free g and H together, used by the inner solver.
  FusedFn g_and_H;

  FallbackFlags fallback;

  /// Throws Error(kConfig) on inconsistent dimensions or a missing g.
  void validate() const;
  /// validate() plus every derivative evaluator present.
  void require_complete() const;
  bool just_identified() const { return d_g == d_theta; }
};

/// Central-difference step used for every finite-difference fallback and audit.
inline double fd_step(double coordinate) { return 1e-6 * (1.0 + std::abs(coordinate)); }

/// Returns `model` with every absent derivative replaced by a finite-difference
/// evaluator built from g (and from H / G for the second derivatives).
MomentModel complete_with_finite_differences(MomentModel model);

/// n x d_x matrix of observations with named columns.
struct Dataset {
  Matrix values;
  std::vector<std::string> columns;

  Index n() const { return values.rows(); }
  Index d_x() const { return values.cols(); }
  Vector row(Index i) const { return values.row(i).transpose(); }

  /// Index of a column, or Error(kConfig) naming the missing column.
  Index column_index(const std::string& name) const;
  /// Throws Error(kData) unless n >= 1, all entries finite and names unique.
  void validate() const;
};

Dataset make_dataset(Matrix values, std::vector<std::string> columns = {});

/// Reads a CSV file with a header row. Missing or non-numeric cells are a
/// hard Error(kData) naming the row and column.
Dataset load_csv(const std::string& path);
Dataset parse_csv(const std::string& text);

/// Error-free coordinate combinations C (m x d_x) and optional positive
/// per-coordinate weights for the transport norm.
///
/// With weights w, the transport cost is sum_k (z_k - x_k)^2 / w_k, so larger
/// weights permit larger corrections along that coordinate.
struct ErrorConstraint {
  Matrix C;
  std::optional<Vector> weights;

  /// Constraint forbidding any correction of the listed coordinates.
  static ErrorConstraint error_free(Index d_x, const std::vector<Index>& coordinates);
  void validate(Index d_x) const;
};

/// P = I - C'(CC')^{-1}C. Empty C gives the identity. Throws on rank-deficient C.
Matrix projection_matrix(const ErrorConstraint& constraint, Index d_x);
Matrix projection_matrix(const Matrix& C, Index d_x);

struct MomentStack {
  Vector gbar;        // (1/n) sum g(z_i, theta)
  Matrix Hbar_outer;  // (1/n) sum H_i H_i'
  Matrix Gbar;        // (1/n) sum G_i
};

/// Sample averages of g, HH' and G over the rows of z. If `projection` is
/// given, Hbar_outer is (1/n) sum H_i P H_i'.
MomentStack eval_moment_stack(const MomentModel& model, const Dataset& data, const Matrix& z,
                              const Vector& theta, const Matrix* projection = nullptr);

/// Evaluates g on one row and throws DomainError(row) on non-finite output.
Vector eval_g_checked(const MomentModel& model, const Vector& z, const Vector& theta,
                      Index row = -1);

/// g_l(z, theta) = z_l - theta with scalar theta; d_g = d_x.
MomentModel make_mean_model(Index d_x);

/// Linear instrumental variables model g = w (y - r'theta) over dataset columns.
struct LinearIvModel {
  MomentModel model;
  /// The data the model addresses (with an appended "(intercept)" column when
  /// requested).
  Dataset data;
  /// Coordinates that must not be transported (the intercept column).
  std::vector<Index> error_free;
  std::vector<std::string> coefficient_names;
  Index y_index = 0;
  std::vector<Index> r_index;
  std::vector<Index> w_index;
};

LinearIvModel make_linear_iv(const Dataset& data, const std::string& y_col,
                             const std::vector<std::string>& r_cols,
                             const std::vector<std::string>& w_cols, bool intercept);

/// Ordinary least squares of y on r (used as a default starting value).
Vector ols_start(const LinearIvModel& iv);
/// Just-identified IV method-of-moments solution (w'r)^{-1} w'y.
Vector iv_method_of_moments(const LinearIvModel& iv);

struct DerivativePoint {
  Vector z;
  Vector theta;
  Vector lambda;
};

struct DerivativeReport {
  double err_H = 0;
  double err_G = 0;
  double err_hess_zz = 0;
  double err_hess_ztheta = 0;
  double err_hess_thetatheta = 0;
  double tolerance = 1e-5;
  std::vector<std::string> failures;

  double max_error() const;
  bool pass() const { return failures.empty(); }
};

/// Relative discrepancy ||a - b||_F / max(||b||_F, 1e-3).
double relative_error(const Matrix& analytic, const Matrix& reference);

/// Compares every evaluator of `model` with central finite differences at
/// each point. Non-finite evaluator output is reported as a failure.
DerivativeReport check_derivatives(const MomentModel& model,
                                   const std::vector<DerivativePoint>& points,
                                   double tolerance = 1e-5);

/// Central finite-difference Jacobian of f at x (rows = outputs).
Matrix fd_jacobian(const std::function<Vector(const Vector&)>& f, const Vector& x);

}  // namespace otgmm
