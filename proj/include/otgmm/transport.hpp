#pragma once

#include <string>

#include "otgmm/moment_model.hpp"

namespace otgmm {

/// Controls the fixed-point iteration for the inner transport problem.
struct SolverOptions {
  double eps_z = 1e-10;       // on max_j ||z_j^{t+1} - z_j^t||
  double eps_lambda = 1e-10;  // on ||lambda^{t+1} - lambda^t||
  int max_iter = 2000;
  double damping = 1.0;         // initial step factor in (0, 1]
  bool adaptive_damping = true;  // halve on oscillation
  double damping_floor = 0.125;
  /// Relative ridge (times trace / d_g) added to E[HPH'] only when it is
  /// near-singular. Zero surfaces the singularity instead.
  double ridge = 0.0;

  void validate() const;
};

enum class SolverStatus { kConverged, kMaxIterExceeded, kDiverged, kSingularWeighting };

const char* to_string(SolverStatus status);

struct InnerSolution {
  Matrix z;        // transported points, n x d_x
  Vector lambda;   // moment multiplier, d_g
  double qhat = 0;  // 1/2 lambda' E[H P H'] lambda at z
  double transport_cost = 0;  // 1/2 E||z - x||^2 (in the weighted metric, if any)
  int iterations = 0;
  SolverStatus status = SolverStatus::kDiverged;
  double damping = 1.0;  // final damping factor
  std::string message;

  bool converged() const { return status == SolverStatus::kConverged; }
};

/// A constrained or weighted problem restated in plain Euclidean coordinates
/// u = x / sqrt(w): the model is composed with the rescaling and C becomes
/// C diag(sqrt(w)). Parameters and multipliers are unchanged by the map.
struct EuclideanProblem {
  MomentModel model;
  Dataset data;
  bool constrained = false;
  Matrix projection;  // P for the rescaled C when constrained
  Vector scale;       // sqrt(w); empty when unweighted

  const Matrix* P() const { return constrained ? &projection : nullptr; }
  Matrix to_original(const Matrix& z) const;
};

EuclideanProblem euclidean_problem(const MomentModel& model, const Dataset& data,
                                   const ErrorConstraint* constraint);

/// Solves min 1/2 E||z - x||^2 s.t. E[g(z, theta)] = 0 (and C(z_i - x_i) = 0
/// under a constraint) by the multiplier fixed-point iteration
///
///   lambda <- E[H P H']^{-1} (-E[g(z)] + E[H (z - x)])
///   z_j    <- x_j + P H'(z_j) lambda
///
/// started at z = x. Never throws on numerical failure; inspect `status`.
InnerSolution inner_solve(const MomentModel& model, const Dataset& data, const Vector& theta,
                          const SolverOptions& opts = {},
                          const ErrorConstraint* constraint = nullptr);

/// Direct minimisation of the primal problem by quadratic-penalty continuation
/// (mu = 1e2 ... 1e8), each stage solved by a safeguarded Newton descent on
/// all n*d_x coordinates. Restarts from x and four fixed perturbations of x
/// and keeps the cheapest feasible end point. Independent of inner_solve;
/// meant for small n.
InnerSolution oracle_inner_solve(const MomentModel& model, const Dataset& data,
                                 const Vector& theta, Index max_n = 50);

struct QMapOptions {
  double tolerance = 1e-12;  // on ||z - P H'(z) lambda - x||_inf, relative to 1 + ||x||_inf
  int max_iter = 50;
  int restarts = 8;
  double perturbation = 0.1;  // times (1 + ||x||)
};

/// z solving z - P d_z g'(z, theta) lambda = x. Newton from z = x; if that
/// stalls, restarts from perturbed points and returns the root closest to x.
/// Throws Error(kNoRoot) when no root is found.
Vector q_map(const MomentModel& model, const Vector& x, const Vector& theta,
             const Vector& lambda, const QMapOptions& opts = {},
             const Matrix* projection = nullptr);

/// Newton from `start` (typically a previous root); falls back to q_map when
/// that does not converge.
Vector q_map_from(const MomentModel& model, const Vector& x, const Vector& start,
                  const Vector& theta, const Vector& lambda, const QMapOptions& opts = {},
                  const Matrix* projection = nullptr);

/// (I - P d_zz'(lambda'g))^{-1} P d_ztheta'(lambda'g) at z = q(x, theta, lambda).
Matrix dq_dtheta(const MomentModel& model, const Vector& x, const Vector& theta,
                 const Vector& lambda, const Matrix* projection = nullptr,
                 const QMapOptions& opts = {});
/// (I - P d_zz'(lambda'g))^{-1} P H' at z = q(x, theta, lambda).
Matrix dq_dlambda(const MomentModel& model, const Vector& x, const Vector& theta,
                  const Vector& lambda, const Matrix* projection = nullptr,
                  const QMapOptions& opts = {});

/// Same derivatives when the transported point z is already known.
Matrix dq_dtheta_at(const MomentModel& model, const Vector& z, const Vector& theta,
                    const Vector& lambda, const Matrix* projection = nullptr);
Matrix dq_dlambda_at(const MomentModel& model, const Vector& z, const Vector& theta,
                     const Vector& lambda, const Matrix* projection = nullptr);

struct ConvergenceReport {
  double lambda_norm = 0;
  double min_eig_weighting = 0;  // smallest eigenvalue of E[H H'] at z
  double spectral_proxy = 0;     // max_j ||d_zz'(lambda'g)(z_j)||_2
  double ridge_threshold = 0;
  bool weighting_near_singular = false;
  bool contraction_suspect = false;  // spectral_proxy >= 1
};

/// Advisory diagnostics for a converged inner solution.
ConvergenceReport convergence_diagnostic(const MomentModel& model, const Dataset& data,
                                         const InnerSolution& solution, const Vector& theta,
                                         double ridge_threshold = 1e-10);

}  // namespace otgmm
