#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "otgmm/inference.hpp"
#include "otgmm/optimize.hpp"
#include "otgmm/transport.hpp"

namespace otgmm {

enum class Method { kLinearizedOtgmm, kOtgmm, kOtgmmJointFoc, kEfficientGmm };

const char* to_string(Method m);
/// Throws Error(kConfig) on an unknown name.
Method parse_method(const std::string& name);

enum class CovarianceKind {
  kSmallError,        // sandwich at the observed data
  kSmallErrorAtZhat,  // same formula at the transported points
  kLargeError,
};

struct EstimatorOptions {
  SolverOptions solver;
  NelderMeadOptions nelder_mead;
  int random_starts = 3;
  double start_scale = 0.1;  // perturbation scale for the random starts
  std::uint64_t seed = 0x5eed;
  CovarianceKind covariance = CovarianceKind::kSmallError;
  bool error_test = true;  // OTGMM methods only
  bool covariance_enabled = true;
};

struct EstimateDiagnostics {
  int outer_evaluations = 0;
  bool outer_converged = false;
  int start_index = 0;
  int inner_iterations = 0;
  SolverStatus inner_status = SolverStatus::kConverged;
  std::optional<ConvergenceReport> convergence;
  std::vector<std::string> notes;
};

struct EstimateResult {
  Method method = Method::kOtgmm;
  Vector theta_hat;
  std::optional<Vector> lambda_hat;
  double qhat = 0;
  Matrix cov;
  Vector se;
  std::optional<Matrix> z_hat;
  std::optional<TestResult> test;
  EstimateDiagnostics diagnostics;
};

/// Minimises 1/2 gbar(x,theta)' E[H P H'](x,theta)^{-1} gbar(x,theta).
EstimateResult estimate_linearized(const MomentModel& model, const Dataset& data,
                                   const Vector& theta_init,
                                   const ErrorConstraint* constraint = nullptr,
                                   const EstimatorOptions& opts = {});

/// Nested minimisation of the inner transport objective over theta.
EstimateResult estimate_otgmm(const MomentModel& model, const Dataset& data,
                              const Vector& theta_init,
                              const ErrorConstraint* constraint = nullptr,
                              const EstimatorOptions& opts = {});

/// Damped Newton on the just-identified system E[g~(x, theta, lambda)] = 0.
/// Falls back to estimate_otgmm when Newton fails (noted in diagnostics).
EstimateResult solve_joint_foc(const MomentModel& model, const Dataset& data,
                               const Vector& theta_init, const Vector& lambda_init,
                               const ErrorConstraint* constraint = nullptr,
                               const EstimatorOptions& opts = {});

/// Two-step GMM: identity weighting, then (E[g g'])^{-1} at the first step.
EstimateResult estimate_efficient_gmm(const MomentModel& model, const Dataset& data,
                                      const Vector& theta_init,
                                      const EstimatorOptions& opts = {});

EstimateResult estimate(Method method, const MomentModel& model, const Dataset& data,
                        const Vector& theta_init, const ErrorConstraint* constraint = nullptr,
                        const EstimatorOptions& opts = {});

}  // namespace otgmm
