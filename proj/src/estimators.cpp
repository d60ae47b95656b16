#include "otgmm/estimators.hpp"

#include <cmath>
#include <limits>

#include "otgmm/errors.hpp"

namespace otgmm {

const char* to_string(Method m) {
  switch (m) {
    case Method::kLinearizedOtgmm: return "linearized_otgmm";
    case Method::kOtgmm: return "otgmm";
    case Method::kOtgmmJointFoc: return "otgmm_joint_foc";
    case Method::kEfficientGmm: return "efficient_gmm";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::kLinearizedOtgmm, Method::kOtgmm, Method::kOtgmmJointFoc,
                   Method::kEfficientGmm}) {
    if (name == to_string(m)) return m;
  }
  throw Error(ErrorKind::kConfig, "unknown method '" + name + "'");
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_inputs(const MomentModel& model, const Dataset& data, const Vector& theta_init) {
  model.require_complete();
  data.validate();
  if (data.d_x() != model.d_x) throw Error(ErrorKind::kConfig, "dataset width does not match the model");
  if (theta_init.size() != model.d_theta) {
    throw Error(ErrorKind::kConfig, "theta_init has length " + std::to_string(theta_init.size()) +
                                        ", expected " + std::to_string(model.d_theta));
  }
}

std::vector<Vector> start_list(const std::vector<Vector>& anchors, const EstimatorOptions& opts) {
  std::vector<Vector> starts;
  auto add = [&](const Vector& v) {
    if (!v.allFinite()) return;
    for (const Vector& s : starts) {
      if ((s - v).norm() <= 1e-12 * (1.0 + v.norm())) return;
    }
    starts.push_back(v);
  };
  for (const Vector& a : anchors) add(a);
  if (!anchors.empty()) {
    for (const Vector& v : perturbed_starts(anchors.front(), opts.random_starts, opts.start_scale, opts.seed)) add(v);
  }
  return starts;
}

void set_se(EstimateResult& r) {
  r.se = r.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
}

double linearized_objective(const EuclideanProblem& e, const Vector& theta, Vector* lambda) {
  const MomentStack st = eval_moment_stack(e.model, e.data, e.data.values, theta, e.P());
  if (!(condition_number(st.Hbar_outer) <= kMaxCondition)) return kInf;
  const Vector minv_g = st.Hbar_outer.fullPivLu().solve(st.gbar);
  if (lambda) *lambda = -minv_g;
  return 0.5 * st.gbar.dot(minv_g);
}

// Fills lambda, z, qhat, covariance and test from the inner solution at theta_hat.
void finish_otgmm(EstimateResult& r, const MomentModel& model, const Dataset& data,
                  const ErrorConstraint* constraint, const EstimatorOptions& opts) {
  const InnerSolution sol = inner_solve(model, data, r.theta_hat, opts.solver, constraint);
  if (!sol.converged()) {
    throw Error(ErrorKind::kSolver, std::string("inner solver at the estimate: ") +
                                        to_string(sol.status) + " " + sol.message);
  }
  r.lambda_hat = sol.lambda;
  r.z_hat = sol.z;
  r.qhat = sol.qhat;
  r.diagnostics.inner_iterations = sol.iterations;
  r.diagnostics.inner_status = sol.status;
  if (!constraint) r.diagnostics.convergence = convergence_diagnostic(model, data, sol, r.theta_hat);

  std::optional<LargeErrorVariance> large;
  auto large_error = [&]() -> const LargeErrorVariance& {
    if (!large) large = variance_large_error(model, data, r.theta_hat, sol.lambda, constraint, &sol.z);
    return *large;
  };
  if (opts.covariance_enabled) {
    switch (opts.covariance) {
      case CovarianceKind::kSmallError:
        r.cov = variance_small_error(model, data, r.theta_hat, constraint);
        break;
      case CovarianceKind::kSmallErrorAtZhat:
        r.cov = variance_small_error(model, data, r.theta_hat, constraint, &sol.z);
        break;
      case CovarianceKind::kLargeError:
        r.cov = large_error().cov_theta;
        break;
    }
    set_se(r);
  }
  if (opts.error_test) {
    try {
      r.test = error_absence_test(large_error(), sol.lambda);
    } catch (const Error& ex) {
      r.diagnostics.notes.push_back(std::string("error-absence test unavailable: ") + ex.what());
    }
  }
}

struct NewtonOutcome {
  bool converged = false;
  Vector theta;
  Vector lambda;
  int iterations = 0;
  std::string message;
};

NewtonOutcome joint_newton(const EuclideanProblem& e, const Vector& theta0, const Vector& lambda0,
                           int max_iter) {
  const Index dt = e.model.d_theta;
  const Index dg = e.model.d_g;
  NewtonOutcome out;
  Vector p(dt + dg);
  p << theta0, lambda0;
  const Matrix& x = e.data.values;
  Matrix z = x;
  auto eval = [&](const Vector& q, const Matrix* start) {
    return stacked_moment(e.model, x, q.head(dt), q.tail(dg), e.P(), {}, start);
  };
  try {
    StackedMoment sm = eval(p, nullptr);
    const double tol = 1e-11;
    for (int it = 0; it < max_iter; ++it) {
      out.iterations = it;
      double fnorm = sm.mean.lpNorm<Eigen::Infinity>();
      if (fnorm <= tol) {
        out.converged = true;
        break;
      }
      const Vector step = solve_checked(sm.jacobian, sm.mean, "joint first-order Jacobian");
      double t = 1.0;
      bool moved = false;
      for (int ls = 0; ls < 30; ++ls) {
        const Vector trial = p - t * step;
        try {
          StackedMoment st = eval(trial, &sm.z);
          if (st.mean.allFinite() && st.mean.lpNorm<Eigen::Infinity>() < fnorm) {
            p = trial;
            sm = std::move(st);
            moved = true;
            break;
          }
        } catch (const Error&) {
        }
        t *= 0.5;
      }
      if (!moved) {
        out.converged = fnorm <= 1e3 * tol;
        if (!out.converged) out.message = "line search failed";
        break;
      }
    }
    if (!out.converged && out.message.empty()) {
      out.converged = sm.mean.lpNorm<Eigen::Infinity>() <= tol;
      if (!out.converged) out.message = "iteration limit reached";
    }
  } catch (const Error& ex) {
    out.message = ex.what();
  }
  out.theta = p.head(dt);
  out.lambda = p.tail(dg);
  return out;
}

}  // namespace

EstimateResult estimate_linearized(const MomentModel& model, const Dataset& data,
                                   const Vector& theta_init, const ErrorConstraint* constraint,
                                   const EstimatorOptions& opts) {
  check_inputs(model, data, theta_init);
  const EuclideanProblem e = euclidean_problem(model, data, constraint);
  const Objective f = [&](const Vector& th) {
    try {
      return linearized_objective(e, th, nullptr);
    } catch (const Error&) {
      return kInf;
    }
  };
  const OptimResult opt = multistart_nelder_mead(f, start_list({theta_init}, opts), opts.nelder_mead);
  if (!std::isfinite(opt.value)) {
    throw Error(ErrorKind::kSolver, "linearized objective is not finite at any start");
  }
  EstimateResult r;
  r.method = Method::kLinearizedOtgmm;
  r.theta_hat = opt.x;
  Vector lambda;
  r.qhat = linearized_objective(e, opt.x, &lambda);
  r.lambda_hat = lambda;
  r.diagnostics.outer_evaluations = opt.evaluations;
  r.diagnostics.outer_converged = opt.converged;
  r.diagnostics.start_index = opt.start_index;
  if (!opt.converged) r.diagnostics.notes.push_back("Nelder-Mead hit its evaluation limit");
  if (opts.covariance_enabled) {
    r.cov = variance_small_error(model, data, r.theta_hat, constraint);
    set_se(r);
  }
  return r;
}

EstimateResult estimate_otgmm(const MomentModel& model, const Dataset& data,
                              const Vector& theta_init, const ErrorConstraint* constraint,
                              const EstimatorOptions& opts) {
  check_inputs(model, data, theta_init);
  std::vector<Vector> anchors{theta_init};
  try {
    EstimatorOptions lin_opts = opts;
    lin_opts.covariance_enabled = false;
    lin_opts.random_starts = 0;
    anchors.push_back(estimate_linearized(model, data, theta_init, constraint, lin_opts).theta_hat);
  } catch (const Error&) {
  }
  const Objective f = [&](const Vector& th) {
    const InnerSolution s = inner_solve(model, data, th, opts.solver, constraint);
    return s.converged() ? s.qhat : kInf;
  };
  const OptimResult opt = multistart_nelder_mead(f, start_list(anchors, opts), opts.nelder_mead);
  if (!std::isfinite(opt.value)) {
    throw Error(ErrorKind::kSolver, "inner transport problem failed at every probe point");
  }

  EstimateResult r;
  r.method = Method::kOtgmm;
  r.theta_hat = opt.x;
  r.diagnostics.outer_evaluations = opt.evaluations;
  r.diagnostics.outer_converged = opt.converged;
  r.diagnostics.start_index = opt.start_index;
  if (!opt.converged) r.diagnostics.notes.push_back("Nelder-Mead hit its evaluation limit");

  // Polish the simplex optimum with a few Newton steps on the joint first-order
  // system; kept only if it stays local and does not raise the objective.
  const InnerSolution at_opt = inner_solve(model, data, opt.x, opts.solver, constraint);
  if (at_opt.converged()) {
    const EuclideanProblem e = euclidean_problem(model, data, constraint);
    const NewtonOutcome pol = joint_newton(e, opt.x, at_opt.lambda, 20);
    if (pol.converged && (pol.theta - opt.x).norm() <= 1e-4 * (1.0 + opt.x.norm())) {
      const InnerSolution s = inner_solve(model, data, pol.theta, opts.solver, constraint);
      if (s.converged() && s.qhat <= opt.value * (1 + 1e-9) + 1e-15) r.theta_hat = pol.theta;
    }
  }
  finish_otgmm(r, model, data, constraint, opts);
  return r;
}

EstimateResult solve_joint_foc(const MomentModel& model, const Dataset& data,
                               const Vector& theta_init, const Vector& lambda_init,
                               const ErrorConstraint* constraint, const EstimatorOptions& opts) {
  check_inputs(model, data, theta_init);
  if (lambda_init.size() != model.d_g) throw Error(ErrorKind::kConfig, "lambda_init has wrong length");
  const EuclideanProblem e = euclidean_problem(model, data, constraint);
  const NewtonOutcome nt = joint_newton(e, theta_init, lambda_init, 100);
  if (!nt.converged) {
    EstimateResult r = estimate_otgmm(model, data, theta_init, constraint, opts);
    r.method = Method::kOtgmmJointFoc;
    r.diagnostics.notes.push_back("joint Newton failed (" + nt.message +
                                  "); fell back to the nested estimator");
    return r;
  }
  EstimateResult r;
  r.method = Method::kOtgmmJointFoc;
  r.theta_hat = nt.theta;
  r.diagnostics.outer_evaluations = nt.iterations;
  r.diagnostics.outer_converged = true;
  finish_otgmm(r, model, data, constraint, opts);
  if ((*r.lambda_hat - nt.lambda).norm() > 1e-6 * (1.0 + nt.lambda.norm())) {
    r.diagnostics.notes.push_back("inner solver multiplier differs from the joint root");
  }
  return r;
}

EstimateResult estimate_efficient_gmm(const MomentModel& model, const Dataset& data,
                                      const Vector& theta_init, const EstimatorOptions& opts) {
  check_inputs(model, data, theta_init);
  const Index n = data.n();
  const Index dg = model.d_g;
  auto gbar = [&](const Vector& th) {
    Vector s = Vector::Zero(dg);
    for (Index i = 0; i < n; ++i) s += eval_g_checked(model, data.row(i), th, i);
    return Vector(s / static_cast<double>(n));
  };
  auto safe = [](auto fn) {
    return [fn](const Vector& th) {
      try {
        return fn(th);
      } catch (const Error&) {
        return kInf;
      }
    };
  };

  const Objective f1 = safe([&](const Vector& th) { return gbar(th).squaredNorm(); });
  const OptimResult step1 = multistart_nelder_mead(f1, start_list({theta_init}, opts), opts.nelder_mead);
  if (!std::isfinite(step1.value)) throw Error(ErrorKind::kSolver, "first-step GMM objective not finite");

  Matrix S = Matrix::Zero(dg, dg);
  for (Index i = 0; i < n; ++i) {
    const Vector gi = eval_g_checked(model, data.row(i), step1.x, i);
    S.noalias() += gi * gi.transpose();
  }
  S /= static_cast<double>(n);
  const Matrix W = symmetrize(inverse_checked(S, "E[gg'] at the first-step estimate"));

  const Objective f2 = safe([&](const Vector& th) {
    const Vector g = gbar(th);
    return g.dot(W * g);
  });
  EstimatorOptions o2 = opts;
  o2.random_starts = 0;
  const OptimResult step2 = multistart_nelder_mead(f2, start_list({step1.x}, o2), opts.nelder_mead);

  EstimateResult r;
  r.method = Method::kEfficientGmm;
  r.theta_hat = step2.x;
  r.qhat = step2.value;
  r.diagnostics.outer_evaluations = step1.evaluations + step2.evaluations;
  r.diagnostics.outer_converged = step1.converged && step2.converged;
  if (opts.covariance_enabled) {
    const MomentStack st = eval_moment_stack(model, data, data.values, r.theta_hat);
    const Matrix info = st.Gbar.transpose() * W * st.Gbar;
    r.cov = symmetrize(inverse_checked(info, "G'WG in the GMM variance")) / static_cast<double>(n);
    set_se(r);
  }
  return r;
}

EstimateResult estimate(Method method, const MomentModel& model, const Dataset& data,
                        const Vector& theta_init, const ErrorConstraint* constraint,
                        const EstimatorOptions& opts) {
  switch (method) {
    case Method::kLinearizedOtgmm:
      return estimate_linearized(model, data, theta_init, constraint, opts);
    case Method::kOtgmm:
      return estimate_otgmm(model, data, theta_init, constraint, opts);
    case Method::kOtgmmJointFoc: {
      const EstimateResult nested = estimate_otgmm(model, data, theta_init, constraint, opts);
      return solve_joint_foc(model, data, nested.theta_hat, *nested.lambda_hat, constraint, opts);
    }
    case Method::kEfficientGmm:
      return estimate_efficient_gmm(model, data, theta_init, opts);  // constraint not applicable
  }
  throw Error(ErrorKind::kConfig, "unknown method");
}

}  // namespace otgmm
