#include "otgmm/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "otgmm/errors.hpp"

namespace otgmm {

void SolverOptions::validate() const {
  if (!(eps_z > 0 && eps_lambda > 0)) throw Error(ErrorKind::kConfig, "solver tolerances must be positive");
  if (max_iter < 1) throw Error(ErrorKind::kConfig, "max_iter must be at least 1");
  if (!(damping > 0 && damping <= 1)) throw Error(ErrorKind::kConfig, "damping must lie in (0, 1]");
  if (!(damping_floor > 0 && damping_floor <= 1)) {
    throw Error(ErrorKind::kConfig, "damping floor must lie in (0, 1]");
  }
  if (!(ridge >= 0)) throw Error(ErrorKind::kConfig, "ridge must be non-negative");
}

const char* to_string(SolverStatus status) {
  switch (status) {
    case SolverStatus::kConverged: return "converged";
    case SolverStatus::kMaxIterExceeded: return "max_iter_exceeded";
    case SolverStatus::kDiverged: return "diverged";
    case SolverStatus::kSingularWeighting: return "singular_weighting";
  }
  return "unknown";
}

namespace {

// Rewrites a weighted-norm problem as a plain Euclidean one: u = D^{-1} x with
// D = diag(sqrt(w)), g_u(u) = g(D u).
MomentModel scale_model(const MomentModel& m, const Vector& sqrt_w) {
  MomentModel s = m;
  s.name = m.name + "[weighted]";
  s.g_and_H = nullptr;
  const Vector d = sqrt_w;
  s.g = [g = m.g, d](const Vector& u, const Vector& th) { return g(Vector(d.cwiseProduct(u)), th); };
  s.H = [H = m.H, d](const Vector& u, const Vector& th) {
    return Matrix(H(Vector(d.cwiseProduct(u)), th) * d.asDiagonal());
  };
  s.G = [G = m.G, d](const Vector& u, const Vector& th) { return G(Vector(d.cwiseProduct(u)), th); };
  s.hess_zz = [h = m.hess_zz, d](const Vector& u, const Vector& th, const Vector& l) {
    return Matrix(d.asDiagonal() * h(Vector(d.cwiseProduct(u)), th, l) * d.asDiagonal());
  };
  s.hess_ztheta = [h = m.hess_ztheta, d](const Vector& u, const Vector& th, const Vector& l) {
    return Matrix(d.asDiagonal() * h(Vector(d.cwiseProduct(u)), th, l));
  };
  s.hess_thetatheta = [h = m.hess_thetatheta, d](const Vector& u, const Vector& th,
                                                  const Vector& l) {
    return h(Vector(d.cwiseProduct(u)), th, l);
  };
  return s;
}

InnerSolution solve_fixed_point(const MomentModel& model, const Matrix& x, const Vector& theta,
                                const SolverOptions& opts, const Matrix* P) {
  const Index n = x.rows();
  const Index dx = x.cols();
  const Index dg = model.d_g;
  const double inv_n = 1.0 / static_cast<double>(n);

  InnerSolution sol;
  sol.z = x;
  sol.lambda = Vector::Zero(dg);
  double damping = opts.damping;
  double prev_residual = std::numeric_limits<double>::infinity();

  std::vector<Matrix> H(n);
  Matrix update(n, dx);
  Vector gbar(dg);
  Vector hz(dg);
  Matrix M(dg, dg);

  auto fail = [&](SolverStatus status, std::string msg, int it) {
    sol.status = status;
    sol.message = std::move(msg);
    sol.iterations = it;
    sol.damping = damping;
    sol.qhat = std::numeric_limits<double>::infinity();
    sol.transport_cost = std::numeric_limits<double>::infinity();
    return sol;
  };

  Vector zi(dx);
  Vector dz(dx);
  Vector gi(dg);
  Vector step(dx);
  Vector projected(dx);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(dg);
  for (int it = 1; it <= opts.max_iter; ++it) {
    gbar.setZero();
    hz.setZero();
    M.setZero();
    for (Index i = 0; i < n; ++i) {
      zi = sol.z.row(i).transpose();
      if (model.g_and_H) {
        H[i].resize(dg, dx);
        model.g_and_H(zi, theta, gi, H[i]);
      } else {
        gi = model.g(zi, theta);
        H[i] = model.H(zi, theta);
      }
      if (!gi.allFinite() || !H[i].allFinite()) {
        return fail(SolverStatus::kDiverged, "non-finite moment at row " + std::to_string(i), it);
      }
      gbar += gi;
      dz = zi - x.row(i).transpose();
      hz.noalias() += H[i] * dz;
      if (P) {
        M.noalias() += H[i] * (*P) * H[i].transpose();
      } else {
        M.noalias() += H[i] * H[i].transpose();
      }
    }
    gbar *= inv_n;
    hz *= inv_n;
    M *= inv_n;

    // M is symmetric PSD: condition from its eigenvalues.
    auto condition = [&]() {
      eig.compute(M, Eigen::EigenvaluesOnly);
      const double lo = eig.eigenvalues()(0);
      const double hi = eig.eigenvalues()(dg - 1);
      return lo > 0 ? hi / lo : std::numeric_limits<double>::infinity();
    };
    double cond = condition();
    if (!(cond <= kMaxCondition) && opts.ridge > 0) {
      M.diagonal().array() += opts.ridge * M.trace() / static_cast<double>(dg);
      cond = condition();
    }
    if (!(cond <= kMaxCondition)) {
      return fail(SolverStatus::kSingularWeighting,
                  "E[HH'] is singular (condition " + std::to_string(cond) + ")", it);
    }
    const Vector lambda = M.ldlt().solve(hz - gbar);

    double dz_max = 0;
    for (Index i = 0; i < n; ++i) {
      step.noalias() = H[i].transpose() * lambda;
      if (P) {
        projected.noalias() = (*P) * step;
        step = projected;
      }
      update.row(i) = x.row(i) + step.transpose();
      dz_max = std::max(dz_max, (update.row(i) - sol.z.row(i)).norm());
    }
    if (!update.allFinite() || !lambda.allFinite() || dz_max > 1e100) {
      return fail(SolverStatus::kDiverged, "iterates became non-finite", it);
    }
    if (opts.adaptive_damping && it > 2 && dz_max > prev_residual && damping > opts.damping_floor) {
      damping = std::max(opts.damping_floor, 0.5 * damping);
    }
    prev_residual = dz_max;

    const double dlambda = (lambda - sol.lambda).norm();
    if (damping < 1.0) {
      sol.z = (1.0 - damping) * sol.z + damping * update;
    } else {
      sol.z = update;
    }
    sol.lambda = lambda;
    if (damping * dz_max <= opts.eps_z && dlambda <= opts.eps_lambda) {
      sol.status = SolverStatus::kConverged;
      sol.iterations = it;
      break;
    }
    if (it == opts.max_iter) {
      sol.status = SolverStatus::kMaxIterExceeded;
      sol.iterations = it;
      sol.message = "no convergence after " + std::to_string(it) + " iterations";
    }
  }

  // Objective at the final iterate.
  M.setZero();
  for (Index i = 0; i < n; ++i) {
    const Matrix Hi = model.H(sol.z.row(i).transpose(), theta);
    if (P) {
      M.noalias() += Hi * (*P) * Hi.transpose();
    } else {
      M.noalias() += Hi * Hi.transpose();
    }
  }
  M *= inv_n;
  sol.qhat = 0.5 * sol.lambda.dot(M * sol.lambda);
  sol.transport_cost = 0.5 * (sol.z - x).squaredNorm() * inv_n;
  sol.damping = damping;
  if (!std::isfinite(sol.qhat)) return fail(SolverStatus::kDiverged, "non-finite objective", sol.iterations);
  return sol;
}

}  // namespace

Matrix EuclideanProblem::to_original(const Matrix& z) const {
  if (scale.size() == 0) return z;
  return z * scale.asDiagonal();
}

EuclideanProblem euclidean_problem(const MomentModel& model, const Dataset& data,
                                   const ErrorConstraint* constraint) {
  EuclideanProblem e{model, data, false, Matrix(), Vector()};
  if (!constraint) return e;
  constraint->validate(model.d_x);
  Matrix C = constraint->C;
  if (constraint->weights) {
    e.scale = constraint->weights->array().sqrt();
    e.model = scale_model(model, e.scale);
    e.data.values = data.values * e.scale.cwiseInverse().asDiagonal();
    C = C * e.scale.asDiagonal();
  }
  if (C.rows() > 0) {
    e.constrained = true;
    e.projection = projection_matrix(C, model.d_x);
  }
  return e;
}

InnerSolution inner_solve(const MomentModel& model, const Dataset& data, const Vector& theta,
                          const SolverOptions& opts, const ErrorConstraint* constraint) {
  opts.validate();
  model.require_complete();
  if (data.d_x() != model.d_x) throw Error(ErrorKind::kConfig, "dataset width does not match the model");
  if (theta.size() != model.d_theta) throw Error(ErrorKind::kConfig, "theta has wrong length");

  if (!constraint) return solve_fixed_point(model, data.values, theta, opts, nullptr);
  const EuclideanProblem e = euclidean_problem(model, data, constraint);
  InnerSolution sol = solve_fixed_point(e.model, e.data.values, theta, opts, e.P());
  sol.z = e.to_original(sol.z);
  if (e.constrained) {
    // Exact C(z - x) = 0: remove the rounding-level drift along C'.
    const Matrix& C = constraint->C;
    const Matrix D = sol.z - data.values;
    const Matrix CCt = C * C.transpose();
    sol.z -= (C.transpose() * CCt.ldlt().solve(C * D.transpose())).transpose();
  }
  return sol;
}

// ---------------------------------------------------------------------------
// Penalty oracle

InnerSolution oracle_inner_solve(const MomentModel& model, const Dataset& data,
                                 const Vector& theta, Index max_n) {
  model.require_complete();
  const Index n = data.n();
  const Index dx = model.d_x;
  const Index dg = model.d_g;
  if (n > max_n) {
    throw Error(ErrorKind::kConfig, "oracle_inner_solve is limited to n <= " + std::to_string(max_n));
  }
  const Index N = n * dx;
  const double inv_n = 1.0 / static_cast<double>(n);
  const Matrix& x = data.values;

  InnerSolution sol;
  sol.z = x;
  sol.status = SolverStatus::kConverged;

  auto row = [&](const Vector& u, Index i) { return Vector(u.segment(i * dx, dx)); };
  auto gbar_of = [&](const Vector& u) {
    Vector gb = Vector::Zero(dg);
    for (Index i = 0; i < n; ++i) gb += model.g(row(u, i), theta);
    return Vector(gb * inv_n);
  };
  auto objective = [&](const Vector& u, double mu) {
    double cost = 0;
    for (Index i = 0; i < n; ++i) cost += (row(u, i) - x.row(i).transpose()).squaredNorm();
    const Vector gb = gbar_of(u);
    if (!gb.allFinite()) return std::numeric_limits<double>::infinity();
    return 0.5 * cost * inv_n + 0.5 * mu * gb.squaredNorm();
  };

  // One penalty continuation from u; returns false on failure.
  int total_iter = 0;
  auto descend = [&](Vector& u, std::string& message) {
    double prev_violation = gbar_of(u).norm();
    bool ok = true;
    for (double mu = 1e2; mu <= 1e8 * 1.0001; mu *= 10.0) {
      for (int it = 0; it < 500; ++it) {
        ++total_iter;
        const Vector gb = gbar_of(u);
        Matrix J(dg, N);  // d gbar / du
        Vector grad(N);
        Matrix hess = Matrix::Zero(N, N);
        const Vector lam_pen = mu * gb;
        for (Index i = 0; i < n; ++i) {
          const Vector zi = row(u, i);
          J.middleCols(i * dx, dx) = model.H(zi, theta) * inv_n;
          grad.segment(i * dx, dx) = (zi - x.row(i).transpose()) * inv_n;
          hess.block(i * dx, i * dx, dx, dx) =
              Matrix::Identity(dx, dx) * inv_n + model.hess_zz(zi, theta, lam_pen) * inv_n;
        }
        grad.noalias() += mu * J.transpose() * gb;
        hess.noalias() += mu * J.transpose() * J;
        hess = symmetrize(hess);
        if (!grad.allFinite() || !hess.allFinite()) {
          message = "oracle iterate became non-finite";
          return false;
        }

        // Levenberg shift until the Hessian is positive definite.
        Vector step;
        double shift = 0;
        const double scale = hess.diagonal().cwiseAbs().maxCoeff();
        for (int k = 0; k < 60; ++k) {
          Eigen::LLT<Matrix> llt(hess + shift * Matrix::Identity(N, N));
          if (llt.info() == Eigen::Success) {
            step = -llt.solve(grad);
            break;
          }
          shift = shift == 0 ? 1e-10 * scale : shift * 10;
        }
        if (step.size() == 0) {
          message = "oracle Hessian could not be regularised";
          return false;
        }
        const double f0 = objective(u, mu);
        const double slope = grad.dot(step);
        double t = 1.0;
        Vector trial;
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
          trial = u + t * step;
          const double f1 = objective(trial, mu);
          if (std::isfinite(f1) && f1 <= f0 + 1e-4 * t * slope) {
            accepted = true;
            break;
          }
          t *= 0.5;
        }
        if (!accepted) break;  // no further decrease available at this precision
        u = trial;
        const double decrement = -slope;
        if (decrement < 1e-26 * (1.0 + f0) || (t * step).lpNorm<Eigen::Infinity>() < 1e-15) break;
      }
      const double violation = gbar_of(u).norm();
      if (!(violation <= prev_violation * 1.0001 + 1e-300)) {
        ok = false;
        message = "penalty stage mu=" + std::to_string(mu) + " did not reduce the constraint violation";
      }
      prev_violation = violation;
    }
    return ok;
  };

  // Start at x, then at a few fixed perturbations of x; the lowest transport
  // cost among successful runs wins (nonconvex problems have several minima).
  Vector sd = Vector::Ones(dx);
  if (n > 1) {
    for (Index k = 0; k < dx; ++k) {
      const double m = x.col(k).mean();
      const double v = (x.col(k).array() - m).square().sum() / static_cast<double>(n - 1);
      if (v > 0) sd(k) = std::sqrt(v);
    }
  }
  std::mt19937_64 eng(0x0dac1e);
  Vector u;
  double best = std::numeric_limits<double>::infinity();
  std::string first_message;
  for (int start = 0; start < 5; ++start) {
    Vector v(N);
    for (Index i = 0; i < n; ++i) {
      for (Index k = 0; k < dx; ++k) {
        const double jitter = start == 0 ? 0.0 : (static_cast<double>(eng() >> 11) * 0x1.0p-53 - 0.5) * sd(k);
        v(i * dx + k) = x(i, k) + jitter;
      }
    }
    std::string message;
    if (!descend(v, message)) {
      if (first_message.empty()) first_message = message;
      continue;
    }
    const double cost = objective(v, 0.0);
    if (cost < best * (1 - 1e-12)) {
      best = cost;
      u = v;
    }
  }
  if (u.size() == 0) {
    sol.status = SolverStatus::kDiverged;
    sol.message = first_message;
    sol.iterations = total_iter;
    return sol;
  }

  for (Index i = 0; i < n; ++i) sol.z.row(i) = row(u, i).transpose();
  // Multiplier from a least-squares fit of z_i - x_i = H_i' lambda.
  Matrix A(N, dg);
  Vector b(N);
  for (Index i = 0; i < n; ++i) {
    A.middleRows(i * dx, dx) = model.H(row(u, i), theta).transpose();
    b.segment(i * dx, dx) = (sol.z.row(i) - x.row(i)).transpose();
  }
  sol.lambda = A.colPivHouseholderQr().solve(b);
  sol.transport_cost = 0.5 * (sol.z - x).squaredNorm() * inv_n;
  sol.qhat = sol.transport_cost;
  sol.iterations = total_iter;
  return sol;
}

// ---------------------------------------------------------------------------
// Implicit transport map

namespace {

struct NewtonResult {
  Vector z;
  bool converged = false;
};

NewtonResult newton_root(const MomentModel& model, const Vector& x, const Vector& start,
                         const Vector& theta, const Vector& lambda, const QMapOptions& opts,
                         const Matrix* P) {
  const Index dx = x.size();
  const double tol = opts.tolerance * (1.0 + x.lpNorm<Eigen::Infinity>());
  auto residual = [&](const Vector& z) {
    Vector r = model.H(z, theta).transpose() * lambda;
    if (P) r = (*P) * r;
    return Vector(z - r - x);
  };
  NewtonResult res{start, false};
  Vector F = residual(res.z);
  for (int it = 0; it < opts.max_iter; ++it) {
    if (!F.allFinite()) return res;
    const double fnorm = F.lpNorm<Eigen::Infinity>();
    if (fnorm <= tol) {
      res.converged = true;
      return res;
    }
    Matrix J = model.hess_zz(res.z, theta, lambda);
    if (P) J = (*P) * J;
    J = Matrix::Identity(dx, dx) - J;
    if (!J.allFinite()) return res;
    Eigen::FullPivLU<Matrix> lu(J);
    if (!lu.isInvertible()) return res;
    const Vector step = lu.solve(F);
    double t = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 30; ++ls) {
      const Vector trial = res.z - t * step;
      const Vector Ft = residual(trial);
      if (Ft.allFinite() && Ft.lpNorm<Eigen::Infinity>() < fnorm) {
        res.z = trial;
        F = Ft;
        moved = true;
        break;
      }
      t *= 0.5;
    }
    if (!moved) {
      // Accept a full step only when already at rounding level.
      res.converged = fnorm <= 1e3 * tol;
      return res;
    }
  }
  res.converged = F.allFinite() && F.lpNorm<Eigen::Infinity>() <= tol;
  return res;
}

}  // namespace

Vector q_map(const MomentModel& model, const Vector& x, const Vector& theta,
             const Vector& lambda, const QMapOptions& opts, const Matrix* projection) {
  const NewtonResult first = newton_root(model, x, x, theta, lambda, opts, projection);
  if (first.converged) return first.z;

  // Deterministic restart directions.
  std::mt19937_64 rng(0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal;
  const double scale = opts.perturbation * (1.0 + x.norm());
  Vector best;
  double best_dist = std::numeric_limits<double>::infinity();
  for (int k = 0; k < opts.restarts; ++k) {
    Vector dir(x.size());
    for (Index j = 0; j < dir.size(); ++j) dir(j) = normal(rng);
    dir *= scale / std::max(dir.norm(), 1e-300);
    const NewtonResult r = newton_root(model, x, Vector(x + dir), theta, lambda, opts, projection);
    if (!r.converged) continue;
    const double dist = (r.z - x).squaredNorm();
    // Earlier starts win ties.
    if (dist < best_dist - 1e-9) {
      best_dist = dist;
      best = r.z;
    }
  }
  if (best.size() == 0) {
    throw Error(ErrorKind::kNoRoot, "q_map: no root of z - d_z g'(z) lambda = x found");
  }
  return best;
}

Vector q_map_from(const MomentModel& model, const Vector& x, const Vector& start,
                  const Vector& theta, const Vector& lambda, const QMapOptions& opts,
                  const Matrix* projection) {
  const NewtonResult r = newton_root(model, x, start, theta, lambda, opts, projection);
  if (r.converged) return r.z;
  return q_map(model, x, theta, lambda, opts, projection);
}

namespace {

Matrix implicit_factor(const MomentModel& model, const Vector& z, const Vector& theta,
                       const Vector& lambda, const Matrix* P) {
  Matrix J = model.hess_zz(z, theta, lambda);
  if (P) J = (*P) * J;
  return Matrix::Identity(z.size(), z.size()) - J;
}

}  // namespace

Matrix dq_dtheta_at(const MomentModel& model, const Vector& z, const Vector& theta,
                    const Vector& lambda, const Matrix* P) {
  Matrix rhs = model.hess_ztheta(z, theta, lambda);
  if (P) rhs = (*P) * rhs;
  return solve_checked(implicit_factor(model, z, theta, lambda, P), rhs,
                       "I - d_zz'(lambda'g) in dq/dtheta");
}

Matrix dq_dlambda_at(const MomentModel& model, const Vector& z, const Vector& theta,
                     const Vector& lambda, const Matrix* P) {
  Matrix rhs = model.H(z, theta).transpose();
  if (P) rhs = (*P) * rhs;
  return solve_checked(implicit_factor(model, z, theta, lambda, P), rhs,
                       "I - d_zz'(lambda'g) in dq/dlambda");
}

Matrix dq_dtheta(const MomentModel& model, const Vector& x, const Vector& theta,
                 const Vector& lambda, const Matrix* projection, const QMapOptions& opts) {
  const Vector z = q_map(model, x, theta, lambda, opts, projection);
  return dq_dtheta_at(model, z, theta, lambda, projection);
}

Matrix dq_dlambda(const MomentModel& model, const Vector& x, const Vector& theta,
                  const Vector& lambda, const Matrix* projection, const QMapOptions& opts) {
  const Vector z = q_map(model, x, theta, lambda, opts, projection);
  return dq_dlambda_at(model, z, theta, lambda, projection);
}

ConvergenceReport convergence_diagnostic(const MomentModel& model, const Dataset& data,
                                         const InnerSolution& solution, const Vector& theta,
                                         double ridge_threshold) {
  (void)data;
  ConvergenceReport rep;
  rep.lambda_norm = solution.lambda.norm();
  const Index n = solution.z.rows();
  Matrix M = Matrix::Zero(model.d_g, model.d_g);
  for (Index i = 0; i < n; ++i) {
    const Vector zi = solution.z.row(i).transpose();
    const Matrix Hi = model.H(zi, theta);
    M.noalias() += Hi * Hi.transpose();
    const Matrix hzz = model.hess_zz(zi, theta, solution.lambda);
    const double norm2 = hzz.size() == 0 ? 0.0 : Eigen::JacobiSVD<Matrix>(hzz).singularValues()(0);
    rep.spectral_proxy = std::max(rep.spectral_proxy, norm2);
  }
  M /= static_cast<double>(n);
  rep.min_eig_weighting = min_eigenvalue(M);
  rep.ridge_threshold = ridge_threshold * std::max(M.trace(), 0.0);
  rep.weighting_near_singular = rep.min_eig_weighting < rep.ridge_threshold;
  rep.contraction_suspect = rep.spectral_proxy >= 1.0;
  return rep;
}

}  // namespace otgmm
