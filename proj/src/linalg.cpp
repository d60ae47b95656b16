#include "otgmm/linalg.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "otgmm/errors.hpp"

namespace otgmm {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDomain: return "domain_error";
    case ErrorKind::kSingular: return "singular";
    case ErrorKind::kNoRoot: return "no_root";
    case ErrorKind::kConfig: return "config_error";
    case ErrorKind::kData: return "data_error";
    case ErrorKind::kSolver: return "solver_failure";
  }
  return "unknown";
}

bool all_finite(const Matrix& a) { return a.allFinite(); }

double condition_number(const Matrix& a) {
  if (a.size() == 0) return 1.0;
  Eigen::JacobiSVD<Matrix> svd(a);
  const auto& s = svd.singularValues();
  const double smax = s(0);
  const double smin = s(s.size() - 1);
  if (smin <= 0.0) return std::numeric_limits<double>::infinity();
  return smax / smin;
}

Matrix solve_checked(const Matrix& a, const Matrix& b, std::string_view what,
                     double max_condition) {
  if (a.rows() != a.cols() || a.rows() != b.rows()) {
    throw SingularError(std::string(what) + ": non-conformable system", 0.0);
  }
  if (!a.allFinite()) {
    throw SingularError(std::string(what) + ": non-finite matrix",
                        std::numeric_limits<double>::infinity());
  }
  if (a.rows() == 0) return Matrix(0, b.cols());
  const double cond = condition_number(a);
  if (!(cond <= max_condition)) {
    throw SingularError(std::string(what) + ": matrix is singular (condition " +
                            std::to_string(cond) + ")",
                        cond);
  }
  return a.fullPivLu().solve(b);
}

Matrix inverse_checked(const Matrix& a, std::string_view what, double max_condition) {
  return solve_checked(a, Matrix::Identity(a.rows(), a.cols()), what, max_condition);
}

double min_eigenvalue(const Matrix& a) {
  if (a.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(a), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

}  // namespace otgmm
