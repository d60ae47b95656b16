#pragma once

#include <string_view>

#include <Eigen/Dense>

namespace otgmm {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Condition numbers above this are treated as singular.
inline constexpr double kMaxCondition = 1e12;

/// 2-norm condition number via SVD. Returns +inf for exactly singular input.
double condition_number(const Matrix& a);

/// Solves a * x = b with full pivoting. Throws SingularError when a is
/// non-square, non-finite, or its condition number exceeds max_condition.
Matrix solve_checked(const Matrix& a, const Matrix& b, std::string_view what,
                     double max_condition = kMaxCondition);

Matrix inverse_checked(const Matrix& a, std::string_view what,
                       double max_condition = kMaxCondition);

inline Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

/// Smallest eigenvalue of the symmetric part of a.
double min_eigenvalue(const Matrix& a);

bool all_finite(const Matrix& a);

}  // namespace otgmm
