#include "otgmm/moment_model.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <utility>

#include "otgmm/errors.hpp"

namespace otgmm {

namespace {

std::string dims(Index r, Index c) { return std::to_string(r) + "x" + std::to_string(c); }

// Gradient of lambda'g in z, i.e. H'lambda.
Vector grad_z(const MomentModel& m, const Vector& z, const Vector& theta, const Vector& lambda) {
  return m.H(z, theta).transpose() * lambda;
}

Vector grad_theta(const MomentModel& m, const Vector& z, const Vector& theta,
                  const Vector& lambda) {
  return m.G(z, theta).transpose() * lambda;
}

}  // namespace

Matrix fd_jacobian(const std::function<Vector(const Vector&)>& f, const Vector& x) {
  Matrix jac;
  Vector xp = x;
  for (Index k = 0; k < x.size(); ++k) {
    const double h = fd_step(x(k));
    xp(k) = x(k) + h;
    const Vector fp = f(xp);
    xp(k) = x(k) - h;
    const Vector fm = f(xp);
    xp(k) = x(k);
    if (k == 0) jac.resize(fp.size(), x.size());
    jac.col(k) = (fp - fm) / (2.0 * h);
  }
  return jac;
}

void MomentModel::validate() const {
  if (!g) throw Error(ErrorKind::kConfig, "moment model '" + name + "' has no g evaluator");
  if (d_g < 1 || d_x < 1 || d_theta < 1) {
    throw Error(ErrorKind::kConfig, "moment model '" + name + "' has an empty dimension");
  }
  if (d_g < d_theta) {
    throw Error(ErrorKind::kConfig, "moment model '" + name + "' is underidentified (d_g=" +
                                        std::to_string(d_g) +
                                        " < d_theta=" + std::to_string(d_theta) + ")");
  }
}

void MomentModel::require_complete() const {
  validate();
  if (!H || !G || !hess_zz || !hess_ztheta || !hess_thetatheta) {
    throw Error(ErrorKind::kConfig, "moment model '" + name +
                                        "' lacks derivative evaluators; call complete_with_finite_differences");
  }
}

namespace {

// d^2 f / da db' at (a, b) for f(a, b), by central second differences with
// step 1e-4 (1 + |coordinate|). When a and b are the same point the diagonal
// uses the three-point rule.
Matrix second_differences(const std::function<double(const Vector&, const Vector&)>& f, const Vector& a,
                          const Vector& b) {
  const bool same = &a == &b;
  auto step = [](double c) { return 1e-4 * (1.0 + std::abs(c)); };
  Matrix h(a.size(), b.size());
  for (Index i = 0; i < a.size(); ++i) {
    for (Index j = 0; j < b.size(); ++j) {
      if (same && j < i) {
        h(i, j) = h(j, i);
        continue;
      }
      const double hi = step(a(i));
      const double hj = step(b(j));
      if (same && i == j) {
        Vector up = a, dn = a;
        up(i) += hi;
        dn(i) -= hi;
        h(i, i) = (f(up, up) - 2 * f(a, a) + f(dn, dn)) / (hi * hi);
        continue;
      }
      auto eval = [&](double si, double sj) {
        Vector aa = a;
        Vector bb = b;
        if (same) {
          aa(i) += si * hi;
          aa(j) += sj * hj;
          return f(aa, aa);
        }
        aa(i) += si * hi;
        bb(j) += sj * hj;
        return f(aa, bb);
      };
      h(i, j) = (eval(1, 1) - eval(1, -1) - eval(-1, 1) + eval(-1, -1)) / (4 * hi * hj);
    }
  }
  return h;
}

}  // namespace

MomentModel complete_with_finite_differences(MomentModel m) {
  m.validate();
  const MomentFn g = m.g;
  if (!m.H) {
    m.H = [g](const Vector& z, const Vector& theta) {
      return fd_jacobian([&](const Vector& zz) { return g(zz, theta); }, z);
    };
    m.fallback.H = true;
  }
  if (!m.G) {
    m.G = [g](const Vector& z, const Vector& theta) {
      return fd_jacobian([&](const Vector& tt) { return g(z, tt); }, theta);
    };
    m.fallback.G = true;
  }
  // Copies so the lambdas do not reference the returned object. Second
  // derivatives difference an analytic first derivative when there is one;
  // otherwise they take second differences of lambda'g directly, since nested
  // first differences lose about half the digits.
  const JacobianFn H = m.H;
  const JacobianFn G = m.G;
  const bool analytic_H = !m.fallback.H;
  const bool analytic_G = !m.fallback.G;
  if (!m.hess_zz) {
    if (analytic_H) {
      m.hess_zz = [H](const Vector& z, const Vector& theta, const Vector& lambda) {
        Matrix h = fd_jacobian([&](const Vector& zz) { return Vector(H(zz, theta).transpose() * lambda); }, z);
        return symmetrize(h);
      };
    } else {
      m.hess_zz = [g](const Vector& z, const Vector& theta, const Vector& lambda) {
        return second_differences([&](const Vector& a, const Vector&) { return lambda.dot(g(a, theta)); }, z, z);
      };
    }
    m.fallback.hess_zz = true;
  }
  if (!m.hess_ztheta) {
    if (analytic_H) {
      m.hess_ztheta = [H](const Vector& z, const Vector& theta, const Vector& lambda) {
        return fd_jacobian([&](const Vector& tt) { return Vector(H(z, tt).transpose() * lambda); }, theta);
      };
    } else if (analytic_G) {
      m.hess_ztheta = [G](const Vector& z, const Vector& theta, const Vector& lambda) {
        return Matrix(fd_jacobian([&](const Vector& zz) { return Vector(G(zz, theta).transpose() * lambda); }, z)
                          .transpose());
      };
    } else {
      m.hess_ztheta = [g](const Vector& z, const Vector& theta, const Vector& lambda) {
        return second_differences([&](const Vector& a, const Vector& b) { return lambda.dot(g(a, b)); }, z, theta);
      };
    }
    m.fallback.hess_ztheta = true;
  }
  if (!m.hess_thetatheta) {
    if (analytic_G) {
      m.hess_thetatheta = [G](const Vector& z, const Vector& theta, const Vector& lambda) {
        Matrix h = fd_jacobian([&](const Vector& tt) { return Vector(G(z, tt).transpose() * lambda); }, theta);
        return symmetrize(h);
      };
    } else {
      m.hess_thetatheta = [g](const Vector& z, const Vector& theta, const Vector& lambda) {
        return second_differences([&](const Vector&, const Vector& b) { return lambda.dot(g(z, b)); }, theta, theta);
      };
    }
    m.fallback.hess_thetatheta = true;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Dataset

Index Dataset::column_index(const std::string& name) const {
  const auto it = std::find(columns.begin(), columns.end(), name);
  if (it == columns.end()) throw Error(ErrorKind::kConfig, "unknown column '" + name + "'");
  return static_cast<Index>(it - columns.begin());
}

void Dataset::validate() const {
  if (values.rows() < 1) throw Error(ErrorKind::kData, "dataset has no observations");
  if (static_cast<Index>(columns.size()) != values.cols()) {
    throw Error(ErrorKind::kData, "dataset has " + std::to_string(columns.size()) +
                                      " column names for " + std::to_string(values.cols()) +
                                      " columns");
  }
  std::set<std::string> seen;
  for (const auto& c : columns) {
    if (!seen.insert(c).second) throw Error(ErrorKind::kData, "duplicate column name '" + c + "'");
  }
  for (Index i = 0; i < values.rows(); ++i) {
    for (Index j = 0; j < values.cols(); ++j) {
      if (!std::isfinite(values(i, j))) {
        throw Error(ErrorKind::kData, "non-finite value at row " + std::to_string(i + 1) +
                                          ", column '" + columns[j] + "'");
      }
    }
  }
}

Dataset make_dataset(Matrix values, std::vector<std::string> columns) {
  if (columns.empty()) {
    for (Index j = 0; j < values.cols(); ++j) columns.push_back("x" + std::to_string(j + 1));
  }
  Dataset d{std::move(values), std::move(columns)};
  d.validate();
  return d;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
    } else if (ch == ',' && !quoted) {
      out.push_back(cell);
      cell.clear();
    } else if (ch != '\r') {
      cell.push_back(ch);
    }
  }
  out.push_back(cell);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace

Dataset parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    if (!trim(line).empty()) {
      header = split_csv_line(line);
      break;
    }
  }
  if (header.empty()) throw Error(ErrorKind::kData, "CSV has no header row");
  for (auto& h : header) h = trim(h);
  if (!header.empty() && header[0].rfind("\xEF\xBB\xBF", 0) == 0) header[0] = header[0].substr(3);

  std::vector<std::vector<double>> rows;
  Index line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw Error(ErrorKind::kData, "row " + std::to_string(line_no) + " has " +
                                        std::to_string(cells.size()) + " cells, expected " +
                                        std::to_string(header.size()));
    }
    std::vector<double> row(cells.size());
    for (std::size_t j = 0; j < cells.size(); ++j) {
      const std::string cell = trim(cells[j]);
      double v = 0;
      const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || res.ec != std::errc() || res.ptr != cell.data() + cell.size()) {
        throw Error(ErrorKind::kData, "missing or non-numeric value at row " +
                                          std::to_string(line_no) + ", column '" + header[j] +
                                          "'");
      }
      row[j] = v;
    }
    rows.push_back(std::move(row));
  }
  Matrix values(static_cast<Index>(rows.size()), static_cast<Index>(header.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < header.size(); ++j) values(i, j) = rows[i][j];
  }
  Dataset d{std::move(values), header};
  d.validate();
  return d;
}

Dataset load_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::kData, "cannot open data file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_csv(ss.str());
}

// ---------------------------------------------------------------------------
// Constraints

ErrorConstraint ErrorConstraint::error_free(Index d_x, const std::vector<Index>& coordinates) {
  ErrorConstraint c;
  c.C = Matrix::Zero(static_cast<Index>(coordinates.size()), d_x);
  for (std::size_t k = 0; k < coordinates.size(); ++k) c.C(k, coordinates[k]) = 1.0;
  return c;
}

void ErrorConstraint::validate(Index d_x) const {
  if (C.rows() > 0 && C.cols() != d_x) {
    throw Error(ErrorKind::kConfig, "constraint matrix is " + dims(C.rows(), C.cols()) +
                                        ", expected " + std::to_string(d_x) + " columns");
  }
  if (C.rows() > d_x) throw Error(ErrorKind::kConfig, "more constraints than coordinates");
  if (C.rows() > 0) {
    Eigen::FullPivLU<Matrix> lu(C);
    lu.setThreshold(1e-10);
    if (lu.rank() != C.rows()) throw Error(ErrorKind::kConfig, "constraint matrix is not full row rank");
  }
  if (weights) {
    if (weights->size() != d_x) throw Error(ErrorKind::kConfig, "weights must have length d_x");
    if (!((weights->array() > 0.0).all() && weights->allFinite())) {
      throw Error(ErrorKind::kConfig, "transport weights must be strictly positive");
    }
  }
}

Matrix projection_matrix(const Matrix& C, Index d_x) {
  if (C.rows() == 0) return Matrix::Identity(d_x, d_x);
  ErrorConstraint{C, std::nullopt}.validate(d_x);
  const Matrix CCt = C * C.transpose();
  Matrix P = Matrix::Identity(d_x, d_x) - C.transpose() * solve_checked(CCt, C, "CC'");
  return symmetrize(P);
}

Matrix projection_matrix(const ErrorConstraint& constraint, Index d_x) {
  return projection_matrix(constraint.C, d_x);
}

// ---------------------------------------------------------------------------
// Moment averages

Vector eval_g_checked(const MomentModel& model, const Vector& z, const Vector& theta, Index row) {
  Vector g = model.g(z, theta);
  if (g.size() != model.d_g) {
    throw DomainError("g returned " + std::to_string(g.size()) + " values, expected " +
                          std::to_string(model.d_g),
                      row);
  }
  if (!g.allFinite()) {
    throw DomainError("non-finite moment value at row " + std::to_string(row), row);
  }
  return g;
}

MomentStack eval_moment_stack(const MomentModel& model, const Dataset& data, const Matrix& z,
                              const Vector& theta, const Matrix* projection) {
  if (z.rows() != data.n() || z.cols() != data.d_x() || z.cols() != model.d_x) {
    throw Error(ErrorKind::kDomain, "z is " + dims(z.rows(), z.cols()) + ", expected " +
                                        dims(data.n(), model.d_x));
  }
  if (theta.size() != model.d_theta) throw Error(ErrorKind::kDomain, "theta has wrong length");
  MomentStack s{Vector::Zero(model.d_g), Matrix::Zero(model.d_g, model.d_g),
                Matrix::Zero(model.d_g, model.d_theta)};
  const Index n = z.rows();
  for (Index i = 0; i < n; ++i) {
    const Vector zi = z.row(i).transpose();
    s.gbar += eval_g_checked(model, zi, theta, i);
    const Matrix H = model.H(zi, theta);
    const Matrix G = model.G(zi, theta);
    if (!H.allFinite() || !G.allFinite()) {
      throw DomainError("non-finite moment derivative at row " + std::to_string(i), i);
    }
    if (projection) {
      s.Hbar_outer.noalias() += H * (*projection) * H.transpose();
    } else {
      s.Hbar_outer.noalias() += H * H.transpose();
    }
    s.Gbar += G;
  }
  s.gbar /= static_cast<double>(n);
  s.Hbar_outer /= static_cast<double>(n);
  s.Gbar /= static_cast<double>(n);
  return s;
}

// ---------------------------------------------------------------------------
// Built-in models

MomentModel make_mean_model(Index d_x) {
  MomentModel m;
  m.name = d_x == 1 ? "mean" : "mean" + std::to_string(d_x);
  m.d_g = d_x;
  m.d_x = d_x;
  m.d_theta = 1;
  m.g = [](const Vector& z, const Vector& theta) { return Vector(z.array() - theta(0)); };
  m.H = [d_x](const Vector&, const Vector&) { return Matrix(Matrix::Identity(d_x, d_x)); };
  m.G = [d_x](const Vector&, const Vector&) { return Matrix(Matrix::Constant(d_x, 1, -1.0)); };
  m.hess_zz = [d_x](const Vector&, const Vector&, const Vector&) {
    return Matrix(Matrix::Zero(d_x, d_x));
  };
  m.hess_ztheta = [d_x](const Vector&, const Vector&, const Vector&) {
    return Matrix(Matrix::Zero(d_x, 1));
  };
  m.hess_thetatheta = [](const Vector&, const Vector&, const Vector&) {
    return Matrix(Matrix::Zero(1, 1));
  };
  return m;
}

LinearIvModel make_linear_iv(const Dataset& data, const std::string& y_col,
                             const std::vector<std::string>& r_cols,
                             const std::vector<std::string>& w_cols, bool intercept) {
  data.validate();
  LinearIvModel iv;
  iv.data = data;
  if (intercept) {
    const std::string name = "(intercept)";
    if (std::find(data.columns.begin(), data.columns.end(), name) != data.columns.end()) {
      throw Error(ErrorKind::kConfig, "dataset already has an '(intercept)' column");
    }
    iv.data.values.conservativeResize(Eigen::NoChange, data.d_x() + 1);
    iv.data.values.col(data.d_x()).setOnes();
    iv.data.columns.push_back(name);
    iv.error_free.push_back(data.d_x());
  }
  const Index y = iv.data.column_index(y_col);
  std::vector<Index> r;
  std::vector<Index> w;
  for (const auto& c : r_cols) {
    const Index k = iv.data.column_index(c);
    if (k == y) throw Error(ErrorKind::kConfig, "dependent variable '" + c + "' listed as a regressor");
    r.push_back(k);
    iv.coefficient_names.push_back(c);
  }
  for (const auto& c : w_cols) {
    const Index k = iv.data.column_index(c);
    if (k == y) throw Error(ErrorKind::kConfig, "dependent variable '" + c + "' listed as an instrument");
    w.push_back(k);
  }
  if (intercept) {
    r.push_back(iv.data.d_x() - 1);
    w.push_back(iv.data.d_x() - 1);
    iv.coefficient_names.push_back("(intercept)");
  }
  if (r.empty()) throw Error(ErrorKind::kConfig, "linear IV model needs at least one regressor");
  iv.y_index = y;
  iv.r_index = r;
  iv.w_index = w;
  if (w.size() < r.size()) {
    throw Error(ErrorKind::kConfig, "linear IV model is underidentified: " +
                                        std::to_string(w.size()) + " instruments for " +
                                        std::to_string(r.size()) + " coefficients");
  }

  const Index d_x = iv.data.d_x();
  const Index d_g = static_cast<Index>(w.size());
  const Index d_t = static_cast<Index>(r.size());
  MomentModel& m = iv.model;
  m.name = "linear_iv";
  m.d_g = d_g;
  m.d_x = d_x;
  m.d_theta = d_t;

  // With a = e_y - sum_k theta_k e_{r_k}: the residual is a'z and g_m = z_{w_m} a'z.
  auto residual_direction = [=](const Vector& theta) {
    Vector a = Vector::Zero(d_x);
    a(y) = 1.0;
    for (Index k = 0; k < d_t; ++k) a(r[k]) -= theta(k);
    return a;
  };
  auto instrument_direction = [=](const Vector& lambda) {
    Vector b = Vector::Zero(d_x);
    for (Index l = 0; l < d_g; ++l) b(w[l]) += lambda(l);
    return b;
  };
  m.g = [=](const Vector& z, const Vector& theta) {
    const double e = residual_direction(theta).dot(z);
    Vector g(d_g);
    for (Index l = 0; l < d_g; ++l) g(l) = z(w[l]) * e;
    return g;
  };
  m.H = [=](const Vector& z, const Vector& theta) {
    const Vector a = residual_direction(theta);
    const double e = a.dot(z);
    Matrix H(d_g, d_x);
    for (Index l = 0; l < d_g; ++l) {
      H.row(l) = z(w[l]) * a.transpose();
      H(l, w[l]) += e;
    }
    return H;
  };
  m.G = [=](const Vector& z, const Vector&) {
    Matrix G(d_g, d_t);
    for (Index l = 0; l < d_g; ++l) {
      for (Index k = 0; k < d_t; ++k) G(l, k) = -z(w[l]) * z(r[k]);
    }
    return G;
  };
  m.hess_zz = [=](const Vector&, const Vector& theta, const Vector& lambda) {
    const Vector a = residual_direction(theta);
    const Vector b = instrument_direction(lambda);
    return Matrix(a * b.transpose() + b * a.transpose());
  };
  m.hess_ztheta = [=](const Vector& z, const Vector&, const Vector& lambda) {
    const Vector b = instrument_direction(lambda);
    const double bz = b.dot(z);
    Matrix out(d_x, d_t);
    for (Index k = 0; k < d_t; ++k) {
      out.col(k) = -z(r[k]) * b;
      out(r[k], k) -= bz;
    }
    return out;
  };
  m.hess_thetatheta = [=](const Vector&, const Vector&, const Vector&) {
    return Matrix(Matrix::Zero(d_t, d_t));
  };
  return iv;
}

namespace {

void iv_design(const LinearIvModel& iv, Vector& y, Matrix& R, Matrix& W) {
  const Matrix& v = iv.data.values;
  y = v.col(iv.y_index);
  R = v(Eigen::all, iv.r_index);
  W = v(Eigen::all, iv.w_index);
}

}  // namespace

Vector ols_start(const LinearIvModel& iv) {
  Vector y;
  Matrix R, W;
  iv_design(iv, y, R, W);
  return R.colPivHouseholderQr().solve(y);
}

Vector iv_method_of_moments(const LinearIvModel& iv) {
  Vector y;
  Matrix R, W;
  iv_design(iv, y, R, W);
  if (W.cols() != R.cols()) {
    throw Error(ErrorKind::kConfig, "method of moments requires a just-identified IV model");
  }
  return solve_checked(W.transpose() * R, W.transpose() * y, "W'R");
}

// ---------------------------------------------------------------------------
// Derivative audit

double relative_error(const Matrix& analytic, const Matrix& reference) {
  if (analytic.rows() != reference.rows() || analytic.cols() != reference.cols()) {
    return std::numeric_limits<double>::infinity();
  }
  if (!analytic.allFinite() || !reference.allFinite()) return std::numeric_limits<double>::infinity();
  return (analytic - reference).norm() / std::max(reference.norm(), 1e-3);
}

double DerivativeReport::max_error() const {
  return std::max({err_H, err_G, err_hess_zz, err_hess_ztheta, err_hess_thetatheta});
}

DerivativeReport check_derivatives(const MomentModel& model,
                                   const std::vector<DerivativePoint>& points,
                                   double tolerance) {
  DerivativeReport rep;
  rep.tolerance = tolerance;
  for (const auto& p : points) {
    const Vector& z = p.z;
    const Vector& th = p.theta;
    const Vector& lam = p.lambda;
    const Matrix H_fd = fd_jacobian([&](const Vector& zz) { return model.g(zz, th); }, z);
    const Matrix G_fd = fd_jacobian([&](const Vector& tt) { return model.g(z, tt); }, th);
    const Matrix hzz_fd = fd_jacobian([&](const Vector& zz) { return grad_z(model, zz, th, lam); }, z);
    const Matrix hzt_fd =
        fd_jacobian([&](const Vector& tt) { return grad_z(model, z, tt, lam); }, th);
    const Matrix htt_fd =
        fd_jacobian([&](const Vector& tt) { return grad_theta(model, z, tt, lam); }, th);
    rep.err_H = std::max(rep.err_H, relative_error(model.H(z, th), H_fd));
    rep.err_G = std::max(rep.err_G, relative_error(model.G(z, th), G_fd));
    rep.err_hess_zz = std::max(rep.err_hess_zz, relative_error(model.hess_zz(z, th, lam), hzz_fd));
    rep.err_hess_ztheta =
        std::max(rep.err_hess_ztheta, relative_error(model.hess_ztheta(z, th, lam), hzt_fd));
    rep.err_hess_thetatheta = std::max(rep.err_hess_thetatheta,
                                       relative_error(model.hess_thetatheta(z, th, lam), htt_fd));
  }
  auto check = [&](const char* what, double err) {
    if (!(err < tolerance)) rep.failures.push_back(std::string(what));
  };
  check("H", rep.err_H);
  check("G", rep.err_G);
  check("hess_zz", rep.err_hess_zz);
  check("hess_ztheta", rep.err_hess_ztheta);
  check("hess_thetatheta", rep.err_hess_thetatheta);
  return rep;
}

}  // namespace otgmm
