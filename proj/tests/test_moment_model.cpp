#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "fixtures.hpp"
#include "otgmm/errors.hpp"

using namespace otgmm;

namespace {

Dataset col(std::initializer_list<double> v, const char* name = "x") {
  Matrix m(static_cast<Index>(v.size()), 1);
  Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return make_dataset(m, {name});
}

MomentModel g_only(const MomentModel& full) {
  MomentModel m;
  m.name = full.name + "/g";
  m.d_g = full.d_g;
  m.d_x = full.d_x;
  m.d_theta = full.d_theta;
  m.g = full.g;
  return m;
}

}  // namespace

TEST_CASE("moment stack of the mean model") {
  const Dataset d = col({1, 2, 3});
  const MomentStack s = eval_moment_stack(make_mean_model(1), d, d.values, Vector::Constant(1, 1.5));
  CHECK(s.gbar(0) == doctest::Approx(0.5));
  CHECK(s.Hbar_outer(0, 0) == doctest::Approx(1.0));
  CHECK(s.Gbar(0, 0) == doctest::Approx(-1.0));
}

TEST_CASE("linear IV moment on one row") {
  Matrix v(1, 4);
  v << 1.0, 0.5, 1.0, 2.0;
  const Dataset d = make_dataset(v, {"y", "r", "w1", "w2"});
  const LinearIvModel iv = make_linear_iv(d, "y", {"r"}, {"w1", "w2"}, false);
  const Vector g = iv.model.g(d.row(0), Vector::Constant(1, 1.0));
  CHECK(g(0) == doctest::Approx(0.5));
  CHECK(g(1) == doctest::Approx(1.0));
  CHECK(iv.model.d_g == 2);
  CHECK(iv.model.d_theta == 1);
}

TEST_CASE("factorized simulation moment vanishes at the true parameter") {
  const MomentModel m = dgp_model(DgpId::kNormalExp);
  const Vector g = m.g(Vector::Constant(1, 0.0), Vector::Constant(1, 1.5));
  CHECK(g(1) == doctest::Approx(0.0).epsilon(1e-15));
  const MomentModel l = dgp_model(DgpId::kNormalLogistic);
  for (double z : {-3.0, 0.2, 1.5, 4.0}) {
    CHECK(std::abs(l.g(Vector::Constant(1, z), Vector::Constant(1, 1.5))(1)) < 1e-15);
  }
}

TEST_CASE("linear IV theta derivative is -w r'") {
  DgpRng rng(4);
  const Dataset d = fixtures::iv_data(rng, 30);
  const LinearIvModel iv = fixtures::iv_model(d);
  const Vector z = d.row(3);
  const Vector th = Vector::Constant(1, 0.7);
  const Matrix G = iv.model.G(z, th);
  CHECK(G(0, 0) == doctest::Approx(-z(2) * z(1)));
  CHECK(G(1, 0) == doctest::Approx(-z(3) * z(1)));
  const Matrix fd = fd_jacobian([&](const Vector& t) { return iv.model.g(z, t); }, th);
  CHECK(relative_error(G, fd) < 1e-8);
}

TEST_CASE("intercept column is appended and marked error-free") {
  DgpRng rng(5);
  const Dataset d = fixtures::iv_data(rng, 20);
  const LinearIvModel iv = make_linear_iv(d, "y", {"r"}, {"w1", "w2"}, true);
  CHECK(iv.data.d_x() == 5);
  CHECK(iv.data.columns.back() == "(intercept)");
  CHECK(iv.model.d_g == 3);
  CHECK(iv.model.d_theta == 2);
  REQUIRE(iv.error_free.size() == 1);
  CHECK(iv.error_free[0] == 4);
  CHECK(iv.data.values.col(4).minCoeff() == 1.0);
  CHECK(iv.data.values.col(4).maxCoeff() == 1.0);
}

TEST_CASE("linear IV configuration errors") {
  DgpRng rng(6);
  const Dataset d = fixtures::iv_data(rng, 10);
  CHECK_THROWS_AS(make_linear_iv(d, "y", {"nope"}, {"w1"}, false), Error);
  CHECK_THROWS_AS(make_linear_iv(d, "y", {"r", "w1"}, {"w2"}, false), Error);
  CHECK_THROWS_AS(make_linear_iv(d, "y", {"y"}, {"w1"}, false), Error);
}

TEST_CASE("derivative audit of the mean model is exact to rounding") {
  std::vector<DerivativePoint> pts{{Vector::Constant(2, 0.3), Vector::Constant(1, -1.0), Vector::Constant(2, 0.5)}};
  const DerivativeReport r = check_derivatives(make_mean_model(2), pts);
  CHECK(r.pass());
  CHECK(r.max_error() < 1e-9);
}

TEST_CASE("derivative audit of the exp simulation model") {
  std::vector<DerivativePoint> pts{
      {Vector::Constant(1, 1.0), Vector::Constant(1, 1.5), (Vector(2) << 0.1, 0.2).finished()}};
  CHECK(check_derivatives(dgp_model(DgpId::kNormalExp), pts).pass());
  CHECK(check_derivatives(dgp_model(DgpId::kNormalExp, population_anchors(Latent::kNormal)), pts).pass());
}

TEST_CASE("a planted wrong H is caught") {
  MomentModel m = dgp_model(DgpId::kNormalExp);
  const JacobianFn good = m.H;
  m.H = [good](const Vector& z, const Vector& t) { return Matrix(2 * good(z, t)); };
  std::vector<DerivativePoint> pts{
      {Vector::Constant(1, 1.0), Vector::Constant(1, 1.5), (Vector(2) << 0.1, 0.2).finished()}};
  const DerivativeReport r = check_derivatives(m, pts);
  CHECK_FALSE(r.pass());
  CHECK(r.err_H == doctest::Approx(1.0).epsilon(1e-6));
  REQUIRE_FALSE(r.failures.empty());
  CHECK(r.failures.front() == "H");
}

TEST_CASE("built-in analytic derivatives match finite differences at 100 points") {
  DgpRng rng(7);
  for (const auto& inst : fixtures::builtin_instances(7, 25)) {
    std::vector<DerivativePoint> pts;
    for (int p = 0; p < 100; ++p) {
      Vector lam(inst.model.d_g);
      for (Index k = 0; k < lam.size(); ++k) lam(k) = rng.normal();
      Vector th = inst.theta;
      th.array() += 0.3 * rng.normal();
      Vector z = inst.data.row(p % inst.data.n());
      z.array() += 0.1 * rng.normal();
      pts.push_back({z, th, lam});
    }
    const DerivativeReport r = check_derivatives(inst.model, pts);
    INFO(inst.name);
    CHECK(r.pass());
  }
}

TEST_CASE("finite-difference fallback is flagged and accurate") {
  for (const auto& inst : fixtures::builtin_instances(8, 10)) {
    const MomentModel fd = complete_with_finite_differences(g_only(inst.model));
    CHECK(fd.fallback.H);
    CHECK(fd.fallback.hess_thetatheta);
    CHECK_NOTHROW(fd.require_complete());
    DgpRng rng(9);
    Vector lam(inst.model.d_g);
    for (Index k = 0; k < lam.size(); ++k) lam(k) = rng.normal();
    for (Index i = 0; i < 3; ++i) {
      const Vector z = inst.data.row(i);
      INFO(inst.name);
      CHECK(relative_error(fd.H(z, inst.theta), inst.model.H(z, inst.theta)) < 1e-5);
      CHECK(relative_error(fd.G(z, inst.theta), inst.model.G(z, inst.theta)) < 1e-5);
      CHECK(relative_error(fd.hess_zz(z, inst.theta, lam), inst.model.hess_zz(z, inst.theta, lam)) < 1e-5);
      CHECK(relative_error(fd.hess_ztheta(z, inst.theta, lam), inst.model.hess_ztheta(z, inst.theta, lam)) < 1e-5);
    }
  }
  CHECK_FALSE(complete_with_finite_differences(make_mean_model(1)).fallback.any());
}

TEST_CASE("models without derivatives are refused by the estimators") {
  const MomentModel m = g_only(make_mean_model(1));
  const Dataset d = col({1, 2, 3});
  CHECK_THROWS_AS(estimate_otgmm(m, d, Vector::Constant(1, 0.0)), Error);
}

TEST_CASE("moment stack at the data equals plain sample moments") {
  for (const auto& inst : fixtures::builtin_instances(10, 15)) {
    const MomentStack s = eval_moment_stack(inst.model, inst.data, inst.data.values, inst.theta);
    Vector g = Vector::Zero(inst.model.d_g);
    Matrix hh = Matrix::Zero(inst.model.d_g, inst.model.d_g);
    for (Index i = 0; i < inst.data.n(); ++i) {
      g += inst.model.g(inst.data.row(i), inst.theta);
      const Matrix H = inst.model.H(inst.data.row(i), inst.theta);
      hh += H * H.transpose();
    }
    const double n = static_cast<double>(inst.data.n());
    INFO(inst.name);
    CHECK((s.gbar - g / n).norm() < 1e-12 * (1 + g.norm()));
    CHECK((s.Hbar_outer - hh / n).norm() < 1e-12 * (1 + hh.norm()));
  }
}

TEST_CASE("linear IV moments are invariant to row order") {
  DgpRng rng(11);
  const Dataset d = fixtures::iv_data(rng, 40);
  std::vector<Index> perm(40);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::rotate(perm.begin(), perm.begin() + 7, perm.end());
  Matrix shuffled(40, 4);
  for (Index i = 0; i < 40; ++i) shuffled.row(i) = d.values.row(perm[static_cast<std::size_t>(i)]);
  const Dataset d2 = make_dataset(shuffled, d.columns);
  const LinearIvModel a = fixtures::iv_model(d);
  const LinearIvModel b = fixtures::iv_model(d2);
  const Vector th = Vector::Constant(1, 0.4);
  const Vector ga = eval_moment_stack(a.model, a.data, a.data.values, th).gbar;
  const Vector gb = eval_moment_stack(b.model, b.data, b.data.values, th).gbar;
  CHECK((ga - gb).norm() < 1e-14);
}

TEST_CASE("non-finite moments raise a domain error with the row") {
  const MomentModel m = dgp_model(DgpId::kNormalExp);
  const Dataset d = col({0.0, 1.0, 800.0});
  try {
    eval_moment_stack(m, d, d.values, Vector::Constant(1, 1.0));
    FAIL("expected a domain error");
  } catch (const DomainError& e) {
    CHECK(e.row() == 2);
  }
}

TEST_CASE("CSV parsing") {
  const Dataset d = parse_csv("a,b\n1,2\n3.5,-4e-1\n");
  CHECK(d.n() == 2);
  CHECK(d.columns == std::vector<std::string>{"a", "b"});
  CHECK(d.values(1, 1) == doctest::Approx(-0.4));

  try {
    parse_csv("a,b\n1,2\n3,\n");
    FAIL("expected a data error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kData);
    CHECK(std::string(e.what()).find("row 3") != std::string::npos);
    CHECK(std::string(e.what()).find("b") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_csv("a,b\n1,x\n"), Error);
  CHECK_THROWS_AS(parse_csv("a,a\n1,2\n"), Error);
  CHECK_THROWS_AS(parse_csv("a,b\n1,2,3\n"), Error);
  CHECK_THROWS_AS(parse_csv("a,b\n1,nan\n"), Error);
  CHECK_THROWS_AS(parse_csv("a,b\n"), Error);
}

TEST_CASE("projection matrices") {
  Matrix C(1, 2);
  C << 1, 0;
  const Matrix P = projection_matrix(C, 2);
  CHECK(P(0, 0) == 0.0);
  CHECK(P(1, 1) == 1.0);
  CHECK(P(0, 1) == 0.0);
  CHECK(projection_matrix(Matrix(0, 3), 3).isIdentity(0));
  CHECK(projection_matrix(Matrix::Identity(3, 3), 3).cwiseAbs().maxCoeff() < 1e-15);

  Matrix R(2, 3);
  R << 1, 2, 3, 2, 4, 6;
  CHECK_THROWS_AS(projection_matrix(R, 3), Error);

  ErrorConstraint bad;
  bad.C = Matrix::Zero(0, 2);
  bad.weights = (Vector(2) << 1.0, -1.0).finished();
  CHECK_THROWS_AS(bad.validate(2), Error);
}
