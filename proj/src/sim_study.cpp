#include "otgmm/sim_study.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "otgmm/errors.hpp"

namespace otgmm {

const char* to_string(DgpId id) {
  switch (id) {
    case DgpId::kNormalExp: return "normal_exp";
    case DgpId::kNormalLogistic: return "normal_logistic";
    case DgpId::kExpLogistic: return "exp_logistic";
    case DgpId::kExponentialSq: return "exponential_sq";
  }
  return "unknown";
}

const char* to_string(Latent latent) {
  switch (latent) {
    case Latent::kNormal: return "normal";
    case Latent::kUniform: return "uniform";
    case Latent::kBinomial: return "binomial";
    case Latent::kExponential: return "exponential";
  }
  return "unknown";
}

const char* to_string(DgpForm form) {
  switch (form) {
    case DgpForm::kPopulationAnchor: return "population_anchor";
    case DgpForm::kObservedAnchor: return "observed_anchor";
    case DgpForm::kPerObservation: return "per_observation";
  }
  return "unknown";
}

DgpId parse_dgp_id(const std::string& s) {
  for (DgpId id : {DgpId::kNormalExp, DgpId::kNormalLogistic, DgpId::kExpLogistic, DgpId::kExponentialSq}) {
    if (s == to_string(id)) return id;
  }
  throw Error(ErrorKind::kConfig, "unknown dgp id '" + s + "'");
}

Latent parse_latent(const std::string& s) {
  for (Latent l : {Latent::kNormal, Latent::kUniform, Latent::kBinomial, Latent::kExponential}) {
    if (s == to_string(l)) return l;
  }
  throw Error(ErrorKind::kConfig, "unknown latent law '" + s + "'");
}

DgpForm parse_dgp_form(const std::string& s) {
  if (s == "population_anchor") return DgpForm::kPopulationAnchor;
  if (s == "per_observation") return DgpForm::kPerObservation;
  if (s == "observed_anchor") return DgpForm::kObservedAnchor;
  throw Error(ErrorKind::kConfig, "unknown dgp form '" + s + "'");
}

void DgpSpec::validate() const {
  if (!(sigma >= 0) || !std::isfinite(sigma)) throw Error(ErrorKind::kConfig, "sigma must be >= 0");
  if (n < 2) throw Error(ErrorKind::kConfig, "n must be at least 2");
  const bool exp_model = id == DgpId::kExponentialSq;
  if (exp_model != (latent == Latent::kExponential)) {
    throw Error(ErrorKind::kConfig, std::string("dgp ") + to_string(id) + " cannot use latent law " +
                                        to_string(latent));
  }
}

double logistic_23(double z) {
  const double t = 2 * z - 3;
  if (t >= 0) return 1 / (1 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1 + e);
}

DgpAnchors observed_anchors(const Dataset& data) {
  DgpAnchors a{0, 0};
  for (Index i = 0; i < data.n(); ++i) {
    a.exp_mean += std::exp(data.values(i, 0));
    a.logistic_mean += logistic_23(data.values(i, 0));
  }
  a.exp_mean /= static_cast<double>(data.n());
  a.logistic_mean /= static_cast<double>(data.n());
  return a;
}

DgpAnchors population_anchors(Latent latent) {
  switch (latent) {
    case Latent::kNormal:
      // 2z - 3 ~ N(0, 8) is symmetric, so the logistic mean is exactly 1/2.
      return {std::exp(kTheta0 + 1.0), 0.5};
    case Latent::kUniform:
      // Integral of logistic(2z - 3) over [1, 2] is (log(1 + e) - log(1 + 1/e)) / 2 = 1/2.
      return {std::exp(2.0) - std::exp(1.0), 0.5};
    case Latent::kBinomial: {
      DgpAnchors a{0, 0};
      double choose = 1;
      for (int k = 0; k <= 5; ++k) {
        const double w = choose * std::pow(0.3, k) * std::pow(0.7, 5 - k);
        a.exp_mean += w * std::exp(static_cast<double>(k));
        a.logistic_mean += w * logistic_23(k);
        choose = choose * (5 - k) / (k + 1);
      }
      return a;
    }
    case Latent::kExponential:
      // rate 2/3: E[e^z] diverges; the logistic mean is not used with this law.
      return {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::quiet_NaN()};
  }
  throw Error(ErrorKind::kConfig, "unknown latent law");
}

namespace {

enum class Fn { kIdentity, kExp, kLogistic };

// f, f', f''
std::array<double, 3> eval_fn(Fn fn, double z) {
  switch (fn) {
    case Fn::kIdentity: return {z, 1, 0};
    case Fn::kExp: {
      const double e = std::exp(z);
      return {e, e, e};
    }
    case Fn::kLogistic: {
      const double l = logistic_23(z);
      return {l, 2 * l * (1 - l), 4 * l * (1 - l) * (1 - 2 * l)};
    }
  }
  return {0, 0, 0};
}

// g_k = f_k(z) (1 - a_k theta) - c_k theta with scalar z and theta.
struct ScalarMoment {
  Fn fn;
  double a;
  double c;
};

MomentModel scalar_model(std::string name, std::vector<ScalarMoment> ms) {
  MomentModel m;
  m.name = std::move(name);
  m.d_g = static_cast<Index>(ms.size());
  m.d_x = 1;
  m.d_theta = 1;
  m.g = [ms](const Vector& z, const Vector& th) {
    Vector g(ms.size());
    for (std::size_t k = 0; k < ms.size(); ++k) {
      g(k) = eval_fn(ms[k].fn, z(0))[0] * (1 - ms[k].a * th(0)) - ms[k].c * th(0);
    }
    return g;
  };
  m.H = [ms](const Vector& z, const Vector& th) {
    Matrix h(ms.size(), 1);
    for (std::size_t k = 0; k < ms.size(); ++k) h(k, 0) = eval_fn(ms[k].fn, z(0))[1] * (1 - ms[k].a * th(0));
    return h;
  };
  m.G = [ms](const Vector& z, const Vector&) {
    Matrix G(ms.size(), 1);
    for (std::size_t k = 0; k < ms.size(); ++k) G(k, 0) = -ms[k].a * eval_fn(ms[k].fn, z(0))[0] - ms[k].c;
    return G;
  };
  m.hess_zz = [ms](const Vector& z, const Vector& th, const Vector& l) {
    double s = 0;
    for (std::size_t k = 0; k < ms.size(); ++k) s += l(k) * eval_fn(ms[k].fn, z(0))[2] * (1 - ms[k].a * th(0));
    return Matrix::Constant(1, 1, s);
  };
  m.hess_ztheta = [ms](const Vector& z, const Vector&, const Vector& l) {
    double s = 0;
    for (std::size_t k = 0; k < ms.size(); ++k) s -= l(k) * ms[k].a * eval_fn(ms[k].fn, z(0))[1];
    return Matrix::Constant(1, 1, s);
  };
  m.hess_thetatheta = [](const Vector&, const Vector&, const Vector&) { return Matrix::Zero(1, 1); };
  m.g_and_H = [ms](const Vector& z, const Vector& th, Vector& g, Matrix& H) {
    for (std::size_t k = 0; k < ms.size(); ++k) {
      const auto f = eval_fn(ms[k].fn, z(0));
      g(k) = f[0] * (1 - ms[k].a * th(0)) - ms[k].c * th(0);
      H(k, 0) = f[1] * (1 - ms[k].a * th(0));
    }
  };
  return m;
}

MomentModel exponential_sq_model() {
  MomentModel m;
  m.name = "exponential_sq";
  m.d_g = 2;
  m.d_x = 1;
  m.d_theta = 1;
  m.g = [](const Vector& z, const Vector& th) {
    return Vector((Vector(2) << z(0) - th(0), z(0) * z(0) - 2 * th(0) * th(0)).finished());
  };
  m.H = [](const Vector& z, const Vector&) { return Matrix((Matrix(2, 1) << 1, 2 * z(0)).finished()); };
  m.G = [](const Vector&, const Vector& th) { return Matrix((Matrix(2, 1) << -1, -4 * th(0)).finished()); };
  m.hess_zz = [](const Vector&, const Vector&, const Vector& l) { return Matrix::Constant(1, 1, 2 * l(1)); };
  m.hess_ztheta = [](const Vector&, const Vector&, const Vector&) { return Matrix::Zero(1, 1); };
  m.hess_thetatheta = [](const Vector&, const Vector&, const Vector& l) {
    return Matrix::Constant(1, 1, -4 * l(1));
  };
  m.g_and_H = [](const Vector& z, const Vector& th, Vector& g, Matrix& H) {
    g(0) = z(0) - th(0);
    g(1) = z(0) * z(0) - 2 * th(0) * th(0);
    H(0, 0) = 1;
    H(1, 0) = 2 * z(0);
  };
  return m;
}

}  // namespace

MomentModel dgp_model(DgpId id, const std::optional<DgpAnchors>& anchors) {
  constexpr double k = 2.0 / 3.0;
  const ScalarMoment mean{Fn::kIdentity, 0, 1};
  auto shaped = [&](Fn fn, double kappa) {
    return anchors ? ScalarMoment{fn, 0, k * kappa} : ScalarMoment{fn, k, 0};
  };
  const std::string suffix = anchors ? "" : "[factorized]";
  switch (id) {
    case DgpId::kNormalExp:
      return scalar_model("normal_exp" + suffix,
                          {mean, shaped(Fn::kExp, anchors ? anchors->exp_mean : 0)});
    case DgpId::kNormalLogistic:
      return scalar_model("normal_logistic" + suffix,
                          {mean, shaped(Fn::kLogistic, anchors ? anchors->logistic_mean : 0)});
    case DgpId::kExpLogistic:
      return scalar_model("exp_logistic" + suffix,
                          {shaped(Fn::kExp, anchors ? anchors->exp_mean : 0),
                           shaped(Fn::kLogistic, anchors ? anchors->logistic_mean : 0)});
    case DgpId::kExponentialSq:
      return exponential_sq_model();
  }
  throw Error(ErrorKind::kConfig, "unknown dgp id");
}

// ---------------------------------------------------------------------------

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t master, const DgpSpec& spec, std::uint64_t replication) {
  const std::uint64_t dgp_index = static_cast<std::uint64_t>(spec.id) * 4 + static_cast<std::uint64_t>(spec.latent);
  std::uint64_t h = splitmix64(master);
  h = splitmix64(h ^ dgp_index);
  h = splitmix64(h ^ static_cast<std::uint64_t>(spec.n));
  return splitmix64(h ^ replication);
}

double DgpRng::uniform() {
  // 53 random bits at cell midpoints, so never 0 or 1.
  return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
}

double normal_quantile(double p) {
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                             1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                             6.680131188771972e+01,  -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                             -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                             3.754408661907416e+00};
  if (!(p > 0 && p < 1)) throw Error(ErrorKind::kDomain, "normal_quantile needs p in (0, 1)");
  constexpr double lo = 0.02425;
  if (p < lo) {
    const double q = std::sqrt(-2 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  if (p > 1 - lo) {
    const double q = std::sqrt(-2 * std::log1p(-p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  const double q = p - 0.5;
  const double r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
}

double DgpRng::normal() { return normal_quantile(uniform()); }

double DgpRng::exponential(double rate) { return -std::log1p(-uniform()) / rate; }

int DgpRng::binomial(int trials, double p) {
  int k = 0;
  for (int t = 0; t < trials; ++t) k += uniform() < p ? 1 : 0;
  return k;
}

Dataset sample_dgp(const DgpSpec& spec, DgpRng& rng) {
  spec.validate();
  Matrix x(spec.n, 1);
  // Latent draws first, then errors: the latent sample is the same for every sigma.
  for (Index i = 0; i < spec.n; ++i) {
    switch (spec.latent) {
      case Latent::kNormal: x(i, 0) = kTheta0 + std::sqrt(2.0) * rng.normal(); break;
      case Latent::kUniform: x(i, 0) = 1 + rng.uniform(); break;
      case Latent::kBinomial: x(i, 0) = rng.binomial(5, 0.3); break;
      case Latent::kExponential: x(i, 0) = rng.exponential(2.0 / 3.0); break;
    }
  }
  for (Index i = 0; i < spec.n; ++i) {
    const double e = rng.normal();
    x(i, 0) += spec.sigma * e;
  }
  return make_dataset(std::move(x), {"x"});
}

// ---------------------------------------------------------------------------

void StudyConfig::validate() const {
  if (grid.empty()) throw Error(ErrorKind::kConfig, "study grid is empty");
  for (const DgpSpec& s : grid) s.validate();
  if (estimators.empty()) throw Error(ErrorKind::kConfig, "no estimators selected");
  for (Method m : estimators) {
    if (m == Method::kOtgmmJointFoc) throw Error(ErrorKind::kConfig, "otgmm_joint_foc is not a study arm");
  }
  if (replications < 1) throw Error(ErrorKind::kConfig, "replications must be at least 1");
  if (parallel_workers < 1) throw Error(ErrorKind::kConfig, "parallel_workers must be at least 1");
  if (!(test_level > 0 && test_level < 1)) throw Error(ErrorKind::kConfig, "test level must lie in (0, 1)");
  estimator.solver.validate();
}

std::vector<DgpSpec> default_grid(DgpId id, Index n) {
  std::vector<Latent> laws;
  if (id == DgpId::kExponentialSq) {
    laws = {Latent::kExponential};
  } else {
    laws = {Latent::kNormal, Latent::kUniform, Latent::kBinomial};
  }
  std::vector<DgpSpec> grid;
  for (Latent l : laws) {
    for (double s : {0.0, 0.5, 1.0, 1.5, 2.0, 2.5}) grid.push_back({id, l, s, n});
  }
  return grid;
}

const StudyCell* StudyReport::find(DgpId id, Latent latent, double sigma, Method method) const {
  for (const StudyCell& c : cells) {
    if (c.spec.id == id && c.spec.latent == latent && c.spec.sigma == sigma && c.method == method) return &c;
  }
  return nullptr;
}

ReplicationResult run_replication(const StudyConfig& config, const DgpSpec& spec, Method method,
                                  int replication) {
  ReplicationResult r;
  DgpRng rng(stream_seed(config.master_seed, spec, static_cast<std::uint64_t>(replication)));
  const Dataset data = sample_dgp(spec, rng);
  std::optional<DgpAnchors> anchors;
  if (config.form == DgpForm::kObservedAnchor) anchors = observed_anchors(data);
  if (config.form == DgpForm::kPopulationAnchor) anchors = population_anchors(spec.latent);
  const MomentModel model = dgp_model(spec.id, anchors);
  const Vector theta_init = Vector::Constant(1, data.values.col(0).mean());

  EstimatorOptions opts = config.estimator;
  opts.error_test = opts.error_test && method == Method::kOtgmm;
  try {
    const EstimateResult e = estimate(method, model, data, theta_init, nullptr, opts);
    r.theta = e.theta_hat(0);
    r.se = opts.covariance_enabled ? e.se(0) : std::numeric_limits<double>::quiet_NaN();
    if (e.test) {
      r.has_test = true;
      r.pvalue = e.test->pvalue;
    }
    r.ok = std::isfinite(r.theta);
    if (!r.ok) r.error = "non-finite estimate";
  } catch (const std::exception& ex) {
    r.error = ex.what();
  }
  return r;
}

StudyReport run_study(const StudyConfig& config) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t n_cells = config.grid.size() * config.estimators.size();
  const std::size_t reps = static_cast<std::size_t>(config.replications);
  const std::size_t n_tasks = n_cells * reps;
  std::vector<ReplicationResult> results(n_tasks);

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t t = next.fetch_add(1); t < n_tasks; t = next.fetch_add(1)) {
      const std::size_t cell = t / reps;
      const std::size_t rep = t % reps;
      const DgpSpec& spec = config.grid[cell / config.estimators.size()];
      const Method m = config.estimators[cell % config.estimators.size()];
      results[t] = run_replication(config, spec, m, static_cast<int>(rep));
    }
  };
  const int workers = static_cast<int>(std::min<std::size_t>(config.parallel_workers, n_tasks));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  StudyReport report;
  report.seed = config.master_seed;
  report.replications = config.replications;
  report.form = config.form;
  const double z975 = 1.959963984540054;
  for (std::size_t cell = 0; cell < n_cells; ++cell) {
    StudyCell c;
    c.spec = config.grid[cell / config.estimators.size()];
    c.method = config.estimators[cell % config.estimators.size()];
    c.replications = config.replications;
    double sum = 0;
    int ok = 0;
    int covered = 0;
    int with_se = 0;
    int tested = 0;
    int rejected = 0;
    for (std::size_t rep = 0; rep < reps; ++rep) {
      const ReplicationResult& r = results[cell * reps + rep];
      if (!r.ok) {
        ++c.failures;
        if (c.failure_messages.size() < 5) c.failure_messages.push_back(r.error);
        continue;
      }
      ++ok;
      sum += r.theta;
      if (std::isfinite(r.se)) {
        ++with_se;
        covered += std::abs(r.theta - kTheta0) <= z975 * r.se ? 1 : 0;
      }
      if (r.has_test) {
        ++tested;
        rejected += r.pvalue < config.test_level ? 1 : 0;
      }
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (ok > 0) {
      c.mean = sum / ok;
      double ss = 0;
      double se2 = 0;
      for (std::size_t rep = 0; rep < reps; ++rep) {
        const ReplicationResult& r = results[cell * reps + rep];
        if (!r.ok) continue;
        ss += (r.theta - c.mean) * (r.theta - c.mean);
        se2 += (r.theta - kTheta0) * (r.theta - kTheta0);
      }
      c.bias = c.mean - kTheta0;
      c.sd = std::sqrt(ss / ok);
      c.rmse = std::sqrt(se2 / ok);
    } else {
      c.mean = c.bias = c.sd = c.rmse = nan;
    }
    c.coverage = with_se > 0 ? static_cast<double>(covered) / with_se : nan;
    c.rejection_rate = tested > 0 ? static_cast<double>(rejected) / tested : nan;
    report.cells.push_back(std::move(c));
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string fmt_sigma(double s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", s);
  return buf;
}

}  // namespace

std::string report_csv(const StudyReport& report) {
  std::ostringstream os;
  os << "dgp,latent,sigma,n,estimator,replications,failures,mean,bias,sd,rmse,coverage,rejection_rate\n";
  for (const StudyCell& c : report.cells) {
    os << to_string(c.spec.id) << ',' << to_string(c.spec.latent) << ',' << fmt_sigma(c.spec.sigma) << ','
       << c.spec.n << ',' << to_string(c.method) << ',' << c.replications << ',' << c.failures << ','
       << fmt(c.mean) << ',' << fmt(c.bias) << ',' << fmt(c.sd) << ',' << fmt(c.rmse) << ','
       << fmt(c.coverage) << ',' << fmt(c.rejection_rate) << '\n';
  }
  return os.str();
}

std::string report_tables_csv(const StudyReport& report) {
  // Distinct values in first-seen order.
  std::vector<double> sigmas;
  std::vector<Method> methods;
  std::vector<std::pair<DgpId, Latent>> rows;
  for (const StudyCell& c : report.cells) {
    if (std::find(sigmas.begin(), sigmas.end(), c.spec.sigma) == sigmas.end()) sigmas.push_back(c.spec.sigma);
    if (std::find(methods.begin(), methods.end(), c.method) == methods.end()) methods.push_back(c.method);
    const auto key = std::make_pair(c.spec.id, c.spec.latent);
    if (std::find(rows.begin(), rows.end(), key) == rows.end()) rows.push_back(key);
  }
  std::ostringstream os;
  os << "statistic,dgp,latent";
  for (Method m : methods) {
    for (double s : sigmas) os << ',' << to_string(m) << ':' << fmt_sigma(s);
  }
  os << '\n';
  for (const char* stat : {"bias", "sd", "rmse"}) {
    for (const auto& [id, latent] : rows) {
      os << stat << ',' << to_string(id) << ',' << to_string(latent);
      for (Method m : methods) {
        for (double s : sigmas) {
          os << ',';
          const StudyCell* c = nullptr;
          for (const StudyCell& cc : report.cells) {
            if (cc.spec.id == id && cc.spec.latent == latent && cc.spec.sigma == s && cc.method == m) c = &cc;
          }
          if (!c) continue;
          const std::string st = stat;
          os << fmt(st == "bias" ? c->bias : st == "sd" ? c->sd : c->rmse);
        }
      }
      os << '\n';
    }
  }
  return os.str();
}

std::string report_json(const StudyReport& report) {
  using nlohmann::json;
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  json cells = json::array();
  for (const StudyCell& c : report.cells) {
    cells.push_back({{"dgp", to_string(c.spec.id)},
                     {"latent", to_string(c.spec.latent)},
                     {"sigma", c.spec.sigma},
                     {"n", c.spec.n},
                     {"estimator", to_string(c.method)},
                     {"replications", c.replications},
                     {"failures", c.failures},
                     {"failure_examples", c.failure_messages},
                     {"mean", num(c.mean)},
                     {"bias", num(c.bias)},
                     {"sd", num(c.sd)},
                     {"rmse", num(c.rmse)},
                     {"coverage", num(c.coverage)},
                     {"rejection_rate", num(c.rejection_rate)}});
  }
  json j = {{"seed", report.seed},
            {"replications", report.replications},
            {"form", to_string(report.form)},
            {"sd_denominator", "replications (population convention; rmse^2 = bias^2 + sd^2)"},
            {"cells", cells}};
  return j.dump(2) + "\n";
}

}  // namespace otgmm
