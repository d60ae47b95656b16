#include "otgmm/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "otgmm/errors.hpp"

namespace otgmm {

using nlohmann::json;
namespace fs = std::filesystem;

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return kExitConfig;
    case ErrorKind::kData:
    case ErrorKind::kDomain: return kExitData;
    case ErrorKind::kSingular:
    case ErrorKind::kNoRoot:
    case ErrorKind::kSolver: return kExitSolver;
  }
  return kExitSolver;
}

std::string error_header(int code, const std::string& kind, const std::string& message) {
  std::string m;
  for (char c : message) {
    if (c == '\n' || c == '\r') {
      m += ' ';
    } else if (c == '"') {
      m += "\\\"";
    } else {
      m += c;
    }
  }
  return "otgmm-error code=" + std::to_string(code) + " kind=" + kind + " message=\"" + m + "\"";
}

namespace {

[[noreturn]] void config_error(const std::string& what) { throw Error(ErrorKind::kConfig, what); }

void reject_unknown_keys(const json& obj, const std::set<std::string>& known, const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!known.count(it.key())) config_error("unknown key '" + it.key() + "' in " + where);
  }
}

template <class T>
void read(const json& obj, const char* key, T& out) {
  if (obj.contains(key) && !obj.at(key).is_null()) out = obj.at(key).get<T>();
}

void read_solver(const json& j, SolverOptions& s) {
  reject_unknown_keys(j, {"eps_z", "eps_lambda", "max_iter", "damping", "adaptive_damping", "damping_floor", "ridge"},
                      "solver");
  read(j, "eps_z", s.eps_z);
  read(j, "eps_lambda", s.eps_lambda);
  read(j, "max_iter", s.max_iter);
  read(j, "damping", s.damping);
  read(j, "adaptive_damping", s.adaptive_damping);
  read(j, "damping_floor", s.damping_floor);
  read(j, "ridge", s.ridge);
}

CovarianceKind parse_covariance(const std::string& s) {
  if (s == "small_error") return CovarianceKind::kSmallError;
  if (s == "small_error_zhat") return CovarianceKind::kSmallErrorAtZhat;
  if (s == "large_error") return CovarianceKind::kLargeError;
  config_error("unknown covariance '" + s + "' (small_error, small_error_zhat, large_error)");
}

bool is_otgmm_method(Method m) { return m == Method::kOtgmm || m == Method::kOtgmmJointFoc; }

void write_file(const fs::path& path, const std::string& text, CommandOutput& out) {
  std::ofstream f(path, std::ios::binary);
  if (!f) config_error("cannot write " + path.string());
  f << text;
  if (!f) config_error("failed writing " + path.string());
  out.files.push_back(path.string());
}

fs::path prepare_output(const std::string& dir) {
  fs::path p(dir.empty() ? "." : dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) config_error("cannot create output directory " + p.string() + ": " + ec.message());
  return p;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string sci(double v) {
  if (std::isnan(v)) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json vec_json(const Vector& v) {
  json a = json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(num(v(i)));
  return a;
}

json mat_json(const Matrix& m) {
  json a = json::array();
  for (Index i = 0; i < m.rows(); ++i) a.push_back(vec_json(m.row(i).transpose()));
  return a;
}

Dataset load_data(const RunConfig& c) {
  if (c.data_path.empty()) config_error("no data file given (config 'data' or --data)");
  return load_csv(c.data_path);
}

// Evaluator blocks get scaled so the finite-difference audit catches them.
void plant_fault(MomentModel& m, const std::string& block) {
  if (block.empty()) return;
  auto scaled = [](auto f) {
    return [f](auto&&... args) { return Matrix(1.01 * f(args...)); };
  };
  if (block == "H") {
    m.H = scaled(m.H);
  } else if (block == "G") {
    m.G = scaled(m.G);
  } else if (block == "hess_zz") {
    m.hess_zz = scaled(m.hess_zz);
  } else if (block == "hess_ztheta") {
    m.hess_ztheta = scaled(m.hess_ztheta);
  } else if (block == "hess_thetatheta") {
    m.hess_thetatheta = scaled(m.hess_thetatheta);
  } else {
    config_error("unknown fault block '" + block + "'");
  }
}

std::vector<Index> dummy_columns(const Dataset& data) {
  std::vector<Index> out;
  for (Index k = 0; k < data.d_x(); ++k) {
    std::set<double> seen;
    for (Index i = 0; i < data.n() && seen.size() <= 2; ++i) seen.insert(data.values(i, k));
    if (seen.size() <= 2) out.push_back(k);
  }
  return out;
}

void validate_model(const ModelSpec& model) {
  if (model.type != "linear_iv" && model.type != "dgp") {
    config_error("model type must be 'linear_iv' or 'dgp', got '" + model.type + "'");
  }
  if (model.type == "linear_iv") {
    if (model.y.empty()) config_error("linear_iv model needs 'y'");
    if (model.r.empty() && !model.intercept) config_error("linear_iv model needs at least one regressor");
  } else {
    parse_dgp_id(model.dgp);
    parse_latent(model.latent);
    parse_dgp_form(model.form);
  }
}

}  // namespace

void RunConfig::validate() const {
  parse_method(method);
  parse_covariance(covariance);
  solver.validate();
  for (const auto& [col, w] : weights) {
    if (!(w > 0) || !std::isfinite(w)) config_error("weight for '" + col + "' must be positive");
  }
  if (simulate.n < 2) config_error("simulate.n must be at least 2");
  if (simulate.replications < 1) config_error("simulate.replications must be at least 1");
  if (simulate.workers < 1) config_error("simulate.workers must be at least 1");
  for (const auto& d : simulate.dgps) parse_dgp_id(d);
  for (const auto& l : simulate.latents) parse_latent(l);
  for (const auto& e : simulate.estimators) parse_method(e);
  for (double s : simulate.sigmas) {
    if (!(s >= 0) || !std::isfinite(s)) config_error("simulate.sigmas must be non-negative");
  }
  parse_dgp_form(simulate.form);
}

RunConfig parse_run_config(const std::string& json_text) {
  RunConfig c;
  try {
    const json j = json::parse(json_text);
    if (!j.is_object()) config_error("config must be a JSON object");
    reject_unknown_keys(j,
                        {"command", "data", "model", "method", "constraint", "solver", "covariance",
                         "theta_init", "output", "seed", "simulate"},
                        "config");
    read(j, "command", c.command);
    read(j, "data", c.data_path);
    read(j, "method", c.method);
    read(j, "covariance", c.covariance);
    read(j, "output", c.output_path);
    read(j, "seed", c.seed);
    if (j.contains("theta_init")) c.theta_init = j.at("theta_init").get<std::vector<double>>();
    if (j.contains("model")) {
      const json& m = j.at("model");
      reject_unknown_keys(m, {"type", "y", "r", "w", "intercept", "dgp", "latent", "form", "fault"}, "model");
      read(m, "type", c.model.type);
      read(m, "y", c.model.y);
      read(m, "r", c.model.r);
      read(m, "w", c.model.w);
      read(m, "intercept", c.model.intercept);
      read(m, "dgp", c.model.dgp);
      read(m, "latent", c.model.latent);
      read(m, "form", c.model.form);
      read(m, "fault", c.model.fault);
      if (!m.contains("type") && m.contains("dgp")) c.model.type = "dgp";
    }
    if (j.contains("constraint")) {
      const json& k = j.at("constraint");
      reject_unknown_keys(k, {"error_free", "auto_dummies", "weights"}, "constraint");
      read(k, "error_free", c.error_free);
      read(k, "auto_dummies", c.auto_dummies);
      read(k, "weights", c.weights);
    }
    if (j.contains("solver")) read_solver(j.at("solver"), c.solver);
    if (j.contains("simulate")) {
      const json& s = j.at("simulate");
      reject_unknown_keys(s, {"dgps", "latents", "sigmas", "n", "replications", "estimators", "workers", "form"},
                          "simulate");
      read(s, "dgps", c.simulate.dgps);
      read(s, "latents", c.simulate.latents);
      read(s, "sigmas", c.simulate.sigmas);
      read(s, "n", c.simulate.n);
      read(s, "replications", c.simulate.replications);
      read(s, "estimators", c.simulate.estimators);
      read(s, "workers", c.simulate.workers);
      read(s, "form", c.simulate.form);
    }
  } catch (const json::exception& ex) {
    config_error(std::string("invalid config: ") + ex.what());
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) config_error("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

ResolvedModel resolve_model(const RunConfig& config, const Dataset& data) {
  config.validate();
  validate_model(config.model);
  ResolvedModel rm;
  std::vector<Index> fixed;
  if (config.model.type == "linear_iv") {
    LinearIvModel iv = make_linear_iv(data, config.model.y, config.model.r, config.model.w, config.model.intercept);
    rm.model = iv.model;
    rm.data = iv.data;
    rm.coefficient_names = iv.coefficient_names;
    fixed = iv.error_free;
    rm.theta_init = ols_start(iv);
  } else {
    data.validate();
    if (data.d_x() != 1) {
      throw Error(ErrorKind::kData, "dgp models take a single data column, got " + std::to_string(data.d_x()));
    }
    const DgpId id = parse_dgp_id(config.model.dgp);
    std::optional<DgpAnchors> anchors;
    switch (parse_dgp_form(config.model.form)) {
      case DgpForm::kPopulationAnchor: anchors = population_anchors(parse_latent(config.model.latent)); break;
      case DgpForm::kObservedAnchor: anchors = observed_anchors(data); break;
      case DgpForm::kPerObservation: break;
    }
    rm.model = dgp_model(id, anchors);
    rm.data = data;
    rm.coefficient_names = {"theta"};
    rm.theta_init = Vector::Constant(1, data.values.col(0).mean());
  }
  plant_fault(rm.model, config.model.fault);

  for (const auto& col : config.error_free) fixed.push_back(rm.data.column_index(col));
  if (config.auto_dummies) {
    for (Index k : dummy_columns(rm.data)) fixed.push_back(k);
  }
  std::sort(fixed.begin(), fixed.end());
  fixed.erase(std::unique(fixed.begin(), fixed.end()), fixed.end());
  if (static_cast<Index>(fixed.size()) >= rm.data.d_x()) {
    config_error("constraint leaves no coordinate free to transport");
  }

  if (config.theta_init) {
    const auto& t = *config.theta_init;
    if (static_cast<Index>(t.size()) != rm.model.d_theta) {
      config_error("theta_init has length " + std::to_string(t.size()) + ", expected " +
                   std::to_string(rm.model.d_theta));
    }
    rm.theta_init = Eigen::Map<const Vector>(t.data(), static_cast<Index>(t.size()));
  }

  rm.constraint = ErrorConstraint::error_free(rm.data.d_x(), fixed);
  if (!config.weights.empty()) {
    Vector w = Vector::Ones(rm.data.d_x());
    for (const auto& [col, v] : config.weights) w(rm.data.column_index(col)) = v;
    rm.constraint.weights = w;
  }
  rm.constraint.validate(rm.data.d_x());
  projection_matrix(rm.constraint, rm.data.d_x());
  rm.constrained = !fixed.empty() || rm.constraint.weights.has_value();
  for (Index k : fixed) rm.constrained_columns.push_back(rm.data.columns[static_cast<std::size_t>(k)]);
  return rm;
}

CommandOutput cmd_estimate(const RunConfig& config) {
  CommandOutput out;
  const Dataset raw = load_data(config);
  const ResolvedModel rm = resolve_model(config, raw);
  const Method method = parse_method(config.method);

  EstimatorOptions opts;
  opts.solver = config.solver;
  opts.covariance = parse_covariance(config.covariance);
  opts.seed = config.seed;
  const ErrorConstraint* constraint = rm.constrained ? &rm.constraint : nullptr;
  const EstimateResult r = estimate(method, rm.model, rm.data, rm.theta_init, constraint, opts);

  json j;
  j["method"] = to_string(method);
  j["model"] = rm.model.name;
  j["seed"] = config.seed;
  j["n"] = rm.data.n();
  j["d_g"] = rm.model.d_g;
  j["d_theta"] = rm.model.d_theta;
  j["error_free_columns"] = rm.constrained_columns;
  json coefs = json::array();
  for (Index k = 0; k < r.theta_hat.size(); ++k) {
    coefs.push_back({{"name", rm.coefficient_names[static_cast<std::size_t>(k)]},
                     {"estimate", num(r.theta_hat(k))},
                     {"se", num(k < r.se.size() ? r.se(k) : std::nan(""))}});
  }
  j["coefficients"] = coefs;
  j["covariance"] = mat_json(r.cov);

  std::ostringstream t;
  t << "method: " << to_string(method) << "\n";
  t << "model: " << rm.model.name << "  n=" << rm.data.n() << "  d_g=" << rm.model.d_g
    << "  d_theta=" << rm.model.d_theta << "\n\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-20s %14s %14s\n", "coefficient", "estimate", "se");
  t << line;
  for (Index k = 0; k < r.theta_hat.size(); ++k) {
    std::snprintf(line, sizeof line, "%-20s %14s %14s\n", rm.coefficient_names[static_cast<std::size_t>(k)].c_str(),
                  fmt(r.theta_hat(k)).c_str(), fmt(k < r.se.size() ? r.se(k) : std::nan("")).c_str());
    t << line;
  }

  if (is_otgmm_method(method) || method == Method::kLinearizedOtgmm) {
    j["qhat"] = num(r.qhat);
    t << "\nQ_hat: " << fmt(r.qhat) << "\n";
    if (r.lambda_hat) {
      j["lambda_hat"] = vec_json(*r.lambda_hat);
      t << "lambda_hat:";
      for (Index m = 0; m < r.lambda_hat->size(); ++m) t << " " << fmt((*r.lambda_hat)(m));
      t << "\n";
    }
    if (r.test) {
      j["error_absence_test"] = {{"stat", num(r.test->stat)}, {"df", r.test->df}, {"pvalue", num(r.test->pvalue)}};
      t << "error-absence test: stat=" << fmt(r.test->stat) << " df=" << r.test->df
        << " p-value=" << fmt(r.test->pvalue) << "\n";
    }
    if (r.z_hat) {
      json rows = json::array();
      t << "\n";
      std::snprintf(line, sizeof line, "%-20s %14s %14s %14s\n", "column", "sd(z-x)", "sd(x)", "mean(z-x)");
      t << line;
      for (const ColumnErrorSd& c : error_sd_report(*r.z_hat, rm.data)) {
        rows.push_back({{"column", c.name},
                        {"sd_correction", num(c.sd_correction)},
                        {"sd_observed", num(c.sd_observed)},
                        {"mean_correction", num(c.mean_correction)}});
        std::snprintf(line, sizeof line, "%-20s %14s %14s %14s\n", c.name.c_str(), fmt(c.sd_correction).c_str(),
                      fmt(c.sd_observed).c_str(), fmt(c.mean_correction).c_str());
        t << line;
      }
      j["error_sd"] = rows;
    }
  }

  json d;
  d["outer_evaluations"] = r.diagnostics.outer_evaluations;
  d["outer_converged"] = r.diagnostics.outer_converged;
  d["inner_iterations"] = r.diagnostics.inner_iterations;
  d["inner_status"] = to_string(r.diagnostics.inner_status);
  if (r.diagnostics.convergence) {
    const ConvergenceReport& c = *r.diagnostics.convergence;
    d["convergence"] = {{"lambda_norm", num(c.lambda_norm)},
                        {"min_eig_weighting", num(c.min_eig_weighting)},
                        {"spectral_proxy", num(c.spectral_proxy)},
                        {"weighting_near_singular", c.weighting_near_singular},
                        {"contraction_suspect", c.contraction_suspect}};
  }
  d["notes"] = r.diagnostics.notes;
  j["diagnostics"] = d;
  for (const auto& note : r.diagnostics.notes) t << "note: " << note << "\n";

  const fs::path dir = prepare_output(config.output_path);
  write_file(dir / "estimate.json", j.dump(2) + "\n", out);
  write_file(dir / "estimate.txt", t.str(), out);
  out.summary = t.str();
  return out;
}

CommandOutput cmd_simulate(const RunConfig& config) {
  config.validate();
  CommandOutput out;
  const SimulateSpec& s = config.simulate;
  if (s.dgps.empty()) config_error("simulate.dgps is empty");

  StudyConfig sc;
  for (const auto& name : s.dgps) {
    const DgpId id = parse_dgp_id(name);
    std::vector<Latent> laws;
    for (const auto& l : s.latents) {
      const Latent law = parse_latent(l);
      if ((id == DgpId::kExponentialSq) == (law == Latent::kExponential)) laws.push_back(law);
    }
    if (s.latents.empty()) {
      for (const DgpSpec& g : default_grid(id, s.n)) {
        if (std::find(laws.begin(), laws.end(), g.latent) == laws.end()) laws.push_back(g.latent);
      }
    }
    if (laws.empty()) config_error(std::string("no admissible latent law selected for ") + to_string(id));
    for (Latent law : laws) {
      for (double sigma : s.sigmas) sc.grid.push_back({id, law, sigma, s.n});
    }
  }
  sc.estimators.clear();
  for (const auto& e : s.estimators) sc.estimators.push_back(parse_method(e));
  sc.replications = s.replications;
  sc.master_seed = config.seed;
  sc.parallel_workers = s.workers;
  sc.form = parse_dgp_form(s.form);
  sc.estimator.solver = config.solver;
  sc.estimator.covariance = parse_covariance(config.covariance);
  sc.validate();

  const StudyReport report = run_study(sc);

  const fs::path dir = prepare_output(config.output_path);
  write_file(dir / "cells.csv", report_csv(report), out);
  write_file(dir / "tables.csv", report_tables_csv(report), out);
  write_file(dir / "report.json", report_json(report), out);
  json timing = {{"wall_seconds", report.wall_seconds}, {"workers", s.workers}};
  write_file(dir / "timings.json", timing.dump(2) + "\n", out);

  std::ostringstream sum;
  std::vector<std::string> bad;
  for (const StudyCell& c : report.cells) {
    if (c.failures * 5 > c.replications) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s/%s/sigma=%g/%s (%d of %d failed)", to_string(c.spec.id),
                    to_string(c.spec.latent), c.spec.sigma, to_string(c.method), c.failures, c.replications);
      bad.push_back(buf);
    }
  }
  sum << "cells: " << report.cells.size() << "  replications: " << report.replications
      << "  wall seconds: " << fmt(report.wall_seconds) << "\n";
  for (const auto& f : out.files) sum << "wrote " << f << "\n";
  out.summary = sum.str();
  if (!bad.empty()) {
    out.exit_code = kExitSolver;
    std::string msg = "systematic estimator failure in " + std::to_string(bad.size()) + " cell(s): ";
    for (std::size_t i = 0; i < bad.size(); ++i) msg += (i ? "; " : "") + bad[i];
    out.error = msg;
  }
  return out;
}

CommandOutput cmd_check(const RunConfig& config) {
  CommandOutput out;
  Dataset data;
  if (config.model.type == "dgp" && config.data_path.empty()) {
    config.validate();
    validate_model(config.model);
    DgpSpec spec{parse_dgp_id(config.model.dgp), parse_latent(config.model.latent), 0.5, 50};
    spec.validate();
    DgpRng rng(stream_seed(config.seed, spec, 0));
    data = sample_dgp(spec, rng);
  } else {
    data = load_data(config);
  }
  const ResolvedModel rm = resolve_model(config, data);
  const MomentModel& model = rm.model;
  model.require_complete();

  struct Check {
    std::string name;
    bool pass;
    std::string detail;
    double value;
  };
  std::vector<Check> checks;
  std::mt19937_64 eng(config.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto noise = [&](Index k, double scale) {
    Vector v(k);
    for (Index i = 0; i < k; ++i) v(i) = scale * nd(eng);
    return v;
  };
  const double theta_scale = 0.1 * (1.0 + rm.theta_init.norm());

  std::vector<DerivativePoint> points;
  for (int p = 0; p < 50; ++p) {
    const Index row = p % rm.data.n();
    points.push_back({rm.data.row(row) + noise(model.d_x, 0.1), rm.theta_init + noise(model.d_theta, theta_scale),
                      noise(model.d_g, 0.3)});
  }
  constexpr double kDerivTol = 1e-4;
  const DerivativeReport dr = check_derivatives(model, points, kDerivTol);
  const std::pair<const char*, double> blocks[] = {{"H", dr.err_H},
                                                   {"G", dr.err_G},
                                                   {"hess_zz", dr.err_hess_zz},
                                                   {"hess_ztheta", dr.err_hess_ztheta},
                                                   {"hess_thetatheta", dr.err_hess_thetatheta}};
  for (const auto& [name, err] : blocks) {
    checks.push_back({std::string("derivatives:") + name, err < kDerivTol, "max relative error", err});
  }

  const Matrix* P = nullptr;
  Matrix proj;
  if (rm.constrained) {
    proj = projection_matrix(rm.constraint, model.d_x);
    P = &proj;
  }
  double dq_err = 0;
  std::string dq_detail = "max relative error";
  try {
    for (int p = 0; p < 5; ++p) {
      const Vector x = points[static_cast<std::size_t>(p)].z;
      const Vector th = points[static_cast<std::size_t>(p)].theta;
      // Halve lambda until the map has a root at x (it need not for large lambda).
      Vector lam = 0.1 * points[static_cast<std::size_t>(p)].lambda;
      for (int k = 0; k < 40; ++k) {
        try {
          q_map(model, x, th, lam, {}, P);
          break;
        } catch (const Error& ex) {
          if (ex.kind() != ErrorKind::kNoRoot) throw;
          lam *= 0.5;
        }
      }
      const Matrix a_l = dq_dlambda(model, x, th, lam, P);
      const Matrix a_t = dq_dtheta(model, x, th, lam, P);
      const Matrix f_l = fd_jacobian([&](const Vector& l) { return q_map(model, x, th, l, {}, P); }, lam);
      const Matrix f_t = fd_jacobian([&](const Vector& t) { return q_map(model, x, t, lam, {}, P); }, th);
      dq_err = std::max({dq_err, relative_error(a_l, f_l), relative_error(a_t, f_t)});
    }
  } catch (const Error& ex) {
    dq_err = std::nan("");
    dq_detail = ex.what();
  }
  checks.push_back({"derivatives:transport_map", dq_err < kDerivTol, dq_detail, dq_err});

  {
    const Index m = std::min<Index>(rm.data.n(), 12);
    Dataset small = rm.data;
    small.values = rm.data.values.topRows(m);
    const InnerSolution fast = inner_solve(model, small, rm.theta_init, config.solver);
    const InnerSolution slow = oracle_inner_solve(model, small, rm.theta_init, m);
    double dz = std::nan("");
    bool pass = false;
    std::string detail = "Q_hat " + fmt(fast.qhat) + " vs oracle " + fmt(slow.qhat) + ", max |dz|";
    if (fast.converged() && slow.converged()) {
      dz = (fast.z - slow.z).cwiseAbs().maxCoeff();
      pass = std::abs(fast.qhat - slow.qhat) <= 1e-5 * (1 + std::abs(slow.qhat)) && dz <= 1e-4;
    } else {
      detail = std::string("solver status ") + to_string(fast.status) + ", oracle " + to_string(slow.status);
    }
    checks.push_back({"oracle_equivalence", pass, detail, dz});
  }

  json spectral;
  {
    const ErrorConstraint* constraint = rm.constrained ? &rm.constraint : nullptr;
    const InnerSolution sol = inner_solve(model, rm.data, rm.theta_init, config.solver, constraint);
    bool pass = sol.converged();
    std::string detail = std::string("inner solver ") + to_string(sol.status);
    double proxy = std::nan("");
    if (sol.converged()) {
      const ConvergenceReport c = convergence_diagnostic(model, rm.data, sol, rm.theta_init);
      proxy = c.spectral_proxy;
      pass = !c.weighting_near_singular;
      detail += c.weighting_near_singular ? ", weighting near singular" : ", weighting well conditioned";
      if (c.contraction_suspect) detail += " (advisory: spectral proxy >= 1)";
      spectral = {{"lambda_norm", num(c.lambda_norm)},
                  {"min_eig_weighting", num(c.min_eig_weighting)},
                  {"spectral_proxy", num(c.spectral_proxy)},
                  {"contraction_suspect", c.contraction_suspect}};
    }
    checks.push_back({"spectral", pass, detail, proxy});
  }

  json j;
  j["model"] = model.name;
  j["seed"] = config.seed;
  json arr = json::array();
  std::ostringstream t;
  std::vector<std::string> failed;
  for (const Check& c : checks) {
    arr.push_back({{"name", c.name}, {"pass", c.pass}, {"value", num(c.value)}, {"detail", c.detail}});
    t << (c.pass ? "PASS " : "FAIL ") << c.name << "  " << c.detail << " = " << sci(c.value) << "\n";
    if (!c.pass) failed.push_back(c.name);
  }
  j["checks"] = arr;
  if (!spectral.is_null()) j["spectral"] = spectral;

  const fs::path dir = prepare_output(config.output_path);
  write_file(dir / "check.json", j.dump(2) + "\n", out);
  out.summary = t.str();
  if (!failed.empty()) {
    out.exit_code = kExitCheck;
    std::string msg = "failed checks:";
    for (const auto& f : failed) msg += " " + f;
    out.error = msg;
  }
  return out;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"OTGMM estimation, simulation and model checks"};
  app.require_subcommand(1);

  std::string config_path;
  std::string data_path;
  std::string method;
  std::string out_dir;
  std::uint64_t seed = 0;
  int workers = 0;
  int replications = 0;

  auto* est = app.add_subcommand("estimate", "estimate a model on a CSV dataset");
  est->add_option("--config", config_path, "JSON run configuration")->required();
  est->add_option("--data", data_path, "CSV data file");
  est->add_option("--method", method, "linearized_otgmm | otgmm | otgmm_joint_foc | efficient_gmm");
  est->add_option("--out", out_dir, "output directory");
  est->add_option("--seed", seed, "random seed");

  auto* sim = app.add_subcommand("simulate", "run a Monte Carlo study");
  sim->add_option("--config", config_path, "JSON run configuration")->required();
  sim->add_option("--out", out_dir, "output directory");
  sim->add_option("--seed", seed, "master seed");
  sim->add_option("--workers", workers, "worker threads");
  sim->add_option("--replications", replications, "replications per cell");

  auto* chk = app.add_subcommand("check", "audit derivatives, solver and diagnostics");
  chk->add_option("--config", config_path, "JSON run configuration")->required();
  chk->add_option("--data", data_path, "CSV data file");
  chk->add_option("--out", out_dir, "output directory");
  chk->add_option("--seed", seed, "random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << error_header(kExitConfig, "config_error", e.what()) << "\n";
    return kExitConfig;
  }

  try {
    RunConfig config = load_run_config(config_path);
    CLI::App* sub = app.get_subcommands().front();
    config.command = sub->get_name();
    auto given = [sub](const char* flag) {
      const CLI::Option* o = sub->get_option_no_throw(flag);
      return o != nullptr && o->count() > 0;
    };
    if (given("--data")) config.data_path = data_path;
    if (given("--method")) config.method = method;
    if (given("--out")) config.output_path = out_dir;
    if (given("--seed")) config.seed = seed;
    if (given("--workers")) config.simulate.workers = workers;
    if (given("--replications")) config.simulate.replications = replications;

    CommandOutput result;
    if (config.command == "estimate") {
      result = cmd_estimate(config);
    } else if (config.command == "simulate") {
      result = cmd_simulate(config);
    } else {
      result = cmd_check(config);
    }
    std::cout << result.summary;
    if (result.exit_code != kExitOk) {
      const char* kind = result.exit_code == kExitCheck ? "check_failed" : "solver_failure";
      std::cerr << error_header(result.exit_code, kind, result.error) << "\n";
    }
    return result.exit_code;
  } catch (const Error& ex) {
    const int code = exit_code_for(ex.kind());
    std::cerr << error_header(code, to_string(ex.kind()), ex.what()) << "\n";
    return code;
  } catch (const std::exception& ex) {
    std::cerr << error_header(kExitSolver, "internal", ex.what()) << "\n";
    return kExitSolver;
  }
}

}  // namespace otgmm
