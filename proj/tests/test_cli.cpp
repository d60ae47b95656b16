#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <regex>
#include <sstream>

#include <json.hpp>

#include "fixtures.hpp"
#include "otgmm/cli.hpp"

using namespace otgmm;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = fs::temp_directory_path() / ("otgmm_cli_" + tag + "_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const std::string& path, const std::string& text) { std::ofstream(path, std::ios::binary) << text; }

void write_csv(const std::string& path, const Dataset& d) {
  std::ofstream out(path);
  out.precision(17);
  for (std::size_t k = 0; k < d.columns.size(); ++k) out << (k ? "," : "") << d.columns[k];
  out << "\n";
  for (Index i = 0; i < d.n(); ++i) {
    for (Index k = 0; k < d.d_x(); ++k) out << (k ? "," : "") << d.values(i, k);
    out << "\n";
  }
}

json iv_config(const std::string& data, const std::string& out) {
  return {{"data", data},
          {"output", out},
          {"model", {{"type", "linear_iv"}, {"y", "y"}, {"r", {"r"}}, {"w", {"w1", "w2"}}, {"intercept", true}}}};
}

struct Run {
  int code;
  std::string err;
};

Run run(const std::vector<std::string>& args) {
  std::vector<std::string> storage{"otgmm"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());
  std::ostringstream err;
  std::ostringstream out;
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  const int code = run_cli(static_cast<int>(argv.size()), argv.data());
  std::cerr.rdbuf(old_err);
  std::cout.rdbuf(old_out);
  return {code, err.str()};
}

double coef(const json& j, const std::string& name, const char* field) {
  for (const auto& c : j.at("coefficients")) {
    if (c.at("name") == name) return c.at(field).get<double>();
  }
  FAIL("no coefficient " << name);
  return 0;
}

}  // namespace

TEST_CASE("config parsing") {
  const RunConfig c = parse_run_config(R"({
    "command": "estimate", "data": "d.csv", "method": "efficient_gmm", "seed": 9,
    "model": {"y": "y", "r": ["r"], "w": ["w1", "w2"], "intercept": false},
    "constraint": {"error_free": ["w1"], "auto_dummies": true, "weights": {"r": 2.0}},
    "solver": {"eps_z": 1e-11, "max_iter": 77},
    "covariance": "large_error", "theta_init": [0.1]
  })");
  CHECK(c.data_path == "d.csv");
  CHECK(c.method == "efficient_gmm");
  CHECK(c.seed == 9);
  CHECK(c.model.type == "linear_iv");
  CHECK(c.model.r == std::vector<std::string>{"r"});
  CHECK_FALSE(c.model.intercept);
  CHECK(c.error_free == std::vector<std::string>{"w1"});
  CHECK(c.auto_dummies);
  CHECK(c.weights.at("r") == 2.0);
  CHECK(c.solver.eps_z == 1e-11);
  CHECK(c.solver.max_iter == 77);
  CHECK(c.covariance == "large_error");
  REQUIRE(c.theta_init);
  CHECK((*c.theta_init)[0] == 0.1);

  const RunConfig s = parse_run_config(R"({"simulate": {"dgps": ["normal_exp"], "replications": 5, "workers": 3}})");
  CHECK(s.simulate.dgps == std::vector<std::string>{"normal_exp"});
  CHECK(s.simulate.replications == 5);
  CHECK(s.simulate.workers == 3);
  CHECK(s.simulate.sigmas.size() == 6);
}

TEST_CASE("config errors") {
  auto config_kind = [](const std::string& text) {
    try {
      parse_run_config(text).validate();
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::kSolver;
  };
  CHECK(config_kind(R"({"dat": "x.csv"})") == ErrorKind::kConfig);
  CHECK(config_kind(R"({"model": {"y": "y", "instruments": []}})") == ErrorKind::kConfig);
  CHECK(config_kind(R"({"solver": {"eps": 1}})") == ErrorKind::kConfig);
  CHECK(config_kind(R"({"method": "gel"})") == ErrorKind::kConfig);
  CHECK(config_kind(R"({"covariance": "huge"})") == ErrorKind::kConfig);
  CHECK(config_kind(R"({"seed": "one"})") == ErrorKind::kConfig);
  CHECK(config_kind("[1, 2]") == ErrorKind::kConfig);
  CHECK(config_kind("{not json") == ErrorKind::kConfig);
  CHECK(config_kind(R"({"simulate": {"dgps": ["s99"]}})") == ErrorKind::kConfig);
}

TEST_CASE("exit codes and error header") {
  CHECK(exit_code_for(ErrorKind::kConfig) == 2);
  CHECK(exit_code_for(ErrorKind::kData) == 3);
  CHECK(exit_code_for(ErrorKind::kDomain) == 3);
  CHECK(exit_code_for(ErrorKind::kSingular) == 4);
  CHECK(exit_code_for(ErrorKind::kNoRoot) == 4);
  CHECK(exit_code_for(ErrorKind::kSolver) == 4);
  const std::string h = error_header(3, "data_error", "bad \"row\" 4");
  CHECK(h.find('\n') == std::string::npos);
  CHECK(std::regex_match(h, std::regex(R"(otgmm-error code=3 kind=data_error message=".*")")));

  TempDir dir("codes");
  const std::regex header(R"(otgmm-error code=(\d) kind=[a-z_]+ message=".*"\n)");
  std::smatch m;

  Run r = run({"estimate", "--config", dir.file("missing.json")});
  CHECK(r.code == 2);
  CHECK(std::regex_match(r.err, m, header));
  CHECK(m[1] == "2");

  r = run({"estimate"});
  CHECK(r.code == 2);
  CHECK(std::regex_match(r.err, header));

  spit(dir.file("bad.json"), R"({"unknown": 1})");
  CHECK(run({"estimate", "--config", dir.file("bad.json")}).code == 2);

  spit(dir.file("nodata.json"), iv_config(dir.file("none.csv"), dir.file("out")).dump());
  r = run({"estimate", "--config", dir.file("nodata.json")});
  CHECK(r.code == 3);
  CHECK(std::regex_match(r.err, m, header));
  CHECK(m[1] == "3");

  spit(dir.file("short.csv"), "y,r,w1,w2\n1,2,3\n");
  r = run({"estimate", "--config", dir.file("nodata.json"), "--data", dir.file("short.csv")});
  CHECK(r.code == 3);

  // Duplicate instrument: singular weighting.
  DgpRng rng(60);
  write_csv(dir.file("iv.csv"), fixtures::iv_data(rng, 80));
  json dup = iv_config(dir.file("iv.csv"), dir.file("out"));
  dup["model"]["w"] = {"w1", "w1"};
  dup["model"]["intercept"] = false;
  spit(dir.file("dup.json"), dup.dump());
  r = run({"estimate", "--config", dir.file("dup.json")});
  CHECK(r.code == 4);
  CHECK(std::regex_match(r.err, header));
}

TEST_CASE("estimate recovers the fixture coefficients") {
  TempDir dir("fixture");
  int accepted = 0;
  int covered = 0;
  const int seeds = 20;
  for (int s = 0; s < seeds; ++s) {
    DgpRng rng(1000 + static_cast<std::uint64_t>(s));
    write_csv(dir.file("iv.csv"), fixtures::iv_data(rng, 500));
    RunConfig c = parse_run_config(iv_config(dir.file("iv.csv"), dir.file("out")).dump());
    const CommandOutput o = cmd_estimate(c);
    REQUIRE(o.exit_code == 0);
    const json j = json::parse(slurp(dir.file("out/estimate.json")));
    const double b = coef(j, "r", "estimate");
    const double a = coef(j, "(intercept)", "estimate");
    if (std::abs(b - 0.5) <= 3 * coef(j, "r", "se") && std::abs(a - 1.0) <= 3 * coef(j, "(intercept)", "se")) {
      ++covered;
    }
    if (j.at("error_absence_test").at("pvalue").get<double>() > 0.05) ++accepted;
    CHECK(j.at("error_absence_test").at("df") == 1);
  }
  CHECK(covered >= 19);
  CHECK(accepted >= 18);
}

TEST_CASE("estimate outputs") {
  TempDir dir("outputs");
  DgpRng rng(61);
  Dataset d = fixtures::iv_data(rng, 200, true);
  Matrix v(d.n(), 5);
  v << d.values, Vector::NullaryExpr(d.n(), [&](Index i) { return static_cast<double>(i % 2); });
  d = make_dataset(v, {"y", "r", "w1", "w2", "dummy"});
  write_csv(dir.file("iv.csv"), d);

  SUBCASE("just identified equals the method of moments") {
    json cfg = iv_config(dir.file("iv.csv"), dir.file("out"));
    cfg["model"]["w"] = {"w1"};
    RunConfig c = parse_run_config(cfg.dump());
    REQUIRE(cmd_estimate(c).exit_code == 0);
    const json j = json::parse(slurp(dir.file("out/estimate.json")));
    const LinearIvModel iv = make_linear_iv(d, "y", {"r"}, {"w1"}, true);
    const Vector mom = iv_method_of_moments(iv);
    CHECK(coef(j, "r", "estimate") == doctest::Approx(mom(0)).epsilon(1e-7));
    CHECK(coef(j, "(intercept)", "estimate") == doctest::Approx(mom(1)).epsilon(1e-7));
    CHECK(j.at("qhat").get<double>() <= 1e-10);
  }

  SUBCASE("constrained columns have no correction") {
    json cfg = iv_config(dir.file("iv.csv"), dir.file("out"));
    cfg["model"]["w"] = {"w1", "w2", "dummy"};
    cfg["constraint"] = {{"error_free", {"w2"}}, {"auto_dummies", true}};
    RunConfig c = parse_run_config(cfg.dump());
    REQUIRE(cmd_estimate(c).exit_code == 0);
    const json j = json::parse(slurp(dir.file("out/estimate.json")));
    const auto cols = j.at("error_free_columns").get<std::vector<std::string>>();
    CHECK(std::find(cols.begin(), cols.end(), "w2") != cols.end());
    CHECK(std::find(cols.begin(), cols.end(), "dummy") != cols.end());
    for (const auto& row : j.at("error_sd")) {
      const std::string name = row.at("column");
      if (name == "w2" || name == "dummy") {
        CHECK(row.at("sd_correction").get<double>() == 0.0);
        CHECK(row.at("mean_correction").get<double>() == 0.0);
      }
      if (name == "r") CHECK(row.at("sd_correction").get<double>() > 0.0);
    }
  }

  SUBCASE("every method runs and flags override the config") {
    spit(dir.file("cfg.json"), iv_config(dir.file("iv.csv"), dir.file("unused")).dump());
    for (const char* m : {"linearized_otgmm", "otgmm", "otgmm_joint_foc", "efficient_gmm"}) {
      const Run r = run({"estimate", "--config", dir.file("cfg.json"), "--method", m, "--out", dir.file(m)});
      INFO(m << ": " << r.err);
      CHECK(r.code == 0);
      const json j = json::parse(slurp(dir.file(std::string(m) + "/estimate.json")));
      CHECK(j.at("method") == m);
      CHECK(fs::exists(dir.file(std::string(m) + "/estimate.txt")));
    }
    CHECK_FALSE(fs::exists(dir.file("unused")));
  }

  SUBCASE("repeated runs are byte identical") {
    spit(dir.file("cfg.json"), iv_config(dir.file("iv.csv"), dir.file("a")).dump());
    REQUIRE(run({"estimate", "--config", dir.file("cfg.json")}).code == 0);
    REQUIRE(run({"estimate", "--config", dir.file("cfg.json"), "--out", dir.file("b")}).code == 0);
    CHECK(slurp(dir.file("a/estimate.json")) == slurp(dir.file("b/estimate.json")));
    CHECK(slurp(dir.file("a/estimate.txt")) == slurp(dir.file("b/estimate.txt")));
  }
}

TEST_CASE("check command") {
  TempDir dir("check");
  SUBCASE("built-in models pass") {
    for (const char* dgp : {"normal_exp", "normal_logistic", "exp_logistic", "exponential_sq"}) {
      const std::string latent = std::string(dgp) == "exponential_sq" ? "exponential" : "normal";
      const json cfg = {{"output", dir.file(dgp)}, {"model", {{"type", "dgp"}, {"dgp", dgp}, {"latent", latent}}}};
      const CommandOutput o = cmd_check(parse_run_config(cfg.dump()));
      INFO(dgp << "\n" << o.summary);
      CHECK(o.exit_code == 0);
    }
  }
  SUBCASE("linear IV passes, planted faults fail by name") {
    DgpRng rng(62);
    write_csv(dir.file("iv.csv"), fixtures::iv_data(rng, 120, true));
    json cfg = iv_config(dir.file("iv.csv"), dir.file("ok"));
    const CommandOutput ok = cmd_check(parse_run_config(cfg.dump()));
    INFO(ok.summary);
    CHECK(ok.exit_code == 0);
    const json j = json::parse(slurp(dir.file("ok/check.json")));
    for (const auto& c : j.at("checks")) CHECK(c.at("pass").get<bool>());

    for (const char* fault : {"H", "G", "hess_zz", "hess_ztheta"}) {
      cfg["model"]["fault"] = fault;
      cfg["output"] = dir.file(std::string("fault_") + fault);
      spit(dir.file("fault.json"), cfg.dump());
      const Run r = run({"check", "--config", dir.file("fault.json")});
      INFO(fault << ": " << r.err);
      CHECK(r.code == 5);
      const json f = json::parse(slurp(dir.file(std::string("fault_") + fault + "/check.json")));
      bool named = false;
      for (const auto& c : f.at("checks")) {
        if (c.at("name") == std::string("derivatives:") + fault) named = !c.at("pass").get<bool>();
      }
      CHECK(named);
    }
  }
}

TEST_CASE("simulate command") {
  TempDir dir("simulate");
  const json cfg = {{"output", dir.file("a")},
                    {"simulate",
                     {{"dgps", {"normal_logistic"}},
                      {"latents", {"uniform"}},
                      {"sigmas", {0.0, 1.0}},
                      {"n", 50},
                      {"replications", 6}}}};
  spit(dir.file("sim.json"), cfg.dump());
  REQUIRE(run({"simulate", "--config", dir.file("sim.json")}).code == 0);
  REQUIRE(run({"simulate", "--config", dir.file("sim.json"), "--out", dir.file("b"), "--workers", "4"}).code == 0);
  for (const char* f : {"cells.csv", "tables.csv", "report.json"}) {
    INFO(f);
    CHECK(slurp(dir.file(std::string("a/") + f)) == slurp(dir.file(std::string("b/") + f)));
  }
  CHECK(fs::exists(dir.file("a/timings.json")));
  const json rep = json::parse(slurp(dir.file("a/report.json")));
  CHECK(rep.at("cells").size() == 6);
  CHECK(rep.at("replications") == 6);

  REQUIRE(run({"simulate", "--config", dir.file("sim.json"), "--out", dir.file("c"), "--replications", "3"}).code ==
          0);
  CHECK(json::parse(slurp(dir.file("c/report.json"))).at("replications") == 3);
}
