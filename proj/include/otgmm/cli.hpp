#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "otgmm/errors.hpp"
#include "otgmm/estimators.hpp"
#include "otgmm/sim_study.hpp"

namespace otgmm {

/// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitData = 3,
  kExitSolver = 4,
  kExitCheck = 5,
};

int exit_code_for(ErrorKind kind);

struct ModelSpec {
  std::string type = "linear_iv";  // "linear_iv" or "dgp"
  // linear_iv
  std::string y;
  std::vector<std::string> r;
  std::vector<std::string> w;
  bool intercept = true;
  // dgp
  std::string dgp;
  std::string latent = "normal";
  std::string form = "population_anchor";
  // testing aid: "H", "G", "hess_zz", "hess_ztheta" or "hess_thetatheta"
  std::string fault;
};

struct SimulateSpec {
  std::vector<std::string> dgps;
  std::vector<std::string> latents;  // empty: every admissible law
  std::vector<double> sigmas{0.0, 0.5, 1.0, 1.5, 2.0, 2.5};
  Index n = 100;
  int replications = 1000;
  std::vector<std::string> estimators{"linearized_otgmm", "otgmm", "efficient_gmm"};
  int workers = 1;
  std::string form = "population_anchor";
};

struct RunConfig {
  std::string command;
  std::string data_path;
  ModelSpec model;
  std::string method = "otgmm";
  std::vector<std::string> error_free;
  bool auto_dummies = false;
  std::map<std::string, double> weights;
  SolverOptions solver;
  std::string covariance = "small_error";
  std::optional<std::vector<double>> theta_init;
  std::string output_path = ".";
  std::uint64_t seed = 1;
  SimulateSpec simulate;

  /// Throws Error(kConfig) on unknown names or inconsistent fields.
  void validate() const;
};

/// Parses the JSON config text. Relative paths stay as written.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

/// A model bound to its data, ready for estimation.
struct ResolvedModel {
  MomentModel model;
  Dataset data;
  std::vector<std::string> coefficient_names;
  ErrorConstraint constraint;
  bool constrained = false;
  std::vector<std::string> constrained_columns;
  Vector theta_init;
};

/// Builds the model, applies the constraint (named columns, dummies, and the
/// intercept) and picks the starting value.
ResolvedModel resolve_model(const RunConfig& config, const Dataset& data);

struct CommandOutput {
  int exit_code = kExitOk;
  std::vector<std::string> files;  // written, in order
  std::string summary;             // for stdout
  std::string error;               // set when exit_code != 0
};

CommandOutput cmd_estimate(const RunConfig& config);
CommandOutput cmd_simulate(const RunConfig& config);
CommandOutput cmd_check(const RunConfig& config);

/// Single-line error header: "otgmm-error code=<c> kind=<k> message=<m>".
std::string error_header(int code, const std::string& kind, const std::string& message);

/// Full entry point (argument parsing, dispatch, error reporting).
int run_cli(int argc, char** argv);

}  // namespace otgmm
