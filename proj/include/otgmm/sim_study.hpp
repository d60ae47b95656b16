#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "otgmm/estimators.hpp"

namespace otgmm {

enum class DgpId { kNormalExp, kNormalLogistic, kExpLogistic, kExponentialSq };
enum class Latent { kNormal, kUniform, kBinomial, kExponential };

const char* to_string(DgpId id);
const char* to_string(Latent latent);
DgpId parse_dgp_id(const std::string& s);
Latent parse_latent(const std::string& s);

inline constexpr double kTheta0 = 1.5;

/// Latent z ~ law, observed x = z + sigma * e with e ~ N(0, 1).
struct DgpSpec {
  DgpId id = DgpId::kNormalExp;
  Latent latent = Latent::kNormal;
  double sigma = 0;
  Index n = 100;

  void validate() const;
};

/// Moment forms for the models whose second moment carries a sample average.
enum class DgpForm {
  kPopulationAnchor,  // f(z) - (2/3) theta kappa, kappa = E[f(z)] under the latent law
  kObservedAnchor,    // same with kappa = sample mean of f(x)
  kPerObservation,    // f(z)(1 - 2 theta / 3)
};

const char* to_string(DgpForm form);
DgpForm parse_dgp_form(const std::string& s);

struct DgpAnchors {
  double exp_mean = 1;       // E[e^x]
  double logistic_mean = 1;  // E[logistic(2x - 3)]
};

DgpAnchors observed_anchors(const Dataset& data);
/// Exact latent-law expectations of e^z and logistic(2z - 3).
DgpAnchors population_anchors(Latent latent);

double logistic_23(double z);

/// Per-observation model of the given DGP. Anchors switch the exp / logistic
/// moments to the observed-anchor form; without them the factorized form is used.
MomentModel dgp_model(DgpId id, const std::optional<DgpAnchors>& anchors = std::nullopt);

/// Counter-free generator: mt19937_64 plus fixed transforms, identical on every
/// platform.
class DgpRng {
 public:
  explicit DgpRng(std::uint64_t seed) : engine_(seed) {}
  double uniform();  // in (0, 1)
  double normal();
  double exponential(double rate);
  int binomial(int trials, double p);

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);
/// Stream seed for one replication; shared across sigma so that cells differ
/// only in the error scale.
std::uint64_t stream_seed(std::uint64_t master, const DgpSpec& spec, std::uint64_t replication);

Dataset sample_dgp(const DgpSpec& spec, DgpRng& rng);

/// Acklam's rational approximation of the standard normal quantile.
double normal_quantile(double p);

struct StudyConfig {
  std::vector<DgpSpec> grid;
  std::vector<Method> estimators{Method::kLinearizedOtgmm, Method::kOtgmm, Method::kEfficientGmm};
  int replications = 1000;
  std::uint64_t master_seed = 1;
  int parallel_workers = 1;
  DgpForm form = DgpForm::kPopulationAnchor;
  EstimatorOptions estimator;
  double test_level = 0.05;

  void validate() const;
};

/// Standard grid for one DGP: every admissible latent law times
/// sigma in {0, 0.5, ..., 2.5}.
std::vector<DgpSpec> default_grid(DgpId id, Index n = 100);

struct StudyCell {
  DgpSpec spec;
  Method method = Method::kOtgmm;
  int replications = 0;
  int failures = 0;
  double mean = 0;
  double bias = 0;
  double sd = 0;    // population denominator (divide by successful replications)
  double rmse = 0;  // rmse^2 = bias^2 + sd^2
  double coverage = 0;        // share of 95% intervals containing theta0
  double rejection_rate = 0;  // error-absence test at test_level (OTGMM methods)
  std::vector<std::string> failure_messages;  // first few, for the report
};

struct StudyReport {
  std::uint64_t seed = 0;
  int replications = 0;
  DgpForm form = DgpForm::kPopulationAnchor;
  std::vector<StudyCell> cells;
  double wall_seconds = 0;  // not part of the serialized report

  const StudyCell* find(DgpId id, Latent latent, double sigma, Method method) const;
};

/// Runs one estimator on one replication of a cell.
struct ReplicationResult {
  bool ok = false;
  double theta = 0;
  double se = 0;
  double pvalue = 1;
  bool has_test = false;
  std::string error;
};
ReplicationResult run_replication(const StudyConfig& config, const DgpSpec& spec, Method method,
                                  int replication);

StudyReport run_study(const StudyConfig& config);

/// One row per cell.
std::string report_csv(const StudyReport& report);
/// Estimator blocks times sigma columns, one row per (statistic, dgp, latent).
std::string report_tables_csv(const StudyReport& report);
std::string report_json(const StudyReport& report);

}  // namespace otgmm
