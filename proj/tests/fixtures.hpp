#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "otgmm/estimators.hpp"
#include "otgmm/sim_study.hpp"

namespace fixtures {

using otgmm::Dataset;
using otgmm::DgpRng;
using otgmm::Index;
using otgmm::Matrix;
using otgmm::MomentModel;
using otgmm::Vector;

struct Instance {
  std::string name;
  MomentModel model;
  Dataset data;
  Vector theta;  // a sensible evaluation point near the estimate
};

inline Dataset normal_columns(DgpRng& rng, Index n, const std::vector<double>& sds,
                              const std::vector<std::string>& names) {
  Matrix v(n, static_cast<Index>(sds.size()));
  for (Index i = 0; i < n; ++i) {
    for (Index k = 0; k < v.cols(); ++k) v(i, k) = sds[static_cast<std::size_t>(k)] * rng.normal();
  }
  return otgmm::make_dataset(v, names);
}

// y = 0.5 r + 1 + u with r driven by two instruments.
inline Dataset iv_data(DgpRng& rng, Index n, bool endogenous = false) {
  Matrix v(n, 4);
  for (Index i = 0; i < n; ++i) {
    const double w1 = rng.normal();
    const double w2 = rng.normal();
    const double u = rng.normal();
    const double r = w1 + 0.5 * w2 + rng.normal() + (endogenous ? 0.5 * u : 0.0);
    v.row(i) << 1.0 + 0.5 * r + u, r, w1, w2;
  }
  return otgmm::make_dataset(v, {"y", "r", "w1", "w2"});
}

inline otgmm::LinearIvModel iv_model(const Dataset& d, bool intercept = false) {
  return otgmm::make_linear_iv(d, "y", {"r"}, {"w1", "w2"}, intercept);
}

inline otgmm::DgpSpec dgp_spec(otgmm::DgpId id, double sigma, Index n) {
  const otgmm::Latent law =
      id == otgmm::DgpId::kExponentialSq ? otgmm::Latent::kExponential : otgmm::Latent::kNormal;
  return {id, law, sigma, n};
}

/// One small instance of every built-in model: the mean models, a linear IV
/// model and the four simulation models (population-anchored).
inline std::vector<Instance> builtin_instances(std::uint64_t seed, Index n) {
  DgpRng rng(seed);
  std::vector<Instance> out;

  {
    Dataset d = normal_columns(rng, n, {1.0}, {"x"});
    out.push_back({"mean", otgmm::make_mean_model(1), d, Vector::Constant(1, d.values.mean() + 0.3)});
  }
  {
    Dataset d = normal_columns(rng, n, {1.0, 2.0}, {"x1", "x2"});
    out.push_back({"mean2", otgmm::make_mean_model(2), d, Vector::Constant(1, d.values.mean() + 0.2)});
  }
  {
    Dataset raw = iv_data(rng, n);
    Matrix v = raw.values;
    v.rowwise() -= v.colwise().mean();
    Dataset d = otgmm::make_dataset(v, raw.columns);
    otgmm::LinearIvModel iv = iv_model(d);
    out.push_back({"linear_iv", iv.model, iv.data, otgmm::ols_start(iv)});
  }
  for (otgmm::DgpId id : {otgmm::DgpId::kNormalExp, otgmm::DgpId::kNormalLogistic, otgmm::DgpId::kExpLogistic,
                          otgmm::DgpId::kExponentialSq}) {
    const otgmm::DgpSpec spec = dgp_spec(id, 0.5, n);
    DgpRng r2(otgmm::splitmix64(seed + static_cast<std::uint64_t>(id) + 17));
    Dataset d = otgmm::sample_dgp(spec, r2);
    MomentModel m = otgmm::dgp_model(id, otgmm::population_anchors(spec.latent));
    out.push_back({otgmm::to_string(id), m, d, Vector::Constant(1, d.values.mean())});
  }
  return out;
}

inline double uniform(DgpRng& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }

}  // namespace fixtures
