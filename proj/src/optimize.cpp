#include "otgmm/optimize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace otgmm {

namespace {

double safe_eval(const Objective& f, const Vector& x, int& count) {
  ++count;
  const double v = f(x);
  return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
}

}  // namespace

OptimResult nelder_mead(const Objective& f, const Vector& start, const NelderMeadOptions& opts) {
  const Index d = start.size();
  std::vector<Vector> pts(d + 1, start);
  std::vector<double> vals(d + 1);
  int evals = 0;
  for (Index k = 0; k < d; ++k) pts[k + 1](k) += opts.initial_step * (1.0 + std::abs(start(k)));
  for (Index k = 0; k <= d; ++k) vals[k] = safe_eval(f, pts[k], evals);

  std::vector<Index> order(d + 1);
  OptimResult res;
  while (true) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return vals[a] < vals[b]; });
    const Vector& best = pts[order[0]];
    double diameter = 0;
    for (Index k = 1; k <= d; ++k) diameter = std::max(diameter, (pts[order[k]] - best).norm());
    if (std::isfinite(vals[order[0]]) && diameter < opts.tolerance * (1.0 + best.norm())) {
      res.converged = true;
      break;
    }
    if (evals >= opts.max_evals) break;

    const Index worst = order[d];
    Vector centroid = Vector::Zero(d);
    for (Index k = 0; k < d; ++k) centroid += pts[order[k]];
    centroid /= static_cast<double>(d);

    const Vector xr = centroid + (centroid - pts[worst]);
    const double fr = safe_eval(f, xr, evals);
    if (fr < vals[order[0]]) {
      const Vector xe = centroid + 2.0 * (centroid - pts[worst]);
      const double fe = safe_eval(f, xe, evals);
      if (fe < fr) {
        pts[worst] = xe;
        vals[worst] = fe;
      } else {
        pts[worst] = xr;
        vals[worst] = fr;
      }
      continue;
    }
    if (fr < vals[order[d - 1]]) {
      pts[worst] = xr;
      vals[worst] = fr;
      continue;
    }
    // Contraction, outside or inside.
    const bool outside = fr < vals[worst];
    const Vector xc = outside ? Vector(centroid + 0.5 * (xr - centroid))
                              : Vector(centroid + 0.5 * (pts[worst] - centroid));
    const double fc = safe_eval(f, xc, evals);
    if (fc < (outside ? fr : vals[worst])) {
      pts[worst] = xc;
      vals[worst] = fc;
      continue;
    }
    for (Index k = 1; k <= d; ++k) {
      const Index j = order[k];
      pts[j] = best + 0.5 * (pts[j] - best);
      vals[j] = safe_eval(f, pts[j], evals);
    }
  }
  res.x = pts[order[0]];
  res.value = vals[order[0]];
  res.evaluations = evals;
  return res;
}

OptimResult multistart_nelder_mead(const Objective& f, const std::vector<Vector>& starts,
                                   const NelderMeadOptions& opts) {
  OptimResult best;
  best.value = std::numeric_limits<double>::infinity();
  int total = 0;
  bool have = false;
  for (std::size_t s = 0; s < starts.size(); ++s) {
    OptimResult r = nelder_mead(f, starts[s], opts);
    total += r.evaluations;
    const double tie = 1e-14 * (1.0 + std::abs(best.value));
    if (!have || r.value < best.value - tie) {
      best = std::move(r);
      best.start_index = static_cast<int>(s);
      have = true;
    }
  }
  best.evaluations = total;
  return best;
}

std::vector<Vector> perturbed_starts(const Vector& center, int count, double scale,
                                     unsigned long long seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<Vector> out;
  for (int s = 0; s < count; ++s) {
    Vector v = center;
    for (Index k = 0; k < v.size(); ++k) v(k) += scale * (1.0 + std::abs(center(k))) * normal(rng);
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace otgmm
