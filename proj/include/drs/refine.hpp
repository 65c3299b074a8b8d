#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "drs/coordinate.hpp"
#include "drs/kalman.hpp"

namespace drs {

struct ReweightConfig {
  double delta_x = 0.0;  // <= 0 picks the data-driven default
  double delta_y = 0.0;
  int iterations = 1;
  DrsConfig inner;  // sweep budget and tolerance of each weighted solve
};

inline double median_abs(std::vector<double> v) {
  if (v.empty()) return 0.0;
  for (double& e : v) e = std::abs(e);
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

/// 1e-4 times the median absolute residual of a plain smoother run, per
/// channel (state equation, measurements). Falls back to 1e-8 when the
/// median is zero.
inline std::pair<double, double> default_deltas(const Interval& iv) {
  const SmootherOutput ks = kalman_smoother(iv);
  std::vector<double> rx, ry;
  for (int k = 1; k <= iv.length(); ++k) {
    const VectorXd wx = ks.x.row(k).transpose() - iv.F(k) * ks.x.row(k - 1).transpose();
    const VectorXd vy = iv.meas(k) - iv.H(k) * ks.x.row(k).transpose();
    rx.insert(rx.end(), wx.data(), wx.data() + wx.size());
    ry.insert(ry.end(), vy.data(), vy.data() + vy.size());
  }
  double dx = 1e-4 * median_abs(rx), dy = 1e-4 * median_abs(ry);
  if (!(dx > 0.0)) dx = 1e-8;
  if (!(dy > 0.0)) dy = 1e-8;
  return {dx, dy};
}

/// The concave surrogate: quadratic terms of the doubly robust cost plus
/// lambda * sum log(|o| + delta) on both outlier fields.
inline double surrogate_objective(const Interval& iv, const Precisions& prec, const MatrixXd& x, const OutlierField& o,
                                  double lambda_x, double lambda_y, double delta_x, double delta_y) {
  double cost = drs_objective(iv, prec, x, o, 0.0, 0.0);
  cost += lambda_x * (o.ox.array().abs() + delta_x).log().sum();
  cost += lambda_y * (o.oy.array().abs() + delta_y).log().sum();
  return cost;
}

struct RefineOutput : SmootherOutput {
  std::vector<double> surrogate_trace;  // at the initial point and after each reweighting
  double delta_x = 0.0;
  double delta_y = 0.0;
};

/// Iteratively reweighted l1: each round solves the doubly robust problem
/// with per-entry weights 1 / (|o_prev| + delta), starting from the previous
/// round's outliers. `init` should be a converged unweighted solution.
inline RefineOutput reweighted_drs(const Interval& iv, double lambda_x, double lambda_y, const SmootherOutput& init,
                                   ReweightConfig cfg = {}) {
  if (cfg.iterations < 1) throw InvalidArgument("at least one reweighting iteration is required");
  if (cfg.delta_x <= 0.0 || cfg.delta_y <= 0.0) {
    const auto [dx, dy] = default_deltas(iv);
    if (cfg.delta_x <= 0.0) cfg.delta_x = dx;
    if (cfg.delta_y <= 0.0) cfg.delta_y = dy;
  }
  const Precisions prec(iv);
  RefineOutput out;
  out.delta_x = cfg.delta_x;
  out.delta_y = cfg.delta_y;
  out.x = init.x;
  out.outliers = init.outliers;
  out.surrogate_trace.push_back(
      surrogate_objective(iv, prec, out.x, out.outliers, lambda_x, lambda_y, cfg.delta_x, cfg.delta_y));
  DrsConfig inner = cfg.inner;
  inner.lambda_x = lambda_x;
  inner.lambda_y = lambda_y;
  for (int l = 0; l < cfg.iterations; ++l) {
    OutlierWeights w{(out.outliers.ox.array().abs() + cfg.delta_x).inverse().matrix(),
                     (out.outliers.oy.array().abs() + cfg.delta_y).inverse().matrix()};
    SmootherOutput s = drs_solve(iv, inner, &out.outliers, &w);
    out.x = std::move(s.x);
    out.outliers = std::move(s.outliers);
    out.objective_trace.insert(out.objective_trace.end(), s.objective_trace.begin(), s.objective_trace.end());
    out.iterations += s.iterations;
    out.converged = s.converged;
    out.pinv_fallbacks += s.pinv_fallbacks;
    out.warnings.insert(out.warnings.end(), s.warnings.begin(), s.warnings.end());
    out.surrogate_trace.push_back(
        surrogate_objective(iv, prec, out.x, out.outliers, lambda_x, lambda_y, cfg.delta_x, cfg.delta_y));
  }
  return out;
}

inline RefineOutput reweighted_drs(const StateSpaceModel& model, const ObservationBatch& obs, double lambda_x,
                                   double lambda_y, const SmootherOutput& init, const ReweightConfig& cfg = {}) {
  require_valid(model, obs);
  return reweighted_drs(full_interval(model, obs), lambda_x, lambda_y, init, cfg);
}

/// How flagged state-equation entries are treated by the rerun.
enum class StateOutlierPolicy {
  Offset,  // keep the estimated o_x as a known offset
  Free,    // re-estimate o_x on the flagged entries without penalty
};

/// Plain smoother rerun on the outlier-free part of the data. Measurement
/// components with a nonzero estimated outlier are dropped (marginalized out
/// of the Gaussian likelihood, exact also for non-diagonal R). State
/// outliers follow `policy`.
inline SmootherOutput ks_rerun_on_support(const Interval& iv, const SmootherOutput& drs,
                                          StateOutlierPolicy policy = StateOutlierPolicy::Offset) {
  const int K = iv.length();
  const OutlierField& o = drs.outliers;
  if (o.ox.rows() != K || o.oy.rows() != K) throw InvalidArgument("outlier field does not match the interval");
  std::vector<std::vector<int>> keep(static_cast<std::size_t>(K));
  Index dropped = 0;
  for (int k = 1; k <= K; ++k) {
    for (Index d = 0; d < iv.dy(); ++d) {
      if (o.oy(k - 1, d) == 0.0) {
        keep[static_cast<std::size_t>(k - 1)].push_back(static_cast<int>(d));
      } else {
        ++dropped;
      }
    }
  }
  SmootherOutput out;
  if (policy == StateOutlierPolicy::Offset) {
    KalmanTerms terms;
    terms.state_offset = &o.ox;
    terms.kept_rows = &keep;
    out = kalman_smoother(iv, terms);
    out.outliers.oy.setZero();
  } else {
    // Unpenalized o on flagged entries and o pinned to zero elsewhere. A free
    // measurement outlier absorbs its residual, which is the same as
    // dropping the component.
    OutlierWeights w{MatrixXd::Zero(K, iv.dx()), MatrixXd::Zero(K, iv.dy())};
    for (int k = 0; k < K; ++k) {
      for (Index d = 0; d < iv.dx(); ++d) w.wx(k, d) = o.ox(k, d) != 0.0 ? 0.0 : 1e300;
      for (Index d = 0; d < iv.dy(); ++d) w.wy(k, d) = o.oy(k, d) != 0.0 ? 0.0 : 1e300;
    }
    DrsConfig cfg{1.0, 1.0, 5000, 1e-14};
    out = drs_solve(iv, cfg, &o, &w);
  }
  if (dropped == K * iv.dy()) {
    out.warnings.push_back("every measurement was flagged; estimate follows the prior alone");
  }
  return out;
}

inline SmootherOutput ks_rerun_on_support(const StateSpaceModel& model, const ObservationBatch& obs,
                                          const SmootherOutput& drs,
                                          StateOutlierPolicy policy = StateOutlierPolicy::Offset) {
  require_valid(model, obs);
  return ks_rerun_on_support(full_interval(model, obs), drs, policy);
}

}  // namespace drs
