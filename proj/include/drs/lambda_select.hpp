#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "drs/admm.hpp"
#include "drs/coordinate.hpp"
#include "drs/format.hpp"
#include "drs/kalman.hpp"

namespace drs {

struct LambdaBounds {
  double lambda_x = 0.0;
  double lambda_y = 0.0;
};

/// Smallest (lambda_x, lambda_y) at which the doubly robust estimate
/// collapses to the plain Kalman smoother: the largest whitened measurement
/// and state residuals of a fresh smoother run.
///
/// For a tall noise gain the state residual has no precision; the bound is
/// then the largest entry of the state-equation multipliers of the smoother
///   chi_K = H_K^T R_K^-1 v_K,  chi_k = H_k^T R_k^-1 v_k + F_{k+1}^T chi_{k+1},
/// which reduces to Q_k^-1 (x_k - F_k x_{k-1}) when G = I.
inline LambdaBounds lambda_bounds(const Interval& iv) {
  LambdaBounds b;
  const int K = iv.length();
  if (!iv.model->generalized()) {
    const Precisions prec(iv);
    const SmootherOutput ks = kalman_smoother(iv);
    VectorXd alpha;
    for (int k = 1; k <= K; ++k) {
      alpha.noalias() = prec.r(k) * (iv.meas(k) - iv.H(k) * ks.x.row(k).transpose());
      b.lambda_y = std::max(b.lambda_y, alpha.lpNorm<Eigen::Infinity>());
      alpha.noalias() = prec.q(k) * (ks.x.row(k) - ks.x.row(k - 1) * iv.F(k).transpose()).transpose();
      b.lambda_x = std::max(b.lambda_x, alpha.lpNorm<Eigen::Infinity>());
    }
    return b;
  }
  const SmootherOutput ks = kalman_smoother(iv);
  VectorXd chi = VectorXd::Zero(iv.dx());
  for (int k = K; k >= 1; --k) {
    const VectorXd rv = iv.R(k).llt().solve(iv.meas(k) - iv.H(k) * ks.x.row(k).transpose());
    b.lambda_y = std::max(b.lambda_y, rv.lpNorm<Eigen::Infinity>());
    VectorXd next = iv.H(k).transpose() * rv;
    if (k < K) next += iv.F(k + 1).transpose() * chi;
    chi = std::move(next);
    b.lambda_x = std::max(b.lambda_x, chi.lpNorm<Eigen::Infinity>());
  }
  return b;
}

inline LambdaBounds lambda_bounds(const StateSpaceModel& model, const ObservationBatch& obs) {
  require_valid(model, obs);
  return lambda_bounds(full_interval(model, obs));
}

/// Log-spaced candidate values on each axis, largest (the bound) first.
struct LambdaGrid {
  LambdaBounds bounds;
  double floor_ratio = 1e-3;
  std::vector<double> x;  // size Ix, descending
  std::vector<double> y;  // size Iy, descending
  std::vector<std::string> warnings;

  int Ix() const { return static_cast<int>(x.size()); }
  int Iy() const { return static_cast<int>(y.size()); }
  int index(int ix, int iy) const { return iy * Ix() + ix; }
};

inline std::vector<double> log_axis(double bound, int count, double floor_ratio) {
  std::vector<double> v(static_cast<std::size_t>(count));
  if (count == 1) {
    v[0] = bound;
    return v;
  }
  const double lo = std::log(floor_ratio);
  for (int i = 0; i < count; ++i) {
    v[static_cast<std::size_t>(i)] = bound * std::exp(lo * static_cast<double>(i) / (count - 1));
  }
  v[0] = bound;
  v.back() = bound * floor_ratio;
  return v;
}

inline LambdaGrid build_grid(const LambdaBounds& bounds, int Ix, int Iy, double floor_ratio = 1e-3) {
  if (Ix < 1 || Iy < 1) throw InvalidArgument("grid counts must be >= 1");
  if (!(floor_ratio > 0.0 && floor_ratio < 1.0)) throw InvalidArgument("floor_ratio must lie in (0, 1)");
  if (bounds.lambda_x < 0.0 || bounds.lambda_y < 0.0) throw InvalidArgument("bounds must be nonnegative");
  LambdaGrid g;
  g.bounds = bounds;
  g.floor_ratio = floor_ratio;
  if (bounds.lambda_x == 0.0) {
    g.x = {0.0};
    g.warnings.push_back("state residuals of the smoother are exactly zero; lambda_x axis collapsed to 0");
  } else {
    g.x = log_axis(bounds.lambda_x, Ix, floor_ratio);
  }
  if (bounds.lambda_y == 0.0) {
    g.y = {0.0};
    g.warnings.push_back("measurement residuals of the smoother are exactly zero; lambda_y axis collapsed to 0");
  } else {
    g.y = log_axis(bounds.lambda_y, Iy, floor_ratio);
  }
  return g;
}

enum class PathSolver { CoordinateDescent, Admm };

struct PathOptions {
  PathSolver solver = PathSolver::CoordinateDescent;
  DrsConfig cd;        // lambdas are overwritten per point
  AdmmConfig admm;     // lambdas are overwritten per point
  bool warm_start = true;
};

struct PathPoint {
  int ix = 0;
  int iy = 0;
  double lambda_x = 0.0;
  double lambda_y = 0.0;
  bool valid = false;
  std::string error;
  SmootherOutput out;
  MatrixXd w;  // process noise estimates (ADMM only)
  AdmmState admm_state;
};

struct PathResult {
  LambdaGrid grid;
  std::vector<PathPoint> points;  // row-major in (iy, ix)
  long total_iterations = 0;

  const PathPoint& at(int ix, int iy) const { return points[static_cast<std::size_t>(grid.index(ix, iy))]; }
};

/// Solves every grid point, starting at the sparse corner and moving to
/// decreasing lambda_x within decreasing lambda_y. Each solve starts from
/// the neighbour solved just before it: (ix-1, iy), or (0, iy-1) at the
/// start of a row. Failed points are marked invalid and skipped.
inline PathResult solve_path(const StateSpaceModel& model, const ObservationBatch& obs, const LambdaGrid& grid,
                             const PathOptions& opt = {}) {
  require_valid(model, obs);
  const Interval iv = full_interval(model, obs);
  if (opt.solver == PathSolver::CoordinateDescent && model.generalized()) {
    throw UnsupportedModel("coordinate descent needs G_n = I; choose the ADMM path solver");
  }
  PathResult res;
  res.grid = grid;
  res.points.resize(static_cast<std::size_t>(grid.Ix() * grid.Iy()));
  for (int iy = 0; iy < grid.Iy(); ++iy) {
    for (int ix = 0; ix < grid.Ix(); ++ix) {
      PathPoint& p = res.points[static_cast<std::size_t>(grid.index(ix, iy))];
      p.ix = ix;
      p.iy = iy;
      p.lambda_x = grid.x[static_cast<std::size_t>(ix)];
      p.lambda_y = grid.y[static_cast<std::size_t>(iy)];
      const PathPoint* prev = nullptr;
      if (opt.warm_start) {
        if (ix > 0) {
          prev = &res.points[static_cast<std::size_t>(grid.index(ix - 1, iy))];
        } else if (iy > 0) {
          prev = &res.points[static_cast<std::size_t>(grid.index(0, iy - 1))];
        }
        if (prev && !prev->valid) prev = nullptr;
      }
      try {
        if (opt.solver == PathSolver::CoordinateDescent) {
          DrsConfig c = opt.cd;
          c.lambda_x = p.lambda_x;
          c.lambda_y = p.lambda_y;
          p.out = drs_solve(iv, c, prev ? &prev->out.outliers : nullptr);
        } else {
          AdmmConfig c = opt.admm;
          c.lambda_x = p.lambda_x;
          c.lambda_y = p.lambda_y;
          AdmmOutput a = admm_solve(iv, c, prev ? &prev->admm_state : nullptr);
          p.w = a.w;
          p.admm_state = std::move(a.state);
          p.out = std::move(static_cast<SmootherOutput&>(a));
        }
        p.valid = true;
        res.total_iterations += p.out.iterations;
      } catch (const Error& e) {
        p.valid = false;
        p.error = e.what();
      }
    }
  }
  return res;
}

struct SelectionResult {
  int ix = -1;
  int iy = -1;
  double lambda_x = 0.0;
  double lambda_y = 0.0;
  std::string criterion_name;
  // Per-point tables, Iy x Ix; NaN marks invalid points.
  MatrixXd criterion;
  MatrixXd frac_x;
  MatrixXd frac_y;
  MatrixXd sigma2;
  std::vector<double> grid_x;
  std::vector<double> grid_y;
  SmootherOutput best;
};

/// Nominal-noise variance estimate from the whitened residuals of a
/// solution: prior, measurement and process terms over the number of
/// scalar residuals. For a tall noise gain `w` holds the noise estimates and
/// the process term has N*Dw entries.
inline double sigma2_hat(const Interval& iv, const MatrixXd& x, const OutlierField& o, const MatrixXd* w = nullptr) {
  const int K = iv.length();
  const VectorXd e0 = x.row(0).transpose() - iv.prior_mean;
  double num = e0.dot(iv.prior_cov.llt().solve(e0));
  Index dw = iv.dx();
  for (int k = 1; k <= K; ++k) {
    const VectorXd v = iv.meas(k) - iv.H(k) * x.row(k).transpose() - o.oy.row(k - 1).transpose();
    num += v.dot(iv.R(k).llt().solve(v));
    VectorXd wk;
    if (w) {
      wk = w->row(k - 1).transpose();
      dw = wk.size();
    } else {
      wk = x.row(k).transpose() - iv.F(k) * x.row(k - 1).transpose() - o.ox.row(k - 1).transpose();
    }
    num += wk.dot(iv.Q(k).llt().solve(wk));
  }
  const double den = static_cast<double>(K * iv.dy() + iv.dx() + K * dw);
  return num / den;
}

namespace detail {

inline SelectionResult select_by(const PathResult& path, const std::string& name,
                                 const std::function<double(const PathPoint&, double&, double&, double&)>& score) {
  const LambdaGrid& g = path.grid;
  SelectionResult s;
  s.criterion_name = name;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  s.criterion = MatrixXd::Constant(g.Iy(), g.Ix(), nan);
  s.frac_x = s.criterion;
  s.frac_y = s.criterion;
  s.sigma2 = s.criterion;
  s.grid_x = g.x;
  s.grid_y = g.y;
  double best = std::numeric_limits<double>::infinity();
  for (const PathPoint& p : path.points) {
    if (!p.valid) continue;
    double fx = 0, fy = 0, s2 = 0;
    const double c = score(p, fx, fy, s2);
    s.criterion(p.iy, p.ix) = c;
    s.frac_x(p.iy, p.ix) = fx;
    s.frac_y(p.iy, p.ix) = fy;
    s.sigma2(p.iy, p.ix) = s2;
    if (!std::isfinite(c)) continue;
    // Ties go to the most regularized point.
    const bool better = c < best || (c == best && p.lambda_x + p.lambda_y > s.lambda_x + s.lambda_y);
    if (better) {
      best = c;
      s.ix = p.ix;
      s.iy = p.iy;
      s.lambda_x = p.lambda_x;
      s.lambda_y = p.lambda_y;
    }
  }
  if (s.ix < 0) throw Error("no valid grid point to select from");
  s.best = path.at(s.ix, s.iy).out;
  return s;
}

inline double support_fraction(const MatrixXd& o) {
  return o.size() == 0 ? 0.0 : static_cast<double>((o.array() != 0.0).count()) / static_cast<double>(o.size());
}

}  // namespace detail

/// Picks the grid point whose estimated outlier fractions (nonzero entries
/// over all entries) are closest to the known fractions.
inline SelectionResult select_known_fraction(const PathResult& path, const StateSpaceModel& model,
                                             const ObservationBatch& obs, double pi_x, double pi_y) {
  if (!(pi_x >= 0.0 && pi_x <= 1.0 && pi_y >= 0.0 && pi_y <= 1.0)) {
    throw InvalidArgument("outlier fractions must lie in [0, 1]");
  }
  const Interval iv = full_interval(model, obs);
  return detail::select_by(path, "fraction", [&](const PathPoint& p, double& fx, double& fy, double& s2) {
    fx = detail::support_fraction(p.out.outliers.ox);
    fy = detail::support_fraction(p.out.outliers.oy);
    s2 = sigma2_hat(iv, p.out.x, p.out.outliers, p.w.size() ? &p.w : nullptr);
    return std::abs(pi_x - fx) + std::abs(pi_y - fy);
  });
}

/// Picks the grid point whose whitened residual variance is closest to one.
inline SelectionResult select_avd(const PathResult& path, const StateSpaceModel& model, const ObservationBatch& obs) {
  const Interval iv = full_interval(model, obs);
  return detail::select_by(path, "avd", [&](const PathPoint& p, double& fx, double& fy, double& s2) {
    fx = detail::support_fraction(p.out.outliers.ox);
    fy = detail::support_fraction(p.out.outliers.oy);
    s2 = sigma2_hat(iv, p.out.x, p.out.outliers, p.w.size() ? &p.w : nullptr);
    return std::abs(1.0 - s2);
  });
}

/// One row per grid point: ix, iy, lambda_x, lambda_y, criterion, frac_ox,
/// frac_oy, sigma2.
inline void write_selection_csv(std::ostream& os, const SelectionResult& s) {
  os << "ix,iy,lambda_x,lambda_y,criterion,frac_ox,frac_oy,sigma2\n";
  for (Index iy = 0; iy < s.criterion.rows(); ++iy) {
    for (Index ix = 0; ix < s.criterion.cols(); ++ix) {
      os << ix << ',' << iy << ',' << fmt(s.grid_x[static_cast<std::size_t>(ix)]) << ','
         << fmt(s.grid_y[static_cast<std::size_t>(iy)]) << ',' << fmt(s.criterion(iy, ix)) << ','
         << fmt(s.frac_x(iy, ix)) << ',' << fmt(s.frac_y(iy, ix)) << ',' << fmt(s.sigma2(iy, ix)) << '\n';
    }
  }
}

}  // namespace drs
