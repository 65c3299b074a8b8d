#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>

#include "drs/kalman.hpp"
#include "drs/model.hpp"

namespace drs {

/// [|gamma| - lambda]^+ sign(gamma): the minimizer of
/// 0.5 (o - gamma)^2 + lambda |o|.
inline double soft_threshold(double gamma, double lambda) {
  const double mag = std::abs(gamma) - lambda;
  if (mag <= 0.0) return 0.0;
  return gamma > 0.0 ? mag : -mag;
}

struct DrsConfig {
  double lambda_x = 0.0;
  double lambda_y = 0.0;
  int max_sweeps = 500;
  double tol = 1e-8;  // relative objective change between full sweeps
  /// When > 0, convergence also needs the largest change of any x or o entry
  /// over a sweep to be at most step_tol. The objective is very flat near
  /// some solutions, so the objective test alone can stop with x still
  /// ~sqrt(eps) away.
  double step_tol = 0.0;
};

/// Per-entry multipliers of the l1 penalty (all ones gives the plain
/// problem). Used by the reweighted refinement.
struct OutlierWeights {
  MatrixXd wx;  // N x Dx
  MatrixXd wy;  // N x Dy
};

/// Inverses of Q_k, R_k and of the prior covariance, computed once through
/// Cholesky. A single entry is stored for time-invariant models.
struct Precisions {
  std::vector<MatrixXd> Qinv;
  std::vector<MatrixXd> Rinv;
  MatrixXd P0inv;
  bool diagonal_q = true;
  bool diagonal_r = true;

  explicit Precisions(const Interval& iv) {
    if (iv.model->generalized()) {
      throw UnsupportedModel("the coordinate-descent smoother needs G_n = I; use the ADMM smoother");
    }
    auto inverse = [](const MatrixXd& m, int step) {
      Eigen::LLT<MatrixXd> llt(m);
      if (llt.info() != Eigen::Success) throw SingularMatrix("covariance is not positive definite", step);
      MatrixXd inv = llt.solve(MatrixXd::Identity(m.rows(), m.cols()));
      return MatrixXd(0.5 * (inv + inv.transpose()));
    };
    const int count = iv.model->time_invariant() ? std::min(1, iv.length()) : iv.length();
    for (int k = 1; k <= count; ++k) {
      Qinv.push_back(inverse(iv.Q(k), iv.offset + k));
      Rinv.push_back(inverse(iv.R(k), iv.offset + k));
      diagonal_q = diagonal_q && Qinv.back().isDiagonal(0.0);
      diagonal_r = diagonal_r && Rinv.back().isDiagonal(0.0);
    }
    P0inv = inverse(iv.prior_cov, iv.offset);
  }

  const MatrixXd& q(int k) const { return Qinv.size() == 1 ? Qinv.front() : Qinv[static_cast<std::size_t>(k - 1)]; }
  const MatrixXd& r(int k) const { return Rinv.size() == 1 ? Rinv.front() : Rinv[static_cast<std::size_t>(k - 1)]; }
};

/// The doubly robust cost: weighted least squares of measurement, state and
/// prior residuals after outlier compensation, plus l1 penalties on the
/// outliers (optionally weighted per entry).
inline double drs_objective(const Interval& iv, const Precisions& prec, const MatrixXd& x, const OutlierField& o,
                            double lambda_x, double lambda_y, const OutlierWeights* weights = nullptr) {
  const VectorXd e0 = x.row(0).transpose() - iv.prior_mean;
  double cost = 0.5 * e0.dot(prec.P0inv * e0);
  const Index dx = x.cols(), dy = o.oy.cols();
  VectorXd xk(dx), xprev(dx), v(dy), w(dx), pv(dy), pw(dx);
  for (int k = 1; k <= iv.length(); ++k) {
    xk = x.row(k).transpose();
    xprev = x.row(k - 1).transpose();
    v = iv.meas(k) - o.oy.row(k - 1).transpose();
    v.noalias() -= iv.H(k) * xk;
    w = xk - o.ox.row(k - 1).transpose();
    w.noalias() -= iv.F(k) * xprev;
    pv.noalias() = prec.r(k) * v;
    pw.noalias() = prec.q(k) * w;
    cost += 0.5 * v.dot(pv) + 0.5 * w.dot(pw);
  }
  if (weights) {
    cost += lambda_x * (weights->wx.array() * o.ox.array().abs()).sum();
    cost += lambda_y * (weights->wy.array() * o.oy.array().abs()).sum();
  } else {
    cost += lambda_x * o.ox.cwiseAbs().sum() + lambda_y * o.oy.cwiseAbs().sum();
  }
  return cost;
}

inline double drs_objective(const StateSpaceModel& model, const ObservationBatch& obs, const MatrixXd& x,
                            const OutlierField& o, double lambda_x, double lambda_y) {
  const Interval iv = full_interval(model, obs);
  return drs_objective(iv, Precisions(iv), x, o, lambda_x, lambda_y);
}

/// Block coordinate descent on the doubly robust cost: an exact x-step (a
/// Kalman smoother on outlier-compensated data) followed by closed-form
/// soft-threshold updates of every state-outlier entry, then every
/// measurement-outlier entry, each using the freshest values of the others.
class CoordinateDescent {
 public:
  using SweepCallback = std::function<void(int sweep, double objective)>;

  CoordinateDescent(const Interval& iv, DrsConfig cfg, const OutlierWeights* weights = nullptr)
      : iv_(iv), cfg_(cfg), prec_(iv), gains_(iv_), weights_(weights) {
    pinv_fallbacks_ = gains_.pinv_fallbacks();
    if (cfg.lambda_x < 0.0 || cfg.lambda_y < 0.0) throw InvalidArgument("lambda must be nonnegative");
    if (!(cfg.tol > 0.0)) throw InvalidArgument("tol must be positive");
    const int K = iv.length();
    o_ = OutlierField::zeros(K, iv.dx(), iv.dy());
    x_ = MatrixXd::Zero(K + 1, iv.dx());
    alpha_x_.resize(iv.dx());
    alpha_y_.resize(iv.dy());
    if (weights && (weights->wx.rows() != K || weights->wx.cols() != iv.dx() || weights->wy.rows() != K ||
                    weights->wy.cols() != iv.dy())) {
      throw InvalidArgument("outlier weights have the wrong shape");
    }
  }

  void set_outliers(OutlierField init) {
    if (init.ox.rows() != o_.ox.rows() || init.ox.cols() != o_.ox.cols() || init.oy.rows() != o_.oy.rows() ||
        init.oy.cols() != o_.oy.cols()) {
      throw InvalidArgument("initial outliers have the wrong shape");
    }
    o_ = std::move(init);
  }

  void set_x(MatrixXd x) {
    if (x.rows() != x_.rows() || x.cols() != x_.cols()) throw InvalidArgument("state iterate has the wrong shape");
    x_ = std::move(x);
  }

  /// x = argmin of the cost with the outliers held fixed.
  void x_step() {
    x_ = gains_.smooth(iv_, &o_.ox, &o_.oy);
  }

  /// Exact minimization over o_{x,k,d} (d 0-based) with everything else fixed.
  double update_state_outlier(int k, int d) {
    const MatrixXd& q = prec_.q(k);
    alpha_x_.noalias() = q * (x_.row(k) - x_.row(k - 1) * iv_.F(k).transpose()).transpose();
    o_.ox(k - 1, d) = coordinate_update(q, alpha_x_, o_.ox, k, d, cfg_.lambda_x * weight_x(k, d), prec_.diagonal_q);
    return o_.ox(k - 1, d);
  }

  /// Exact minimization over o_{y,k,d} (d 0-based) with everything else fixed.
  double update_measurement_outlier(int k, int d) {
    const MatrixXd& r = prec_.r(k);
    alpha_y_.noalias() = r * (iv_.meas(k) - iv_.H(k) * x_.row(k).transpose());
    o_.oy(k - 1, d) = coordinate_update(r, alpha_y_, o_.oy, k, d, cfg_.lambda_y * weight_y(k, d), prec_.diagonal_r);
    return o_.oy(k - 1, d);
  }

  void state_sweep() {
    const Index dx = iv_.dx();
    for (int k = 1; k <= iv_.length(); ++k) {
      const MatrixXd& q = prec_.q(k);
      alpha_x_.noalias() = q * (x_.row(k) - x_.row(k - 1) * iv_.F(k).transpose()).transpose();
      for (Index d = 0; d < dx; ++d) {
        o_.ox(k - 1, d) = coordinate_update(q, alpha_x_, o_.ox, k, static_cast<int>(d),
                                            cfg_.lambda_x * weight_x(k, static_cast<int>(d)), prec_.diagonal_q);
      }
    }
  }

  void measurement_sweep() {
    const Index dy = iv_.dy();
    for (int k = 1; k <= iv_.length(); ++k) {
      const MatrixXd& r = prec_.r(k);
      alpha_y_.noalias() = r * (iv_.meas(k) - iv_.H(k) * x_.row(k).transpose());
      for (Index d = 0; d < dy; ++d) {
        o_.oy(k - 1, d) = coordinate_update(r, alpha_y_, o_.oy, k, static_cast<int>(d),
                                            cfg_.lambda_y * weight_y(k, static_cast<int>(d)), prec_.diagonal_r);
      }
    }
  }

  double objective() const { return drs_objective(iv_, prec_, x_, o_, cfg_.lambda_x, cfg_.lambda_y, weights_); }

  /// One full (x, o_x, o_y) cycle. Appends the cost after each block to the
  /// trace and returns the cost at the end of the cycle.
  double sweep() {
    x_step();
    trace_.push_back(objective());
    state_sweep();
    trace_.push_back(objective());
    measurement_sweep();
    trace_.push_back(objective());
    ++sweeps_;
    return trace_.back();
  }

  /// Sweeps until the relative cost change between consecutive cycles drops
  /// below tol or max_sweeps is reached.
  SmootherOutput solve(const SweepCallback& on_sweep = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    bool converged = false;
    double prev = std::numeric_limits<double>::infinity();
    MatrixXd last_x;
    OutlierField last_o;
    for (int j = 0; j < cfg_.max_sweeps; ++j) {
      if (cfg_.step_tol > 0.0) {
        last_x = x_;
        last_o = o_;
      }
      const double cur = sweep();
      if (on_sweep) on_sweep(sweeps_, cur);
      bool done = std::isfinite(prev) && std::abs(prev - cur) <= cfg_.tol * std::max(std::abs(prev), 1e-300);
      if (done && cfg_.step_tol > 0.0) {
        double step = (x_ - last_x).cwiseAbs().maxCoeff();
        if (o_.ox.size()) step = std::max(step, (o_.ox - last_o.ox).cwiseAbs().maxCoeff());
        if (o_.oy.size()) step = std::max(step, (o_.oy - last_o.oy).cwiseAbs().maxCoeff());
        done = step <= cfg_.step_tol;
      }
      if (done) {
        converged = true;
        break;
      }
      prev = cur;
    }
    SmootherOutput out = result();
    out.converged = converged;
    out.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!converged) out.warnings.push_back("coordinate descent hit max_sweeps before converging");
    return out;
  }

  SmootherOutput result() const {
    SmootherOutput out;
    out.x = x_;
    out.outliers = o_;
    out.objective_trace = trace_;
    out.iterations = sweeps_;
    out.pinv_fallbacks = pinv_fallbacks_;
    return out;
  }

  const MatrixXd& x() const { return x_; }
  const OutlierField& outliers() const { return o_; }
  const Precisions& precisions() const { return prec_; }
  const std::vector<double>& trace() const { return trace_; }
  int sweeps() const { return sweeps_; }

 private:
  double weight_x(int k, int d) const { return weights_ ? weights_->wx(k - 1, d) : 1.0; }
  double weight_y(int k, int d) const { return weights_ ? weights_->wy(k - 1, d) : 1.0; }

  /// gamma = (alpha_d - sum_{j != d} P_{j,d} o_j) / P_{d,d}; returns
  /// soft_threshold(gamma, lambda / P_{d,d}).
  static double coordinate_update(const MatrixXd& P, const VectorXd& alpha, const MatrixXd& o, int k, int d,
                                  double lambda, bool diagonal) {
    const double pdd = P(d, d);
    if (!(pdd > 0.0)) throw InvalidArgument("precision matrix has a nonpositive diagonal entry");
    double g = alpha(d);
    if (!diagonal) {
      for (Index j = 0; j < P.rows(); ++j) {
        if (j != d) g -= P(j, d) * o(k - 1, j);
      }
    }
    return soft_threshold(g / pdd, lambda / pdd);
  }

  Interval iv_;
  DrsConfig cfg_;
  Precisions prec_;
  SmootherGains gains_;
  const OutlierWeights* weights_;
  OutlierField o_;
  MatrixXd x_;
  VectorXd alpha_x_, alpha_y_;
  std::vector<double> trace_;
  int sweeps_ = 0;
  int pinv_fallbacks_ = 0;
};

/// Solves the doubly robust problem on an interval, starting from `init`
/// (zero outliers when absent).
inline SmootherOutput drs_solve(const Interval& iv, const DrsConfig& cfg, const OutlierField* init = nullptr,
                                const OutlierWeights* weights = nullptr,
                                const CoordinateDescent::SweepCallback& on_sweep = {}) {
  CoordinateDescent cd(iv, cfg, weights);
  if (init) cd.set_outliers(*init);
  return cd.solve(on_sweep);
}

/// Fixed-interval doubly robust smoother.
inline SmootherOutput drs_fixed_interval(const StateSpaceModel& model, const ObservationBatch& obs,
                                         const DrsConfig& cfg, const OutlierField* init = nullptr) {
  require_valid(model, obs);
  return drs_solve(full_interval(model, obs), cfg, init);
}

}  // namespace drs
