#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "drs/coordinate.hpp"
#include "drs/kalman.hpp"
#include "drs/model.hpp"

namespace drs {

struct AdmmConfig {
  double lambda_x = 0.0;
  double lambda_y = 0.0;
  double kappa = 0.05;
  int max_iters = 5000;
  double tol = 1e-6;
  /// Gauss-Seidel passes over (x, w, o_y, o_x) before each (a, b) update.
  int inner_passes = 1;
};

/// Norms of the three constraint violations: the state equation, o_x - a
/// and o_y - b. `dual` is the change of (a, b) scaled by kappa in the last
/// iteration.
struct AdmmResiduals {
  double state = 0.0;
  double a = 0.0;
  double b = 0.0;
  double dual = 0.0;

  double primal() const { return std::max(state, std::max(a, b)); }
};

/// All ADMM variables for local steps k = 1..K (row k-1); x has K+1 rows.
struct AdmmState {
  MatrixXd x;
  MatrixXd w;   // K x Dw
  MatrixXd ox;  // K x Dx
  MatrixXd oy;  // K x Dy
  MatrixXd a;   // copy of ox
  MatrixXd b;   // copy of oy
  MatrixXd chi;
  MatrixXd mu;
  MatrixXd nu;
  int iteration = 0;

  static AdmmState zeros(int K, Index dx, Index dy, Index dw) {
    AdmmState s;
    s.x = MatrixXd::Zero(K + 1, dx);
    s.w = MatrixXd::Zero(K, dw);
    s.ox = MatrixXd::Zero(K, dx);
    s.oy = MatrixXd::Zero(K, dy);
    s.a = s.ox;
    s.b = s.oy;
    s.chi = s.ox;
    s.mu = s.oy;
    s.nu = s.ox;
    return s;
  }
};

inline AdmmResiduals admm_residuals(const Interval& iv, const AdmmState& s) {
  AdmmResiduals r;
  double st = 0.0;
  for (int k = 1; k <= iv.length(); ++k) {
    const VectorXd e = s.x.row(k).transpose() - iv.F(k) * s.x.row(k - 1).transpose() -
                       iv.G(k) * s.w.row(k - 1).transpose() - s.ox.row(k - 1).transpose();
    st += e.squaredNorm();
  }
  r.state = std::sqrt(st);
  r.a = (s.ox - s.a).norm();
  r.b = (s.oy - s.b).norm();
  return r;
}

/// Cost of the constrained problem at (x, w, o): measurement and prior
/// residuals, process noise energy and l1 outlier penalties. The state
/// equation is not checked here.
inline double generalized_objective(const Interval& iv, const MatrixXd& x, const MatrixXd& w, const OutlierField& o,
                                    double lambda_x, double lambda_y) {
  const VectorXd e0 = x.row(0).transpose() - iv.prior_mean;
  double cost = 0.5 * e0.dot(iv.prior_cov.llt().solve(e0));
  for (int k = 1; k <= iv.length(); ++k) {
    const VectorXd v = iv.meas(k) - iv.H(k) * x.row(k).transpose() - o.oy.row(k - 1).transpose();
    const VectorXd wk = w.row(k - 1).transpose();
    cost += 0.5 * v.dot(iv.R(k).llt().solve(v)) + 0.5 * wk.dot(iv.Q(k).llt().solve(wk));
  }
  return cost + lambda_x * o.ox.cwiseAbs().sum() + lambda_y * o.oy.cwiseAbs().sum();
}

struct AdmmOutput : SmootherOutput {
  MatrixXd w;  // K x Dw process noise estimates
  AdmmState state;
  std::vector<AdmmResiduals> residual_trace;
  AdmmResiduals residuals;
};

/// ADMM on the augmented Lagrangian of the constrained doubly robust
/// problem. Works for any noise gain G_n, including tall ones.
class AdmmSolver {
 public:
  AdmmSolver(const Interval& iv, AdmmConfig cfg) : iv_(iv), cfg_(cfg) {
    if (!(cfg.kappa > 0.0)) throw InvalidArgument("kappa must be positive");
    if (cfg.lambda_x < 0.0 || cfg.lambda_y < 0.0) throw InvalidArgument("lambda must be nonnegative");
    if (!(cfg.tol > 0.0)) throw InvalidArgument("tol must be positive");
    if (cfg.max_iters < 1 || cfg.inner_passes < 1) throw InvalidArgument("iteration counts must be >= 1");
    const int K = iv.length();
    const Index dx = iv.dx(), dy = iv.dy();
    dw_ = iv.model->noise_dim();
    s_ = AdmmState::zeros(K, dx, dy, dw_);
    const int count = iv.model->time_invariant() ? std::min(1, K) : K;
    for (int k = 1; k <= count; ++k) {
      const MatrixXd G = iv.G(k);
      const MatrixXd Qinv = inverse_spd(iv.Q(k), iv.offset + k);
      const MatrixXd Rinv = inverse_spd(iv.R(k), iv.offset + k);
      const MatrixXd Mw = Qinv + cfg.kappa * G.transpose() * G;
      w_gain_.push_back(Mw.llt().solve(G.transpose()));
      r_inv_.push_back(Rinv);
      const MatrixXd My = Rinv + cfg.kappa * MatrixXd::Identity(dy, dy);
      y_gain_.push_back(My.llt().solve(MatrixXd::Identity(dy, dy)));
      gains_.push_back(G);
    }
    offset_.resize(K, dx);
    KalmanTerms cov_terms;
    cov_terms.state_precision = cfg.kappa;
    smoother_.emplace(iv_, cov_terms);
    pinv_fallbacks_ = smoother_->pinv_fallbacks();
  }

  void set_state(AdmmState s) {
    if (s.x.rows() != s_.x.rows() || s.w.rows() != s_.w.rows() || s.w.cols() != s_.w.cols() ||
        s.oy.cols() != s_.oy.cols() || s.ox.cols() != s_.ox.cols()) {
      throw InvalidArgument("ADMM warm start has the wrong shape");
    }
    s_ = std::move(s);
  }
  const AdmmState& state() const { return s_; }

  /// One ADMM iteration. Returns the residuals after it.
  AdmmResiduals iterate() {
    const int K = iv_.length();
    const double kappa = cfg_.kappa;
    const MatrixXd a_prev = s_.a, b_prev = s_.b;
    for (int pass = 0; pass < cfg_.inner_passes; ++pass) {
      // x-step: smoother with state precision kappa and the shifted offset.
      for (int k = 1; k <= K; ++k) {
        offset_.row(k - 1) =
            (G(k) * s_.w.row(k - 1).transpose() + s_.ox.row(k - 1).transpose() - s_.chi.row(k - 1).transpose() / kappa)
                .transpose();
      }
      s_.x = smoother_->smooth(iv_, &offset_, &s_.oy);

      for (int k = 1; k <= K; ++k) {
        const VectorXd d = s_.x.row(k).transpose() - iv_.F(k) * s_.x.row(k - 1).transpose();
        const VectorXd chi = s_.chi.row(k - 1).transpose();
        const VectorXd w = pick(w_gain_, k) * (chi + kappa * (d - s_.ox.row(k - 1).transpose()));
        s_.w.row(k - 1) = w.transpose();
        const VectorXd v = iv_.meas(k) - iv_.H(k) * s_.x.row(k).transpose();
        s_.oy.row(k - 1) = (pick(y_gain_, k) * (pick(r_inv_, k) * v - s_.mu.row(k - 1).transpose() +
                                                kappa * s_.b.row(k - 1).transpose()))
                               .transpose();
        s_.ox.row(k - 1) = (0.5 * (chi / kappa + d - G(k) * w + s_.a.row(k - 1).transpose() -
                                   s_.nu.row(k - 1).transpose() / kappa))
                               .transpose();
      }
    }
    for (int k = 1; k <= K; ++k) {
      for (Index d = 0; d < s_.b.cols(); ++d) {
        s_.b(k - 1, d) = soft_threshold(kappa * s_.oy(k - 1, d) + s_.mu(k - 1, d), cfg_.lambda_y) / kappa;
      }
      for (Index d = 0; d < s_.a.cols(); ++d) {
        s_.a(k - 1, d) = soft_threshold(kappa * s_.ox(k - 1, d) + s_.nu(k - 1, d), cfg_.lambda_x) / kappa;
      }
    }
    for (int k = 1; k <= K; ++k) {
      const VectorXd e = s_.x.row(k).transpose() - iv_.F(k) * s_.x.row(k - 1).transpose() -
                         G(k) * s_.w.row(k - 1).transpose() - s_.ox.row(k - 1).transpose();
      s_.chi.row(k - 1) += kappa * e.transpose();
    }
    s_.mu += kappa * (s_.oy - s_.b);
    s_.nu += kappa * (s_.ox - s_.a);
    ++s_.iteration;

    AdmmResiduals r = admm_residuals(iv_, s_);
    r.dual = kappa * std::sqrt((s_.a - a_prev).squaredNorm() + (s_.b - b_prev).squaredNorm());
    return r;
  }

  /// Iterates until the primal residuals and the change of (a, b) are all
  /// below tol, or max_iters is reached.
  AdmmOutput solve(const std::function<void(int, const AdmmResiduals&)>& on_iter = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    AdmmOutput out;
    bool converged = false;
    AdmmResiduals r;
    for (int j = 0; j < cfg_.max_iters; ++j) {
      r = iterate();
      out.residual_trace.push_back(r);
      out.objective_trace.push_back(objective());
      if (on_iter) on_iter(s_.iteration, r);
      if (r.primal() < cfg_.tol && r.dual < cfg_.tol) {
        converged = true;
        break;
      }
    }
    out.x = s_.x;
    out.outliers = {s_.a, s_.b};
    out.w = s_.w;
    out.iterations = static_cast<int>(out.residual_trace.size());
    out.converged = converged;
    out.residuals = r;
    out.pinv_fallbacks = pinv_fallbacks_;
    out.state = s_;
    out.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!converged) {
      out.warnings.push_back("ADMM stopped at the iteration cap; residuals state=" + std::to_string(r.state) +
                             " a=" + std::to_string(r.a) + " b=" + std::to_string(r.b));
    }
    return out;
  }

  /// Cost at the current (x, w) with the sparse copies (a, b) as outliers.
  double objective() const {
    return generalized_objective(iv_, s_.x, s_.w, OutlierField{s_.a, s_.b}, cfg_.lambda_x, cfg_.lambda_y);
  }

 private:
  static MatrixXd inverse_spd(const MatrixXd& m, int step) {
    Eigen::LLT<MatrixXd> llt(m);
    if (llt.info() != Eigen::Success) throw SingularMatrix("covariance is not positive definite", step);
    return llt.solve(MatrixXd::Identity(m.rows(), m.cols()));
  }
  static const MatrixXd& pick(const std::vector<MatrixXd>& v, int k) {
    return v.size() == 1 ? v.front() : v[static_cast<std::size_t>(k - 1)];
  }
  const MatrixXd& G(int k) const { return pick(gains_, k); }

  Interval iv_;
  AdmmConfig cfg_;
  Index dw_ = 0;
  AdmmState s_;
  std::vector<MatrixXd> w_gain_, y_gain_, r_inv_, gains_;
  MatrixXd offset_;
  std::optional<SmootherGains> smoother_;  // gains with state precision kappa
  int pinv_fallbacks_ = 0;
};

inline AdmmOutput admm_solve(const Interval& iv, const AdmmConfig& cfg, const AdmmState* init = nullptr) {
  AdmmSolver solver(iv, cfg);
  if (init) solver.set_state(*init);
  return solver.solve();
}

/// Fixed-interval doubly robust smoother for the generalized model.
inline AdmmOutput admm_drs(const StateSpaceModel& model, const ObservationBatch& obs, const AdmmConfig& cfg) {
  require_valid(model, obs);
  return admm_solve(full_interval(model, obs), cfg);
}

}  // namespace drs
