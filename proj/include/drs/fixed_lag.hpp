#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "drs/admm.hpp"
#include "drs/coordinate.hpp"
#include "drs/kalman.hpp"

namespace drs {

/// Doubly robust problem on the window [start, end] anchored at the Kalman
/// filter estimate at `start`, solved to convergence. Coordinate descent for
/// G = I, ADMM otherwise. Row k of the result is the state at start + k.
inline SmootherOutput fixed_lag_drs_window(const StateSpaceModel& model, const ObservationBatch& obs,
                                           const FilterState& fs, int start, int end, const DrsConfig& cd,
                                           const AdmmConfig& admm) {
  const Interval iv = anchored_window(model, obs, fs, start, end);
  if (model.generalized()) return admm_solve(iv, admm);
  return drs_solve(iv, cd);
}

/// Reference windowed solve for estimating x_n from y up to n + lag with the
/// anchor at n - window. Requires n - window >= 0 and n + lag <= N.
inline SmootherOutput fixed_lag_drs_batch(const StateSpaceModel& model, const ObservationBatch& obs, int n, int lag,
                                          int window, const DrsConfig& cd, const AdmmConfig& admm = {}) {
  require_valid(model, obs);
  if (lag < 0 || window < 0) throw InvalidArgument("lag and window must be nonnegative");
  if (n - window < 0 || n + lag > obs.horizon()) throw InvalidArgument("window leaves the observation interval");
  const FilterState fs = kalman_filter(full_interval(model, obs));
  AdmmConfig a = admm;
  a.lambda_x = cd.lambda_x;
  a.lambda_y = cd.lambda_y;
  return fixed_lag_drs_window(model, obs, fs, n - window, n + lag, cd, a);
}

struct OnlineConfig {
  int lag = 10;
  int window = 10;
  int sweeps = 50;  // J: coordinate-descent cycles or ADMM iterations per step
  double lambda_x = 0.05;
  double lambda_y = 0.01;
  double kappa = 0.05;  // ADMM only
  double tol = 1e-12;   // early exit inside a step
  double step_tol = 0.0;  // coordinate descent only, see DrsConfig
  /// Advance the anchor filter on outlier-compensated data taken from the
  /// window solution instead of the raw measurements.
  bool reanchor = false;
};

struct Emission {
  int n = 0;
  VectorXd x;
};

/// Online fixed-lag doubly robust smoother. Each new measurement y_t shifts
/// the window to [t - lag - window, t], warm-starts the outlier variables
/// on the overlap with the previous window, runs J iterations and emits the
/// estimate of x_{t - lag}.
class OnlineDrs {
 public:
  OnlineDrs(const StateSpaceModel& model, OnlineConfig cfg) : model_(model), cfg_(cfg) {
    if (cfg.lag < 0 || cfg.window < 0) throw InvalidArgument("lag and window must be nonnegative");
    if (cfg.sweeps < 1) throw InvalidArgument("sweeps per step must be >= 1");
    if (auto rep = validate(model); !rep.ok()) throw InvalidArgument("invalid model: " + rep.failures.front());
    anchor_mean_ = model.m0;
    anchor_cov_ = model.Sigma0;
  }

  /// Adds y_t (t = 1, 2, ...) and returns the estimate of x_{t-lag} once
  /// t >= lag.
  std::vector<Emission> push(const VectorXd& y) {
    if (y.size() != model_.meas_dim() || !y.allFinite()) throw InvalidArgument("measurement has wrong size or NaN");
    if (model_.sequence_length() > 1 && t_ + 1 > static_cast<int>(model_.sequence_length())) {
      throw InvalidArgument("stream is longer than the time-varying model");
    }
    buffer_.push_back(y);
    ++t_;
    std::vector<Emission> out;
    const int n = t_ - cfg_.lag;
    if (n >= 0) out.push_back(emit(n, t_));
    return out;
  }

  /// Emits the remaining estimates x_{t-lag+1..t} with a shrinking lag.
  std::vector<Emission> finish() {
    std::vector<Emission> out;
    for (int n = std::max(0, t_ - cfg_.lag + 1); n <= t_; ++n) out.push_back(emit(n, t_));
    return out;
  }

  int time() const { return t_; }
  const SmootherOutput& last_window() const { return last_; }
  int last_window_start() const { return last_start_; }
  /// Final ADMM variables of the last window (generalized models only).
  const std::optional<AdmmState>& last_admm_state() const { return admm_prev_; }

 private:
  Emission emit(int n, int end) {
    const int start = std::max(0, n - cfg_.window);
    advance_anchor(start);
    const std::span<const VectorXd> ys(buffer_.data() + (start - buffer_start_), static_cast<std::size_t>(end - start));
    const Interval iv{&model_, ys, start, anchor_mean_, anchor_cov_};
    const int K = end - start;
    const Index dx = model_.state_dim(), dy = model_.meas_dim();

    if (model_.generalized()) {
      AdmmConfig c{cfg_.lambda_x, cfg_.lambda_y, cfg_.kappa, cfg_.sweeps, cfg_.tol};
      AdmmSolver solver(iv, c);
      if (admm_prev_) solver.set_state(shift(*admm_prev_, last_start_, start, K, model_.noise_dim()));
      AdmmOutput a = solver.solve();
      admm_prev_ = a.state;
      last_ = std::move(a);
    } else {
      DrsConfig c{cfg_.lambda_x, cfg_.lambda_y, cfg_.sweeps, cfg_.tol, cfg_.step_tol};
      OutlierField init = OutlierField::zeros(K, dx, dy);
      if (have_prev_) {
        for (int k = 1; k <= K; ++k) {
          const int src = start + k - last_start_;  // local step in the previous window
          if (src >= 1 && src <= last_.outliers.ox.rows()) {
            init.ox.row(k - 1) = last_.outliers.ox.row(src - 1);
            init.oy.row(k - 1) = last_.outliers.oy.row(src - 1);
          }
        }
      }
      last_ = drs_solve(iv, c, &init);
    }
    have_prev_ = true;
    last_start_ = start;
    return {n, last_.x.row(n - start).transpose()};
  }

  /// Moves the anchor filter forward to time `start` and drops buffered
  /// measurements it no longer needs.
  void advance_anchor(int start) {
    while (anchor_time_ < start) {
      const int t = anchor_time_ + 1;
      VectorXd y = buffer_[static_cast<std::size_t>(t - 1 - buffer_start_)];
      VectorXd offset = VectorXd::Zero(model_.state_dim());
      if (cfg_.reanchor && have_prev_) {
        const int src = t - last_start_;
        if (src >= 1 && src <= last_.outliers.oy.rows()) {
          y -= last_.outliers.oy.row(src - 1).transpose();
          offset = last_.outliers.ox.row(src - 1).transpose();
        }
      }
      const std::vector<VectorXd> one{y};
      const Interval step{&model_, std::span<const VectorXd>(one), t - 1, anchor_mean_, anchor_cov_};
      MatrixXd off = offset.transpose();
      KalmanTerms terms;
      terms.state_offset = &off;
      const FilterState fs = kalman_filter(step, terms);
      anchor_mean_ = fs.filtered_mean[1];
      anchor_cov_ = fs.filtered_cov[1];
      anchor_time_ = t;
    }
    const int drop = anchor_time_ - buffer_start_;
    if (drop > 0) {
      buffer_.erase(buffer_.begin(), buffer_.begin() + drop);
      buffer_start_ = anchor_time_;
    }
  }

  /// Re-indexes ADMM variables from the previous window to the new one;
  /// entries outside the overlap start at zero.
  static AdmmState shift(const AdmmState& prev, int prev_start, int start, int K, Index dw) {
    AdmmState s = AdmmState::zeros(K, prev.x.cols(), prev.oy.cols(), dw);
    const int prevK = static_cast<int>(prev.w.rows());
    for (int k = 0; k <= K; ++k) {
      const int src = start + k - prev_start;
      if (src >= 0 && src <= prevK) s.x.row(k) = prev.x.row(src);
      if (k >= 1 && src >= 1 && src <= prevK) {
        for (auto [dst, from] : {std::pair{&s.w, &prev.w}, {&s.ox, &prev.ox}, {&s.oy, &prev.oy}, {&s.a, &prev.a},
                                 {&s.b, &prev.b}, {&s.chi, &prev.chi}, {&s.mu, &prev.mu}, {&s.nu, &prev.nu}}) {
          dst->row(k - 1) = from->row(src - 1);
        }
      }
    }
    return s;
  }

  const StateSpaceModel& model_;
  OnlineConfig cfg_;
  std::vector<VectorXd> buffer_;  // y_{buffer_start_+1} onwards
  int buffer_start_ = 0;
  int t_ = 0;
  int anchor_time_ = 0;
  VectorXd anchor_mean_;
  MatrixXd anchor_cov_;
  bool have_prev_ = false;
  int last_start_ = 0;
  SmootherOutput last_;
  std::optional<AdmmState> admm_prev_;
};

/// Runs the online smoother over a whole batch. Returns (N+1) x Dx.
inline MatrixXd online_fixed_lag_drs(const StateSpaceModel& model, const ObservationBatch& obs,
                                     const OnlineConfig& cfg) {
  require_valid(model, obs);
  OnlineDrs online(model, cfg);
  MatrixXd out(obs.horizon() + 1, model.state_dim());
  auto store = [&](const std::vector<Emission>& em) {
    for (const auto& e : em) out.row(e.n) = e.x.transpose();
  };
  for (const auto& y : obs.y) store(online.push(y));
  store(online.finish());
  return out;
}

/// Fixed-lag doubly robust smoother solved to convergence in every window
/// (no warm start). Returns (N+1) x Dx.
inline MatrixXd fixed_lag_drs(const StateSpaceModel& model, const ObservationBatch& obs, int lag, int window,
                              const DrsConfig& cd, const AdmmConfig& admm = {}) {
  require_valid(model, obs);
  if (lag < 0 || window < 0) throw InvalidArgument("lag and window must be nonnegative");
  const int N = obs.horizon();
  const FilterState fs = kalman_filter(full_interval(model, obs));
  AdmmConfig a = admm;
  a.lambda_x = cd.lambda_x;
  a.lambda_y = cd.lambda_y;
  MatrixXd out(N + 1, model.state_dim());
  for (int n = 0; n <= N; ++n) {
    const int start = std::max(0, n - window);
    const int end = std::min(N, n + lag);
    out.row(n) = fixed_lag_drs_window(model, obs, fs, start, end, cd, a).x.row(n - start);
  }
  return out;
}

}  // namespace drs
