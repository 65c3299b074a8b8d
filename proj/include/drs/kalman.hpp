#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "drs/error.hpp"
#include "drs/model.hpp"

namespace drs {

/// Per-step modifications of the nominal Gauss-Markov chain seen by the
/// filter. All matrices are indexed by local step k (row k-1).
struct KalmanTerms {
  /// o_{x,k}: added to the state prediction.
  const MatrixXd* state_offset = nullptr;
  /// o_{y,k}: subtracted from the measurement.
  const MatrixXd* meas_offset = nullptr;
  /// When set, the state-equation covariance is I / state_precision instead
  /// of G Q G^T (the quadratic penalty of the ADMM x-step).
  std::optional<double> state_precision;
  /// Measurement components retained at each local step. Null keeps all.
  /// Dropping components marginalizes them out of the Gaussian likelihood.
  const std::vector<std::vector<int>>* kept_rows = nullptr;
};

struct FilterState {
  std::vector<VectorXd> filtered_mean;   // x_{k|k}, k = 0..K
  std::vector<MatrixXd> filtered_cov;    // Sigma_{k|k}
  std::vector<VectorXd> predicted_mean;  // x_{k|k-1}; entry 0 is the prior
  std::vector<MatrixXd> predicted_cov;
};

/// Estimated trajectory and outliers plus solver diagnostics. Produced by
/// every smoother in the library.
struct SmootherOutput {
  MatrixXd x;  // (K+1) x Dx, row k is x_hat_k
  OutlierField outliers;
  std::vector<double> objective_trace;
  int iterations = 0;
  bool converged = true;
  double wall_time = 0.0;  // seconds
  int pinv_fallbacks = 0;
  std::vector<std::string> warnings;
};

namespace detail {

inline void symmetrize(MatrixXd& m) { m = 0.5 * (m + m.transpose()).eval(); }

/// Solves for the RTS gain J = P_f F^T P_p^{-1}. Falls back to a
/// pseudo-inverse when P_p is numerically singular (condition > 1e12).
inline MatrixXd rts_gain(const MatrixXd& Pf, const MatrixXd& F, const MatrixXd& Pp, bool& used_pinv) {
  Eigen::LLT<MatrixXd> llt(Pp);
  used_pinv = false;
  if (llt.info() == Eigen::Success && llt.rcond() > 1e-12) {
    return llt.solve(F * Pf).transpose();
  }
  used_pinv = true;
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(Pp);
  const VectorXd& ev = eig.eigenvalues();
  const double cutoff = std::max(ev.cwiseAbs().maxCoeff(), 1e-300) * 1e-12;
  VectorXd inv = ev.unaryExpr([cutoff](double v) { return std::abs(v) > cutoff ? 1.0 / v : 0.0; });
  MatrixXd pinv = eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
  return Pf * F.transpose() * pinv;
}

}  // namespace detail

/// Kalman filter over an interval. Joseph-form covariance update with
/// symmetrization after each step.
inline FilterState kalman_filter(const Interval& iv, const KalmanTerms& terms = {}) {
  const int K = iv.length();
  const Index dx = iv.dx();
  FilterState fs;
  fs.filtered_mean.reserve(static_cast<std::size_t>(K + 1));
  fs.filtered_cov.reserve(static_cast<std::size_t>(K + 1));
  fs.predicted_mean.reserve(static_cast<std::size_t>(K + 1));
  fs.predicted_cov.reserve(static_cast<std::size_t>(K + 1));
  fs.filtered_mean.push_back(iv.prior_mean);
  fs.filtered_cov.push_back(iv.prior_cov);
  fs.predicted_mean.push_back(iv.prior_mean);
  fs.predicted_cov.push_back(iv.prior_cov);

  const bool invariant = iv.model->time_invariant();
  MatrixXd state_cov = terms.state_precision
                           ? MatrixXd(MatrixXd::Identity(dx, dx) / *terms.state_precision)
                           : iv.process_cov(1);
  const MatrixXd I = MatrixXd::Identity(dx, dx);

  for (int k = 1; k <= K; ++k) {
    const MatrixXd& F = iv.F(k);
    if (!invariant && !terms.state_precision) state_cov = iv.process_cov(k);
    VectorXd xp = F * fs.filtered_mean.back();
    if (terms.state_offset) xp += terms.state_offset->row(k - 1).transpose();
    MatrixXd Pp = F * fs.filtered_cov.back() * F.transpose() + state_cov;
    detail::symmetrize(Pp);

    VectorXd y = iv.meas(k);
    if (terms.meas_offset) y -= terms.meas_offset->row(k - 1).transpose();

    VectorXd xf;
    MatrixXd Pf;
    const std::vector<int>* keep = terms.kept_rows ? &(*terms.kept_rows)[static_cast<std::size_t>(k - 1)] : nullptr;
    if (keep && keep->empty()) {
      xf = xp;
      Pf = Pp;
    } else {
      MatrixXd H = iv.H(k);
      MatrixXd R = iv.R(k);
      if (keep && static_cast<Index>(keep->size()) < H.rows()) {
        H = MatrixXd(H(*keep, Eigen::all));
        R = MatrixXd(R(*keep, *keep));
        y = VectorXd(y(*keep));
      }
      MatrixXd S = H * Pp * H.transpose() + R;
      Eigen::LLT<MatrixXd> llt(S);
      if (llt.info() != Eigen::Success || !S.allFinite()) {
        throw SingularMatrix("innovation covariance is not invertible", iv.offset + k);
      }
      MatrixXd K_gain = llt.solve(H * Pp).transpose();
      xf = xp + K_gain * (y - H * xp);
      const MatrixXd IKH = I - K_gain * H;
      Pf = IKH * Pp * IKH.transpose() + K_gain * R * K_gain.transpose();
      detail::symmetrize(Pf);
    }
    fs.predicted_mean.push_back(std::move(xp));
    fs.predicted_cov.push_back(std::move(Pp));
    fs.filtered_mean.push_back(std::move(xf));
    fs.filtered_cov.push_back(std::move(Pf));
  }
  return fs;
}

inline FilterState kalman_filter(const StateSpaceModel& model, const ObservationBatch& obs,
                                 const OutlierField* compensation = nullptr) {
  require_valid(model, obs);
  KalmanTerms terms;
  if (compensation) {
    terms.state_offset = &compensation->ox;
    terms.meas_offset = &compensation->oy;
  }
  return kalman_filter(full_interval(model, obs), terms);
}

/// Forward Kalman filter followed by the Rauch-Tung-Striebel backward pass.
/// Minimizes the (compensated) weighted least-squares smoothing cost over
/// the interval. Linear in the interval length.
inline SmootherOutput kalman_smoother(const Interval& iv, const KalmanTerms& terms = {}) {
  const FilterState fs = kalman_filter(iv, terms);
  const int K = iv.length();
  SmootherOutput out;
  out.x.resize(K + 1, iv.dx());
  VectorXd next = fs.filtered_mean[static_cast<std::size_t>(K)];
  out.x.row(K) = next.transpose();
  for (int k = K - 1; k >= 0; --k) {
    const auto uk = static_cast<std::size_t>(k);
    bool pinv = false;
    const MatrixXd J = detail::rts_gain(fs.filtered_cov[uk], iv.F(k + 1), fs.predicted_cov[uk + 1], pinv);
    if (pinv) ++out.pinv_fallbacks;
    next = fs.filtered_mean[uk] + J * (next - fs.predicted_mean[uk + 1]);
    out.x.row(k) = next.transpose();
  }
  if (out.pinv_fallbacks > 0) {
    out.warnings.push_back("RTS gain used a pseudo-inverse at " + std::to_string(out.pinv_fallbacks) + " step(s)");
  }
  out.outliers = OutlierField::zeros(K, iv.dx(), iv.dy());
  if (terms.state_offset) out.outliers.ox = *terms.state_offset;
  if (terms.meas_offset) out.outliers.oy = *terms.meas_offset;
  out.iterations = 1;
  return out;
}

/// Filter and RTS gains of an interval. They depend on the covariances only,
/// so a solver that reruns the smoother with new offsets can keep them and
/// redo just the mean recursions. smooth() matches kalman_smoother() to
/// rounding.
class SmootherGains {
 public:
  /// Offsets in `terms` are ignored; the other fields shape the gains.
  SmootherGains(const Interval& iv, const KalmanTerms& terms = {}) {
    if (terms.kept_rows) keep_ = *terms.kept_rows;
    KalmanTerms cov_terms;
    cov_terms.state_precision = terms.state_precision;
    cov_terms.kept_rows = terms.kept_rows;
    const FilterState fs = kalman_filter(iv, cov_terms);
    const int K = iv.length();
    gain_.resize(static_cast<std::size_t>(K));
    rts_.resize(static_cast<std::size_t>(K));
    for (int k = 1; k <= K; ++k) {
      const auto uk = static_cast<std::size_t>(k);
      const std::vector<int>* keep = kept(k);
      if (keep && keep->empty()) continue;
      MatrixXd H = iv.H(k);
      MatrixXd R = iv.R(k);
      if (keep && static_cast<Index>(keep->size()) < H.rows()) {
        H = MatrixXd(H(*keep, Eigen::all));
        R = MatrixXd(R(*keep, *keep));
      }
      const MatrixXd& Pp = fs.predicted_cov[uk];
      const MatrixXd S = H * Pp * H.transpose() + R;
      gain_[uk - 1] = S.llt().solve(H * Pp).transpose();
    }
    for (int k = K - 1; k >= 0; --k) {
      const auto uk = static_cast<std::size_t>(k);
      bool pinv = false;
      rts_[uk] = detail::rts_gain(fs.filtered_cov[uk], iv.F(k + 1), fs.predicted_cov[uk + 1], pinv);
      if (pinv) ++pinv_fallbacks_;
    }
  }

  /// Smoothed means with the given offsets (either may be null).
  MatrixXd smooth(const Interval& iv, const MatrixXd* state_offset, const MatrixXd* meas_offset) const {
    const int K = iv.length();
    const Index dx = iv.dx();
    MatrixXd xf(dx, K + 1), xp(dx, K + 1);  // column k is step k
    VectorXd p(dx), y(iv.dy());
    xf.col(0) = iv.prior_mean;
    xp.col(0) = iv.prior_mean;
    for (int k = 1; k <= K; ++k) {
      const auto uk = static_cast<std::size_t>(k);
      p.noalias() = iv.F(k) * xf.col(k - 1);
      if (state_offset) p += state_offset->row(k - 1).transpose();
      y = iv.meas(k);
      if (meas_offset) y -= meas_offset->row(k - 1).transpose();
      const std::vector<int>* keep = kept(k);
      if (keep && keep->empty()) {
        xf.col(k) = p;
      } else if (keep && static_cast<Index>(keep->size()) < y.size()) {
        const MatrixXd H = iv.H(k)(*keep, Eigen::all);
        xf.col(k) = p + gain_[uk - 1] * (VectorXd(y(*keep)) - H * p);
      } else {
        y.noalias() -= iv.H(k) * p;
        xf.col(k) = p;
        xf.col(k).noalias() += gain_[uk - 1] * y;
      }
      xp.col(k) = p;
    }
    MatrixXd x(K + 1, dx);
    VectorXd next = xf.col(K), d(dx);
    x.row(K) = next.transpose();
    for (int k = K - 1; k >= 0; --k) {
      d = next - xp.col(k + 1);
      next = xf.col(k);
      next.noalias() += rts_[static_cast<std::size_t>(k)] * d;
      x.row(k) = next.transpose();
    }
    return x;
  }

  int pinv_fallbacks() const { return pinv_fallbacks_; }

 private:
  const std::vector<int>* kept(int k) const {
    return keep_.empty() ? nullptr : &keep_[static_cast<std::size_t>(k - 1)];
  }

  std::vector<MatrixXd> gain_;  // Kalman gain at step k in entry k-1
  std::vector<MatrixXd> rts_;   // RTS gain from k+1 to k in entry k
  std::vector<std::vector<int>> keep_;
  int pinv_fallbacks_ = 0;
};

/// Fixed-interval Kalman smoother of the full batch, optionally on
/// outlier-compensated data.
inline SmootherOutput fixed_interval_ks(const StateSpaceModel& model, const ObservationBatch& obs,
                                        const OutlierField* compensation = nullptr) {
  require_valid(model, obs);
  KalmanTerms terms;
  if (compensation) {
    terms.state_offset = &compensation->ox;
    terms.meas_offset = &compensation->oy;
  }
  return kalman_smoother(full_interval(model, obs), terms);
}

/// Window [start, end] of the model anchored at the Kalman filter state at
/// `start`. The filter must have been run on the same model and data.
inline Interval anchored_window(const StateSpaceModel& model, const ObservationBatch& obs, const FilterState& fs,
                                int start, int end) {
  const auto s = static_cast<std::size_t>(start);
  return Interval{&model, std::span<const VectorXd>(obs.y).subspan(s, static_cast<std::size_t>(end - start)),
                  start, fs.filtered_mean[s], fs.filtered_cov[s]};
}

/// Fixed-lag Kalman smoother: the estimate of x_n uses measurements up to
/// n + lag and smooths over [n - window, n + lag] from the filter anchor at
/// n - window. Both ends are clipped to [0, N]. Returns (N+1) x Dx.
inline MatrixXd fixed_lag_ks(const StateSpaceModel& model, const ObservationBatch& obs, int lag, int window) {
  if (lag < 0 || window < 0) throw InvalidArgument("lag and window must be nonnegative");
  require_valid(model, obs);
  const int N = obs.horizon();
  const FilterState fs = kalman_filter(full_interval(model, obs));
  MatrixXd out(N + 1, model.state_dim());
  for (int n = 0; n <= N; ++n) {
    const int start = std::max(0, n - window);
    const int end = std::min(N, n + lag);
    const SmootherOutput s = kalman_smoother(anchored_window(model, obs, fs, start, end));
    out.row(n) = s.x.row(n - start);
  }
  return out;
}

}  // namespace drs
