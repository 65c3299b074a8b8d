#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "drs/block_tridiagonal.hpp"
#include "drs/kalman.hpp"
#include "drs/model.hpp"

namespace drs {

/// Huber cost: r^2/2 inside [-lambda, lambda], linear with matching slope
/// outside.
inline double huber_rho(double r, double lambda) {
  const double a = std::abs(r);
  return a <= lambda ? 0.5 * r * r : lambda * a - 0.5 * lambda * lambda;
}

/// Rows of the stacked regression after whitening each block by the inverse
/// Cholesky factor of its covariance. Row i reads
///   target_i = lo_i . x_{k_i - 1} + hi_i . x_{k_i} + noise_i,
/// with unit-variance noise_i. Prior rows have k = 0 and no lo part.
struct WhitenedRows {
  enum class Kind { Prior, State, Measurement };
  struct Row {
    Kind kind;
    int k;  // block of the hi coefficients
    int d;  // component inside its equation
    VectorXd lo;
    VectorXd hi;
    double target;
  };
  Index dx = 0;
  int horizon = 0;
  std::vector<Row> rows;

  double residual(std::size_t i, const MatrixXd& x) const {
    const Row& r = rows[i];
    double fit = r.hi.dot(x.row(r.k).transpose());
    if (r.lo.size()) fit += r.lo.dot(x.row(r.k - 1).transpose());
    return r.target - fit;
  }

  /// Weighted least squares over the rows with weight > 0. Throws
  /// SingularMatrix if the selected rows do not determine x.
  MatrixXd solve(const std::vector<double>& weight, double ridge = 0.0) const {
    BlockTridiagonal M(horizon + 1, dx);
    VectorXd rhs = VectorXd::Zero((horizon + 1) * dx);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double w = weight[i];
      if (w <= 0.0) continue;
      const Row& r = rows[i];
      M.diag(r.k).noalias() += w * r.hi * r.hi.transpose();
      rhs.segment(r.k * dx, dx) += w * r.target * r.hi;
      if (r.lo.size()) {
        M.diag(r.k - 1).noalias() += w * r.lo * r.lo.transpose();
        M.lower(r.k).noalias() += w * r.hi * r.lo.transpose();
        rhs.segment((r.k - 1) * dx, dx) += w * r.target * r.lo;
      }
    }
    if (ridge > 0.0) {
      for (Index k = 0; k <= horizon; ++k) M.diag(k) += ridge * MatrixXd::Identity(dx, dx);
    }
    return unstack_states(M.solve(rhs), dx);
  }
};

inline WhitenedRows whiten_rows(const StateSpaceModel& model, const ObservationBatch& obs) {
  require_valid(model, obs);
  if (model.generalized()) {
    throw UnsupportedModel("row-wise robust baselines need G_n = I; the stacked regression is undefined otherwise");
  }
  auto inv_chol = [](const MatrixXd& cov) {
    Eigen::LLT<MatrixXd> llt(cov);
    return MatrixXd(llt.matrixL().solve(MatrixXd::Identity(cov.rows(), cov.cols())));
  };
  WhitenedRows W;
  W.dx = model.state_dim();
  W.horizon = obs.horizon();
  const Index dx = W.dx, dy = model.meas_dim();
  const MatrixXd L0 = inv_chol(model.Sigma0);
  const VectorXd t0 = L0 * model.m0;
  for (Index d = 0; d < dx; ++d) {
    W.rows.push_back({WhitenedRows::Kind::Prior, 0, static_cast<int>(d), VectorXd(), L0.row(d).transpose(), t0(d)});
  }
  for (int n = 1; n <= W.horizon; ++n) {
    const MatrixXd Lq = inv_chol(model.Q(n));
    const MatrixXd lo = -Lq * model.F(n);
    for (Index d = 0; d < dx; ++d) {
      W.rows.push_back({WhitenedRows::Kind::State, n, static_cast<int>(d), lo.row(d).transpose(),
                        Lq.row(d).transpose(), 0.0});
    }
  }
  for (int n = 1; n <= W.horizon; ++n) {
    const MatrixXd Lr = inv_chol(model.R(n));
    const MatrixXd hi = Lr * model.H(n);
    const VectorXd t = Lr * obs.y[static_cast<std::size_t>(n - 1)];
    for (Index d = 0; d < dy; ++d) {
      W.rows.push_back({WhitenedRows::Kind::Measurement, n, static_cast<int>(d), VectorXd(), hi.row(d).transpose(),
                        t(d)});
    }
  }
  return W;
}

struct HuberConfig {
  double lambda_x = 1.345;  // state-equation rows
  double lambda_y = 1.345;  // measurement rows
  int max_iters = 200;
  double tol = 1e-10;  // largest change of an x entry between iterations
};

/// Huber objective on whitened rows: quadratic prior plus rho on the rest.
/// Rows with weight zero in `active` are left out. Residuals and the sum are
/// formed in long double; near convergence the double-precision cost is
/// dominated by cancellation in target - h^T x.
inline double huber_objective(const WhitenedRows& W, const MatrixXd& x, const HuberConfig& cfg,
                              const std::vector<double>* active = nullptr) {
  auto rho = [](long double r, long double lambda) {
    const long double a = r < 0 ? -r : r;
    return a <= lambda ? 0.5L * r * r : lambda * a - 0.5L * lambda * lambda;
  };
  long double cost = 0.0L;
  for (std::size_t i = 0; i < W.rows.size(); ++i) {
    if (active && (*active)[i] <= 0.0) continue;
    const auto& row = W.rows[i];
    long double r = row.target;
    for (Index d = 0; d < row.hi.size(); ++d) r -= static_cast<long double>(row.hi(d)) * x(row.k, d);
    for (Index d = 0; d < row.lo.size(); ++d) r -= static_cast<long double>(row.lo(d)) * x(row.k - 1, d);
    switch (row.kind) {
      case WhitenedRows::Kind::Prior:
        cost += 0.5L * r * r;
        break;
      case WhitenedRows::Kind::State:
        cost += rho(r, cfg.lambda_x);
        break;
      case WhitenedRows::Kind::Measurement:
        cost += rho(r, cfg.lambda_y);
        break;
    }
  }
  return static_cast<double>(cost);
}

/// Huber M-estimate by iteratively reweighted least squares with weights
/// min(1, lambda / |r|) on the whitened residuals, starting from the plain
/// least-squares fit. `active` restricts the fit to a subset of rows.
inline SmootherOutput huber_irls(const WhitenedRows& W, const HuberConfig& cfg,
                                 const std::vector<double>* active = nullptr) {
  if (!(cfg.lambda_x > 0.0 && cfg.lambda_y > 0.0)) throw InvalidArgument("Huber threshold must be positive");
  const auto t0 = std::chrono::steady_clock::now();
  SmootherOutput out;
  std::vector<double> weight = active ? *active : std::vector<double>(W.rows.size(), 1.0);
  auto fit = [&](const std::vector<double>& w) {
    try {
      return W.solve(w);
    } catch (const SingularMatrix&) {
      out.warnings.push_back("reweighted normal matrix was singular; retried with a 1e-10 ridge");
      return W.solve(w, 1e-10);
    }
  };
  MatrixXd x = fit(weight);
  out.objective_trace.push_back(huber_objective(W, x, cfg, active));
  out.converged = false;
  for (int it = 0; it < cfg.max_iters; ++it) {
    for (std::size_t i = 0; i < W.rows.size(); ++i) {
      if (active && (*active)[i] <= 0.0) {
        weight[i] = 0.0;
        continue;
      }
      const auto kind = W.rows[i].kind;
      if (kind == WhitenedRows::Kind::Prior) {
        weight[i] = 1.0;
        continue;
      }
      const double lambda = kind == WhitenedRows::Kind::State ? cfg.lambda_x : cfg.lambda_y;
      const double r = std::abs(W.residual(i, x));
      weight[i] = r <= lambda ? 1.0 : lambda / r;
    }
    MatrixXd next = fit(weight);
    const double step = (next - x).cwiseAbs().maxCoeff();
    x = std::move(next);
    out.objective_trace.push_back(huber_objective(W, x, cfg, active));
    ++out.iterations;
    if (step <= cfg.tol) {
      out.converged = true;
      break;
    }
  }
  out.x = std::move(x);
  out.outliers = OutlierField::zeros(W.horizon, W.dx, 0);
  out.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!out.converged) out.warnings.push_back("IRLS hit max_iters before converging");
  return out;
}

inline SmootherOutput huber_smoother(const StateSpaceModel& model, const ObservationBatch& obs,
                                     const HuberConfig& cfg = {}) {
  const WhitenedRows W = whiten_rows(model, obs);
  SmootherOutput out = huber_irls(W, cfg);
  out.outliers = OutlierField::zeros(obs.horizon(), model.state_dim(), model.meas_dim());
  return out;
}

enum class RansacSampling {
  Measurement,  // all state rows plus a random set of measurement rows
  State,        // all measurement rows plus half of the state rows at random
};

struct RansacConfig {
  int draws = 100;
  double threshold = 1.345;  // on whitened residuals
  RansacSampling sampling = RansacSampling::Measurement;
  std::uint64_t seed = 0;
  bool then_huber = true;
  HuberConfig huber;
};

struct RansacOutput : SmootherOutput {
  std::vector<bool> inlier;  // per whitened row, prior rows always true
  int consensus = 0;
  int valid_draws = 0;
  int ridged_draws = 0;  // rank-deficient samples fitted with a 1e-10 ridge
};

/// Smallest h for which [H; H F; ...; H F^{h-1}] has full column rank; Dx
/// when the pair is not observable.
inline int observability_index(const MatrixXd& F, const MatrixXd& H) {
  const Index dx = F.rows();
  MatrixXd O(0, dx);
  MatrixXd block = H;
  for (int h = 1; h <= dx; ++h) {
    MatrixXd next(O.rows() + block.rows(), dx);
    next << O, block;
    O = std::move(next);
    Eigen::FullPivLU<MatrixXd> lu(O);
    if (lu.rank() == dx) return h;
    block = block * F;
  }
  return static_cast<int>(dx);
}

/// RANSAC over rows of the whitened stacked regression: each draw fits x by
/// least squares on a random row subset and counts rows whose residual is
/// below the threshold. The largest consensus set is refitted by least
/// squares or by Huber IRLS.
inline RansacOutput ransac_smoother(const StateSpaceModel& model, const ObservationBatch& obs,
                                    const RansacConfig& cfg = {}) {
  if (cfg.draws < 1) throw InvalidArgument("RANSAC needs at least one draw");
  if (!(cfg.threshold > 0.0)) throw InvalidArgument("RANSAC threshold must be positive");
  const auto t0 = std::chrono::steady_clock::now();
  const WhitenedRows W = whiten_rows(model, obs);
  const Index dx = W.dx;
  const int N = W.horizon;
  std::vector<std::size_t> state_rows, meas_rows, prior_rows;
  for (std::size_t i = 0; i < W.rows.size(); ++i) {
    switch (W.rows[i].kind) {
      case WhitenedRows::Kind::Prior:
        prior_rows.push_back(i);
        break;
      case WhitenedRows::Kind::State:
        state_rows.push_back(i);
        break;
      case WhitenedRows::Kind::Measurement:
        meas_rows.push_back(i);
        break;
    }
  }
  std::vector<std::size_t> pool;
  std::size_t sample_size = 0;
  if (cfg.sampling == RansacSampling::Measurement) {
    pool = meas_rows;
    const int h = observability_index(model.F(1), model.H(1));
    sample_size = std::min(pool.size(), static_cast<std::size_t>(2 * dx * h));
  } else {
    pool = state_rows;
    sample_size = std::min(pool.size(), static_cast<std::size_t>((N * dx + 1) / 2));
  }

  RansacOutput out;
  std::vector<double> best;
  int best_count = -1;
  std::vector<double> weight(W.rows.size());
  for (int draw = 0; draw < cfg.draws; ++draw) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(draw)));
    std::vector<std::size_t> pick = pool;
    // Partial Fisher-Yates: the first sample_size entries are the sample.
    for (std::size_t i = 0; i < sample_size; ++i) {
      std::uniform_int_distribution<std::size_t> u(i, pick.size() - 1);
      std::swap(pick[i], pick[u(rng)]);
    }
    std::fill(weight.begin(), weight.end(), 0.0);
    for (auto i : prior_rows) weight[i] = 1.0;
    for (auto i : cfg.sampling == RansacSampling::Measurement ? state_rows : meas_rows) weight[i] = 1.0;
    for (std::size_t i = 0; i < sample_size; ++i) weight[pick[i]] = 1.0;
    // Dropping state rows can leave parts of x unidentified; such draws are
    // fitted with the same small ridge as the refit below.
    MatrixXd x;
    try {
      x = W.solve(weight);
    } catch (const SingularMatrix&) {
      try {
        x = W.solve(weight, 1e-10);
      } catch (const SingularMatrix&) {
        continue;
      }
      ++out.ridged_draws;
    }
    if (!x.allFinite()) continue;
    ++out.valid_draws;
    std::vector<double> consensus(W.rows.size(), 0.0);
    int count = 0;
    for (std::size_t i = 0; i < W.rows.size(); ++i) {
      if (W.rows[i].kind == WhitenedRows::Kind::Prior) {
        consensus[i] = 1.0;
        continue;
      }
      if (std::abs(W.residual(i, x)) < cfg.threshold) {
        consensus[i] = 1.0;
        ++count;
      }
    }
    if (count > best_count) {
      best_count = count;
      best = std::move(consensus);
    }
  }
  if (best_count < 0) throw Error("RANSAC: no draw produced an observable subsystem");

  SmootherOutput fit;
  if (cfg.then_huber) {
    fit = huber_irls(W, cfg.huber, &best);
  } else {
    try {
      fit.x = W.solve(best);
    } catch (const SingularMatrix&) {
      fit.x = W.solve(best, 1e-10);
      fit.warnings.push_back("consensus set is rank deficient; refit with a 1e-10 ridge");
    }
    fit.iterations = 1;
  }
  static_cast<SmootherOutput&>(out) = std::move(fit);
  out.outliers = OutlierField::zeros(N, dx, model.meas_dim());
  out.inlier.assign(best.size(), false);
  for (std::size_t i = 0; i < best.size(); ++i) out.inlier[i] = best[i] > 0.0;
  out.consensus = best_count;
  out.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace drs
