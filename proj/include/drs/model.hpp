#pragma once

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "drs/block_tridiagonal.hpp"
#include "drs/error.hpp"

namespace drs {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Linear state-space model
///
///   x_n = F_n x_{n-1} + G_n w_n + o_{x,n},   w_n ~ N(0, Q_n)
///   y_n = H_n x_n + v_n + o_{y,n},           v_n ~ N(0, R_n)
///   x_0 ~ N(m0, Sigma0)
///
/// Every matrix sequence holds either a single matrix (time-invariant,
/// broadcast to every step) or one matrix per step n = 1..N. An empty
/// `noise_gain` means G_n = I.
struct StateSpaceModel {
  std::vector<MatrixXd> transition;
  std::vector<MatrixXd> noise_gain;
  std::vector<MatrixXd> observation;
  std::vector<MatrixXd> process_noise;
  std::vector<MatrixXd> measurement_noise;
  VectorXd m0;
  MatrixXd Sigma0;

  Index state_dim() const { return m0.size(); }
  Index meas_dim() const { return observation.empty() ? 0 : observation.front().rows(); }
  Index noise_dim() const { return process_noise.empty() ? 0 : process_noise.front().rows(); }

  // Step accessors take the 1-based time index n.
  const MatrixXd& F(int n) const { return at(transition, n); }
  const MatrixXd& H(int n) const { return at(observation, n); }
  const MatrixXd& Q(int n) const { return at(process_noise, n); }
  const MatrixXd& R(int n) const { return at(measurement_noise, n); }
  MatrixXd G(int n) const {
    return noise_gain.empty() ? MatrixXd::Identity(state_dim(), state_dim()) : at(noise_gain, n);
  }

  /// Covariance of G_n w_n.
  MatrixXd process_cov(int n) const {
    if (noise_gain.empty()) return Q(n);
    const MatrixXd& g = at(noise_gain, n);
    return g * Q(n) * g.transpose();
  }

  /// True when some G_n is not the Dx x Dx identity. Such models have no
  /// state-equation precision and are only accepted by the ADMM solver.
  bool generalized() const {
    for (const auto& g : noise_gain) {
      if (g.rows() != state_dim() || g.cols() != state_dim() || !g.isIdentity(0.0)) return true;
    }
    return false;
  }

  bool time_invariant() const {
    return transition.size() <= 1 && noise_gain.size() <= 1 && observation.size() <= 1 &&
           process_noise.size() <= 1 && measurement_noise.size() <= 1;
  }

  /// Longest explicit sequence; 1 for time-invariant models.
  std::size_t sequence_length() const {
    std::size_t len = 1;
    for (const auto* seq : {&transition, &noise_gain, &observation, &process_noise, &measurement_noise}) {
      len = std::max(len, seq->size());
    }
    return len;
  }

 private:
  static const MatrixXd& at(const std::vector<MatrixXd>& seq, int n) {
    assert(!seq.empty());
    if (seq.size() == 1) return seq.front();
    assert(n >= 1 && static_cast<std::size_t>(n) <= seq.size());
    return seq[static_cast<std::size_t>(n - 1)];
  }
};

inline StateSpaceModel make_model(MatrixXd F, MatrixXd H, MatrixXd Q, MatrixXd R, VectorXd m0,
                                  MatrixXd Sigma0, std::optional<MatrixXd> G = std::nullopt) {
  StateSpaceModel m;
  m.transition = {std::move(F)};
  m.observation = {std::move(H)};
  m.process_noise = {std::move(Q)};
  m.measurement_noise = {std::move(R)};
  if (G) m.noise_gain = {std::move(*G)};
  m.m0 = std::move(m0);
  m.Sigma0 = std::move(Sigma0);
  return m;
}

/// Discrete white noise acceleration model for a planar target with state
/// [p_x, s_x, p_y, s_y] and position measurements.
inline StateSpaceModel dwna_model(double tau, MatrixXd Q, MatrixXd R, VectorXd m0, MatrixXd Sigma0) {
  MatrixXd F = MatrixXd::Identity(4, 4);
  F(0, 1) = tau;
  F(2, 3) = tau;
  MatrixXd G = MatrixXd::Zero(4, 2);
  G(0, 0) = tau * tau / 2.0;
  G(1, 0) = tau;
  G(2, 1) = tau * tau / 2.0;
  G(3, 1) = tau;
  MatrixXd H = MatrixXd::Zero(2, 4);
  H(0, 0) = 1.0;
  H(1, 2) = 1.0;
  return make_model(F, H, std::move(Q), std::move(R), std::move(m0), std::move(Sigma0), G);
}

struct ObservationBatch {
  std::vector<VectorXd> y;  // y[n-1] is y_n

  int horizon() const { return static_cast<int>(y.size()); }
};

/// Outlier estimates or ground truth. Row n-1 holds step n.
struct OutlierField {
  MatrixXd ox;  // N x Dx
  MatrixXd oy;  // N x Dy

  static OutlierField zeros(Index horizon, Index dx, Index dy) {
    return {MatrixXd::Zero(horizon, dx), MatrixXd::Zero(horizon, dy)};
  }

  Index support_x() const { return (ox.array() != 0.0).count(); }
  Index support_y() const { return (oy.array() != 0.0).count(); }
  bool all_zero() const { return support_x() == 0 && support_y() == 0; }
};

struct ValidationReport {
  std::vector<std::string> failures;
  bool generalized = false;

  bool ok() const { return failures.empty(); }
};

namespace detail {

inline bool is_spd(const MatrixXd& m) {
  if (m.rows() != m.cols() || m.rows() == 0) return false;
  if (!m.allFinite()) return false;
  if (!m.isApprox(m.transpose(), 1e-10) && (m - m.transpose()).norm() > 1e-12) return false;
  Eigen::LLT<MatrixXd> llt(m);
  return llt.info() == Eigen::Success;
}

}  // namespace detail

/// Checks dimensional consistency and positive definiteness of the
/// covariances. When `horizon` is given, explicit sequences must have that
/// length. Never throws.
inline ValidationReport validate(const StateSpaceModel& model, std::optional<int> horizon = std::nullopt) {
  ValidationReport rep;
  const Index dx = model.state_dim();
  auto fail = [&](std::string msg) { rep.failures.push_back(std::move(msg)); };

  if (dx == 0) fail("m0 is empty");
  if (model.Sigma0.rows() != dx || model.Sigma0.cols() != dx) {
    fail("Sigma0 must be Dx x Dx");
  } else if (!detail::is_spd(model.Sigma0)) {
    fail("Sigma0 is not symmetric positive definite");
  }
  if (model.transition.empty()) fail("F is missing");
  if (model.observation.empty()) fail("H is missing");
  if (model.process_noise.empty()) fail("Q is missing");
  if (model.measurement_noise.empty()) fail("R is missing");
  if (!rep.ok()) return rep;

  const Index dy = model.meas_dim();
  const Index dw = model.noise_dim();
  if (model.noise_gain.empty() && dw != dx) fail("Q must be Dx x Dx when G is absent");

  auto check_seq = [&](const std::vector<MatrixXd>& seq, const char* name, Index rows, Index cols, bool spd) {
    if (seq.size() > 1 && horizon && static_cast<int>(seq.size()) != *horizon) {
      fail(std::string(name) + " sequence length " + std::to_string(seq.size()) +
           " does not match horizon " + std::to_string(*horizon));
    }
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const std::string where = std::string(name) + "_" + std::to_string(seq.size() == 1 ? 0 : i + 1);
      if (seq[i].rows() != rows || seq[i].cols() != cols) {
        fail(where + " has shape " + std::to_string(seq[i].rows()) + "x" + std::to_string(seq[i].cols()) +
             ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
      } else if (!seq[i].allFinite()) {
        fail(where + " has non-finite entries");
      } else if (spd && !detail::is_spd(seq[i])) {
        fail(where + " is not symmetric positive definite");
      }
    }
  };
  check_seq(model.transition, "F", dx, dx, false);
  check_seq(model.noise_gain, "G", dx, dw, false);
  check_seq(model.observation, "H", dy, dx, false);
  check_seq(model.process_noise, "Q", dw, dw, true);
  check_seq(model.measurement_noise, "R", dy, dy, true);
  if (!model.m0.allFinite()) fail("m0 has non-finite entries");

  const std::size_t len = model.sequence_length();
  if (len > 1) {
    for (const auto* seq : {&model.transition, &model.noise_gain, &model.observation, &model.process_noise,
                            &model.measurement_noise}) {
      if (seq->size() > 1 && seq->size() != len) fail("time-varying sequences have different lengths");
    }
  }
  rep.generalized = rep.ok() && model.generalized();
  return rep;
}

inline ValidationReport validate(const StateSpaceModel& model, const ObservationBatch& obs) {
  ValidationReport rep = validate(model, obs.horizon());
  if (obs.horizon() < 1) rep.failures.push_back("observation batch is empty");
  for (int n = 1; n <= obs.horizon(); ++n) {
    const VectorXd& y = obs.y[static_cast<std::size_t>(n - 1)];
    if (y.size() != model.meas_dim()) {
      rep.failures.push_back("y_" + std::to_string(n) + " has length " + std::to_string(y.size()) +
                             ", expected " + std::to_string(model.meas_dim()));
    } else if (!y.allFinite()) {
      rep.failures.push_back("y_" + std::to_string(n) + " has non-finite entries");
    }
  }
  return rep;
}

inline void require_valid(const StateSpaceModel& model, const ObservationBatch& obs) {
  ValidationReport rep = validate(model, obs);
  if (!rep.ok()) throw InvalidArgument("invalid model or observations: " + rep.failures.front());
}

/// A smoothing problem over local steps k = 0..K of a model: state x_k is the
/// model's state at absolute time `offset + k`, measurement y[k-1] belongs to
/// local step k, and x_0 has the Gaussian prior (prior_mean, prior_cov).
/// The fixed-interval problem is offset 0 with prior (m0, Sigma0); fixed-lag
/// windows use a Kalman-filter anchor as the prior.
///
/// Holds non-owning references; the model and measurements must outlive it.
struct Interval {
  const StateSpaceModel* model = nullptr;
  std::span<const VectorXd> y;
  int offset = 0;
  VectorXd prior_mean;
  MatrixXd prior_cov;

  int length() const { return static_cast<int>(y.size()); }
  Index dx() const { return model->state_dim(); }
  Index dy() const { return model->meas_dim(); }
  const MatrixXd& F(int k) const { return model->F(offset + k); }
  const MatrixXd& H(int k) const { return model->H(offset + k); }
  const MatrixXd& Q(int k) const { return model->Q(offset + k); }
  const MatrixXd& R(int k) const { return model->R(offset + k); }
  MatrixXd G(int k) const { return model->G(offset + k); }
  MatrixXd process_cov(int k) const { return model->process_cov(offset + k); }
  const VectorXd& meas(int k) const { return y[static_cast<std::size_t>(k - 1)]; }
};

inline Interval full_interval(const StateSpaceModel& model, const ObservationBatch& obs) {
  return Interval{&model, std::span<const VectorXd>(obs.y), 0, model.m0, model.Sigma0};
}

// ---------------------------------------------------------------------------
// Stacked batch form.

/// Which equation a stacked row comes from: the prior on x_0, the state
/// equation at step n, or the measurement equation at step n. `d` is the
/// component index (0-based).
struct StackedRow {
  enum class Kind { Prior, State, Measurement };
  Kind kind;
  int n;
  int d;
};

/// The smoothing problem as one regression y = A x + o + noise over the
/// stacked unknown x = [x_0; x_1; ...; x_N] with block-diagonal noise
/// covariance Qw = blkdiag(Sigma0, Q_1..Q_N, R_1..R_N).
///
/// Row order: Dx prior rows, then N*Dx state rows (n ascending), then N*Dy
/// measurement rows (n ascending). State rows encode F_n x_{n-1} - x_n with
/// target 0 so the residual y - A x - o equals x_n - F_n x_{n-1} - o_{x,n}.
struct BatchSystem {
  Index dx = 0;
  Index dy = 0;
  int horizon = 0;
  Eigen::SparseMatrix<double> A;
  VectorXd y;
  Eigen::SparseMatrix<double> Qw;
  std::vector<StackedRow> rows;

  Index unknowns() const { return (horizon + 1) * dx; }
  Index state_row(int n, int d) const { return dx + (n - 1) * dx + d; }
  Index measurement_row(int n, int d) const { return dx + horizon * dx + (n - 1) * dy + d; }

  /// Stacks an outlier field as the additive vector o of the regression.
  VectorXd outlier_vector(const OutlierField& o) const {
    VectorXd v = VectorXd::Zero(A.rows());
    for (int n = 1; n <= horizon; ++n) {
      for (Index d = 0; d < dx; ++d) v(state_row(n, static_cast<int>(d))) = o.ox(n - 1, d);
      for (Index d = 0; d < dy; ++d) v(measurement_row(n, static_cast<int>(d))) = o.oy(n - 1, d);
    }
    return v;
  }

  /// Inverse of the lower Cholesky factor of Qw, block by block. Applying it
  /// to rows whitens the nominal noise.
  Eigen::SparseMatrix<double> whitening() const {
    std::vector<Eigen::Triplet<double>> trip;
    auto add_block = [&](Index start, const MatrixXd& cov) {
      Eigen::LLT<MatrixXd> llt(cov);
      MatrixXd inv = llt.matrixL().solve(MatrixXd::Identity(cov.rows(), cov.cols()));
      for (Index i = 0; i < inv.rows(); ++i)
        for (Index j = 0; j <= i; ++j)
          if (inv(i, j) != 0.0) trip.emplace_back(start + i, start + j, inv(i, j));
    };
    Index start = 0;
    while (start < Qw.rows()) {
      const Index len = block_length(start);
      add_block(start, MatrixXd(Qw.block(start, start, len, len)));
      start += len;
    }
    Eigen::SparseMatrix<double> W(Qw.rows(), Qw.cols());
    W.setFromTriplets(trip.begin(), trip.end());
    return W;
  }

  /// Normal matrix A^T Qw^{-1} A in block-tridiagonal storage.
  BlockTridiagonal normal_matrix() const {
    Eigen::SparseMatrix<double> Wh = whitening();
    Eigen::SparseMatrix<double> Aw = Wh * A;
    Eigen::SparseMatrix<double> M = Aw.transpose() * Aw;
    return BlockTridiagonal::from_sparse(M, dx);
  }

  /// Weighted least-squares solution of the stacked problem with the given
  /// outliers removed from the targets. Block Cholesky, linear in N.
  VectorXd solve(const OutlierField* compensation = nullptr) const {
    Eigen::SparseMatrix<double> Wh = whitening();
    Eigen::SparseMatrix<double> Aw = Wh * A;
    VectorXd target = y;
    if (compensation) target -= outlier_vector(*compensation);
    VectorXd rhs = Aw.transpose() * (Wh * target);
    Eigen::SparseMatrix<double> M = Aw.transpose() * Aw;
    return BlockTridiagonal::from_sparse(M, dx).solve(rhs);
  }

 private:
  Index block_length(Index start) const {
    if (start < dx) return dx;
    if (start < dx + horizon * dx) return dx;
    return dy;
  }
};

/// Builds the stacked regression for a non-generalized model.
inline BatchSystem stack_batch(const StateSpaceModel& model, const ObservationBatch& obs) {
  require_valid(model, obs);
  if (model.generalized()) {
    throw UnsupportedModel(
        "stacked weighted least squares needs G_n = I; use the ADMM smoother for generalized models");
  }
  BatchSystem b;
  b.dx = model.state_dim();
  b.dy = model.meas_dim();
  b.horizon = obs.horizon();
  const Index dx = b.dx, dy = b.dy;
  const int N = b.horizon;
  const Index rows = dx + N * dx + N * dy;
  b.y = VectorXd::Zero(rows);
  b.rows.reserve(static_cast<std::size_t>(rows));

  std::vector<Eigen::Triplet<double>> a, q;
  auto add_cov = [&](Index start, const MatrixXd& c) {
    for (Index i = 0; i < c.rows(); ++i)
      for (Index j = 0; j < c.cols(); ++j)
        if (c(i, j) != 0.0) q.emplace_back(start + i, start + j, c(i, j));
  };

  for (Index d = 0; d < dx; ++d) {
    a.emplace_back(d, d, 1.0);
    b.y(d) = model.m0(d);
    b.rows.push_back({StackedRow::Kind::Prior, 0, static_cast<int>(d)});
  }
  add_cov(0, model.Sigma0);

  for (int n = 1; n <= N; ++n) {
    const MatrixXd& F = model.F(n);
    const Index r0 = b.state_row(n, 0);
    for (Index d = 0; d < dx; ++d) {
      for (Index j = 0; j < dx; ++j)
        if (F(d, j) != 0.0) a.emplace_back(r0 + d, (n - 1) * dx + j, F(d, j));
      a.emplace_back(r0 + d, n * dx + d, -1.0);
      b.rows.push_back({StackedRow::Kind::State, n, static_cast<int>(d)});
    }
    add_cov(r0, model.Q(n));
  }
  for (int n = 1; n <= N; ++n) {
    const MatrixXd& H = model.H(n);
    const Index r0 = b.measurement_row(n, 0);
    for (Index d = 0; d < dy; ++d) {
      for (Index j = 0; j < dx; ++j)
        if (H(d, j) != 0.0) a.emplace_back(r0 + d, n * dx + j, H(d, j));
      b.y(r0 + d) = obs.y[static_cast<std::size_t>(n - 1)](d);
      b.rows.push_back({StackedRow::Kind::Measurement, n, static_cast<int>(d)});
    }
    add_cov(r0, model.R(n));
  }

  b.A.resize(rows, (N + 1) * dx);
  b.A.setFromTriplets(a.begin(), a.end());
  b.Qw.resize(rows, rows);
  b.Qw.setFromTriplets(q.begin(), q.end());
  return b;
}

/// Reshapes a stacked (N+1)*Dx vector into an (N+1) x Dx trajectory.
inline MatrixXd unstack_states(const VectorXd& x, Index dx) {
  const Index steps = x.size() / dx;
  MatrixXd out(steps, dx);
  for (Index k = 0; k < steps; ++k) out.row(k) = x.segment(k * dx, dx).transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Random numbers and simulation.

using Rng = std::mt19937_64;

/// SplitMix64 mixing of (master, stream). Each Monte-Carlo replication and
/// each random stream inside a replication gets its own seed this way, so
/// results do not depend on execution order.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Square-root factor S with S S^T = cov, valid for semidefinite input.
inline MatrixXd covariance_factor(const MatrixXd& cov) {
  Eigen::LLT<MatrixXd> llt(cov);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(cov);
  VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal();
}

inline VectorXd sample_gaussian(Rng& rng, const MatrixXd& factor) {
  std::normal_distribution<double> normal(0.0, 1.0);
  VectorXd z(factor.cols());
  for (Index i = 0; i < z.size(); ++i) z(i) = normal(rng);
  return factor * z;
}

/// Scalar outlier value distribution.
struct OutlierDistribution {
  enum class Type { Uniform, Laplace, UniformZeroMean, Gaussian };
  Type type = Type::Uniform;
  double low = 0.0;       // Uniform
  double high = 0.0;      // Uniform
  double variance = 0.0;  // Laplace, UniformZeroMean, Gaussian

  double draw(Rng& rng) const {
    switch (type) {
      case Type::Uniform:
        return std::uniform_real_distribution<double>(low, high)(rng);
      case Type::Laplace: {
        // Laplace(0, b) has variance 2 b^2.
        const double b = std::sqrt(variance / 2.0);
        const double u = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
        return -b * (u < 0 ? -1.0 : 1.0) * std::log1p(-2.0 * std::abs(u));
      }
      case Type::UniformZeroMean: {
        const double half = std::sqrt(3.0 * variance);
        return std::uniform_real_distribution<double>(-half, half)(rng);
      }
      case Type::Gaussian:
        return std::normal_distribution<double>(0.0, std::sqrt(variance))(rng);
    }
    return 0.0;
  }
};

/// i.i.d. contamination: with `probability` (i.e. 1 - pi) an entry, or a whole
/// step when `per_entry` is false, is contaminated. Measurement contamination
/// either replaces the report (`replace`) or adds to it.
struct Contamination {
  double probability = 0.0;
  bool per_entry = true;
  bool replace = false;
  OutlierDistribution dist;
};

/// A scheduled event at step n: a state increment (maneuver) or a fixed
/// replacement value for the measurement.
struct FixedEvent {
  int n = 0;
  VectorXd value;
};

struct ScenarioConfig {
  StateSpaceModel model;
  int horizon = 0;
  double tau = 1.0;  // sampling period, informational when the model is explicit
  std::optional<VectorXd> initial_state;  // drawn from N(m0, Sigma0) when absent
  std::vector<FixedEvent> maneuvers;
  std::vector<FixedEvent> measurement_events;
  Contamination state_contamination;
  Contamination measurement_contamination;
  std::uint64_t seed = 0;
  /// When set, the true trajectory (x_0, process noise, state outliers and
  /// maneuvers) is drawn from this seed and stays fixed while `seed` varies
  /// the measurements.
  std::optional<std::uint64_t> trajectory_seed;
};

inline std::vector<std::string> validate(const ScenarioConfig& cfg) {
  std::vector<std::string> out = validate(cfg.model, cfg.horizon).failures;
  if (cfg.horizon < 1) out.push_back("horizon must be >= 1");
  if (!(cfg.tau > 0.0)) out.push_back("tau must be positive");
  for (const auto* c : {&cfg.state_contamination, &cfg.measurement_contamination}) {
    if (!(c->probability >= 0.0 && c->probability <= 1.0)) out.push_back("contamination probability outside [0,1]");
  }
  if (cfg.initial_state && cfg.initial_state->size() != cfg.model.state_dim())
    out.push_back("initial_state has wrong length");
  for (const auto& e : cfg.maneuvers) {
    if (e.n < 1 || e.n > cfg.horizon || e.value.size() != cfg.model.state_dim())
      out.push_back("maneuver at n=" + std::to_string(e.n) + " is out of range or has wrong length");
  }
  for (const auto& e : cfg.measurement_events) {
    if (e.n < 1 || e.n > cfg.horizon || e.value.size() != cfg.model.meas_dim())
      out.push_back("measurement event at n=" + std::to_string(e.n) + " is out of range or has wrong length");
  }
  return out;
}

struct Simulation {
  MatrixXd states;  // (N+1) x Dx, row n is x_n
  ObservationBatch obs;
  OutlierField outliers;  // ground truth o_x, o_y
};

/// Draws a contaminated trajectory. Deterministic given the seeds.
inline Simulation simulate(const ScenarioConfig& cfg) {
  if (auto errs = validate(cfg); !errs.empty()) throw InvalidArgument("invalid scenario: " + errs.front());
  const StateSpaceModel& m = cfg.model;
  const int N = cfg.horizon;
  const Index dx = m.state_dim(), dy = m.meas_dim();

  Rng traj_rng(derive_seed(cfg.trajectory_seed.value_or(cfg.seed), cfg.trajectory_seed ? 11 : 1));
  Rng meas_rng(derive_seed(cfg.seed, 2));

  Simulation sim;
  sim.states.resize(N + 1, dx);
  sim.outliers = OutlierField::zeros(N, dx, dy);
  sim.obs.y.resize(static_cast<std::size_t>(N));

  auto contaminate = [](Rng& rng, const Contamination& c, Index dim, VectorXd& out) {
    if (c.probability <= 0.0) return false;
    std::bernoulli_distribution hit(c.probability);
    bool any = false;
    if (c.per_entry) {
      for (Index d = 0; d < dim; ++d) {
        if (hit(rng)) {
          out(d) = c.dist.draw(rng);
          any = true;
        }
      }
    } else if (hit(rng)) {
      for (Index d = 0; d < dim; ++d) out(d) = c.dist.draw(rng);
      any = true;
    }
    return any;
  };

  const bool invariant = m.time_invariant();
  MatrixXd q_factor = covariance_factor(m.Q(1));
  MatrixXd r_factor = covariance_factor(m.R(1));

  VectorXd x = cfg.initial_state ? *cfg.initial_state : VectorXd(m.m0 + sample_gaussian(traj_rng, covariance_factor(m.Sigma0)));
  sim.states.row(0) = x.transpose();
  for (int n = 1; n <= N; ++n) {
    if (!invariant) q_factor = covariance_factor(m.Q(n));
    VectorXd w = sample_gaussian(traj_rng, q_factor);
    VectorXd ox = VectorXd::Zero(dx);
    VectorXd drawn = VectorXd::Zero(dx);
    if (contaminate(traj_rng, cfg.state_contamination, dx, drawn)) ox += drawn;
    for (const auto& e : cfg.maneuvers)
      if (e.n == n) ox += e.value;
    x = m.F(n) * x + m.G(n) * w + ox;
    sim.states.row(n) = x.transpose();
    sim.outliers.ox.row(n - 1) = ox.transpose();
  }

  for (int n = 1; n <= N; ++n) {
    if (!invariant) r_factor = covariance_factor(m.R(n));
    const VectorXd nominal = m.H(n) * sim.states.row(n).transpose() + sample_gaussian(meas_rng, r_factor);
    VectorXd y = nominal;
    const Contamination& mc = cfg.measurement_contamination;
    if (mc.probability > 0.0) {
      std::bernoulli_distribution hit(mc.probability);
      auto apply = [&](Index d) {
        const double v = mc.dist.draw(meas_rng);
        y(d) = mc.replace ? v : y(d) + v;
      };
      if (mc.per_entry) {
        for (Index d = 0; d < dy; ++d)
          if (hit(meas_rng)) apply(d);
      } else if (hit(meas_rng)) {
        for (Index d = 0; d < dy; ++d) apply(d);
      }
    }
    for (const auto& e : cfg.measurement_events)
      if (e.n == n) y = e.value;
    sim.obs.y[static_cast<std::size_t>(n - 1)] = y;
    sim.outliers.oy.row(n - 1) = (y - nominal).transpose();
  }
  return sim;
}

}  // namespace drs
