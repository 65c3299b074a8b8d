#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <limits>
#include <ostream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "drs/admm.hpp"
#include "drs/baselines.hpp"
#include "drs/coordinate.hpp"
#include "drs/fixed_lag.hpp"
#include "drs/format.hpp"
#include "drs/kalman.hpp"
#include "drs/lambda_select.hpp"
#include "drs/model.hpp"
#include "drs/refine.hpp"

namespace drs {

// ---------------------------------------------------------------------------
// RMSE.

/// RMSE_n = sqrt(1/M sum_m ||x_n[idx] - xhat_n^(m)[idx]||^2) for every row n.
/// `truth` holds one trajectory per run, or a single trajectory shared by
/// all runs.
inline VectorXd rmse_series(const std::vector<MatrixXd>& truth, const std::vector<MatrixXd>& estimates,
                            const std::vector<Index>& idx) {
  if (estimates.empty()) throw InvalidArgument("rmse needs at least one run");
  if (truth.size() != 1 && truth.size() != estimates.size()) {
    throw InvalidArgument("rmse: one true trajectory or one per run");
  }
  const Index rows = estimates.front().rows();
  VectorXd acc = VectorXd::Zero(rows);
  for (std::size_t m = 0; m < estimates.size(); ++m) {
    const MatrixXd& t = truth.size() == 1 ? truth.front() : truth[m];
    const MatrixXd& e = estimates[m];
    if (e.rows() != rows || t.rows() != rows || t.cols() != e.cols()) {
      throw InvalidArgument("rmse: trajectory shapes differ");
    }
    for (Index i : idx) {
      if (i < 0 || i >= e.cols()) throw InvalidArgument("rmse: coordinate index out of range");
      acc += (t.col(i) - e.col(i)).array().square().matrix();
    }
  }
  return (acc / static_cast<double>(estimates.size())).array().sqrt().matrix();
}

/// Per-run root mean square error over all rows: sqrt(mean_n ||e_n[idx]||^2).
inline double run_rmse(const MatrixXd& truth, const MatrixXd& est, const std::vector<Index>& idx) {
  double acc = 0.0;
  for (Index i : idx) acc += (truth.col(i) - est.col(i)).squaredNorm();
  return std::sqrt(acc / static_cast<double>(truth.rows()));
}

struct SummaryStats {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (M - 1)
  double median = 0.0;
  double stderr_mean = 0.0;
};

inline SummaryStats summarize(std::vector<double> v) {
  SummaryStats s;
  if (v.empty()) {
    s.mean = s.stddev = s.median = s.stderr_mean = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  const double n = static_cast<double>(v.size());
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double e : v) ss += (e - s.mean) * (e - s.mean);
  s.stddev = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  s.stderr_mean = s.stddev / std::sqrt(n);
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  s.median = v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
  return s;
}

// ---------------------------------------------------------------------------
// Scenarios.

enum class Contaminate { Measurement, State, Joint };

inline std::string to_string(Contaminate c) {
  switch (c) {
    case Contaminate::Measurement:
      return "measurement";
    case Contaminate::State:
      return "state";
    case Contaminate::Joint:
      return "joint";
  }
  return "";
}

inline Contaminate parse_contaminate(const std::string& s) {
  if (s == "measurement") return Contaminate::Measurement;
  if (s == "state") return Contaminate::State;
  if (s == "joint") return Contaminate::Joint;
  throw InvalidArgument("contamination must be measurement, state or joint, got '" + s + "'");
}

/// A registered experiment setup. `base` carries the model, horizon and the
/// outlier distributions; the contamination probabilities are filled in per
/// level.
struct ScenarioTemplate {
  std::string name;
  ScenarioConfig base;
  std::vector<Index> positions;
  std::vector<Index> velocities;
  Contaminate contamination = Contaminate::Measurement;
  std::vector<double> levels;
  std::optional<double> state_level;  // held fixed while `levels` sweeps the measurements
};

inline MatrixXd cv_transition(double tau) {
  MatrixXd F = MatrixXd::Identity(4, 4);
  F(0, 1) = tau;
  F(2, 3) = tau;
  return F;
}

inline MatrixXd position_observation() {
  MatrixXd H = MatrixXd::Zero(2, 4);
  H(0, 0) = 1.0;
  H(1, 2) = 1.0;
  return H;
}

inline MatrixXd diag4(double a, double b, double c, double d) { return VectorXd{{a, b, c, d}}.asDiagonal(); }

/// Initial state and turn schedule of the sample trajectory. Each turn
/// rotates the velocity by `turn_angle`, split evenly over two steps.
struct TurnSchedule {
  VectorXd initial_state = VectorXd{{0.0, 50.0, 0.0, 50.0}};
  int right_at = 30;
  int left_at = 60;
  double turn_angle = std::acos(-1.0) / 2.0;
};

inline std::vector<FixedEvent> turn_maneuvers(const TurnSchedule& t) {
  const double vx = t.initial_state(1), vy = t.initial_state(3);
  const double a = -t.turn_angle;  // right is clockwise
  const double rx = std::cos(a) * vx - std::sin(a) * vy;
  const double ry = std::sin(a) * vx + std::cos(a) * vy;
  const VectorXd right{{0.0, 0.5 * (rx - vx), 0.0, 0.5 * (ry - vy)}};
  const VectorXd left = -right;
  return {{t.right_at, right}, {t.right_at + 1, right}, {t.left_at, left}, {t.left_at + 1, left}};
}

/// Maneuvering target with glint: planar constant-velocity model driven by
/// acceleration noise, 3% glint replacing the whole position report.
inline ScenarioTemplate dwna_glint_scenario() {
  ScenarioTemplate s;
  s.name = "dwna-glint";
  const double tau = 1.0;
  s.base.model = dwna_model(tau, 0.5 * MatrixXd::Identity(2, 2), 150.0 * 150.0 * MatrixXd::Identity(2, 2),
                            VectorXd::Zero(4), diag4(50, 5, 50, 5));
  s.base.horizon = 100;
  s.base.tau = tau;
  const TurnSchedule turns;
  s.base.initial_state = turns.initial_state;
  s.base.maneuvers = turn_maneuvers(turns);
  s.base.trajectory_seed = 2024;
  auto& mc = s.base.measurement_contamination;
  mc.per_entry = false;
  mc.replace = true;
  mc.dist.type = OutlierDistribution::Type::Uniform;
  mc.dist.low = -10000.0;
  mc.dist.high = 10000.0;
  s.positions = {0, 2};
  s.velocities = {1, 3};
  s.contamination = Contaminate::Measurement;
  s.levels = {1.0 - 0.97};
  return s;
}

/// Constant-velocity model with full-rank process noise and Laplacian
/// outliers, used against RANSAC and Huber.
inline ScenarioTemplate ransac_comparison_scenario() {
  ScenarioTemplate s;
  s.name = "ransac-comparison";
  s.base.model = make_model(cv_transition(1.0), position_observation(), diag4(1, 0.001, 1, 0.001),
                            5.0 * MatrixXd::Identity(2, 2), VectorXd::Zero(4), diag4(50, 5, 50, 5));
  s.base.horizon = 100;
  auto& sc = s.base.state_contamination;
  sc.dist.type = OutlierDistribution::Type::Laplace;
  sc.dist.variance = 200.0;
  auto& mc = s.base.measurement_contamination;
  mc.dist.type = OutlierDistribution::Type::Laplace;
  mc.dist.variance = 20000.0;
  s.positions = {0, 2};
  s.velocities = {1, 3};
  s.contamination = Contaminate::Measurement;
  s.levels = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  return s;
}

/// Same model and outliers as the RANSAC comparison with both kinds present:
/// state contamination fixed at 10%, measurement contamination swept.
inline ScenarioTemplate joint_outliers_scenario() {
  ScenarioTemplate s = ransac_comparison_scenario();
  s.name = "joint-outliers";
  s.contamination = Contaminate::Joint;
  s.state_level = 0.1;
  s.levels = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
  return s;
}

/// Larger process noise, measurement outliers only, zero-mean uniform.
inline ScenarioTemplate laplace_comparison_scenario() {
  ScenarioTemplate s = ransac_comparison_scenario();
  s.name = "laplace-comparison";
  s.base.model.process_noise = {diag4(100, 1, 100, 1)};
  auto& mc = s.base.measurement_contamination;
  mc.dist.type = OutlierDistribution::Type::UniformZeroMean;
  mc.dist.variance = 20000.0;
  s.contamination = Contaminate::Measurement;
  s.levels = {0.1, 0.2, 0.3};
  return s;
}

inline std::vector<std::string> scenario_names() {
  return {"dwna-glint", "ransac-comparison", "joint-outliers", "laplace-comparison"};
}

inline ScenarioTemplate find_scenario(const std::string& name) {
  if (name == "dwna-glint") return dwna_glint_scenario();
  if (name == "ransac-comparison") return ransac_comparison_scenario();
  if (name == "joint-outliers") return joint_outliers_scenario();
  if (name == "laplace-comparison") return laplace_comparison_scenario();
  throw InvalidArgument("unknown scenario '" + name + "'");
}

// ---------------------------------------------------------------------------
// Methods.

/// One estimator in a comparison. `kind` picks the algorithm; the remaining
/// fields are its parameters and are ignored by kinds that do not use them.
struct MethodSpec {
  std::string name;  // label in reports; defaults to kind
  std::string kind;  // ks, drs, drs-avd, drs-fraction, drs-avd-refined, drs-avd-rerun,
                     // huber, ransac, fixed-lag-ks, fixed-lag-drs, online-drs
  double lambda_x = 0.05;
  double lambda_y = 0.01;
  int grid_x = 10;
  int grid_y = 10;
  double grid_floor = 1e-3;
  int max_sweeps = 500;
  double tol = 1e-8;
  double kappa = 0.05;
  int admm_iters = 5000;
  double admm_tol = 1e-6;
  double huber_lambda = 1.345;
  int ransac_draws = 100;
  std::string ransac_sampling = "auto";  // auto, measurement, state
  bool ransac_then_huber = true;
  int refine_iterations = 1;
  int lag = 10;
  int window = 10;
  int sweeps = 50;

  std::string label() const { return name.empty() ? kind : name; }
};

inline std::vector<std::string> method_kinds() {
  return {"ks",          "drs",    "drs-avd",      "drs-fraction",  "drs-avd-refined", "drs-avd-rerun",
          "huber",       "ransac", "fixed-lag-ks", "fixed-lag-drs", "online-drs"};
}

/// Short names used by the bench defaults: ransac-100, ransac-1000, refined.
inline MethodSpec method_preset(const std::string& name) {
  MethodSpec m;
  m.name = name;
  if (name == "ransac-100" || name == "ransac-1000") {
    m.kind = "ransac";
    m.ransac_draws = name == "ransac-100" ? 100 : 1000;
  } else if (name == "refined") {
    m.kind = "drs-avd-refined";
  } else {
    const auto kinds = method_kinds();
    if (std::find(kinds.begin(), kinds.end(), name) == kinds.end()) {
      throw InvalidArgument("unknown method '" + name + "'");
    }
    m.kind = name;
  }
  return m;
}

/// What a method may know about the replication besides the data: the true
/// per-entry contamination probabilities (for the known-fraction rule) and a
/// seed for its own randomness.
struct MethodContext {
  double pi_x = 0.0;
  double pi_y = 0.0;
  std::uint64_t seed = 0;
  Contaminate contamination = Contaminate::Measurement;
};

namespace detail {

inline SmootherOutput fixed_lambda_drs(const StateSpaceModel& model, const ObservationBatch& obs, const MethodSpec& m) {
  if (model.generalized()) {
    AdmmConfig c{m.lambda_x, m.lambda_y, m.kappa, m.admm_iters, m.admm_tol};
    return admm_drs(model, obs, c);
  }
  return drs_fixed_interval(model, obs, DrsConfig{m.lambda_x, m.lambda_y, m.max_sweeps, m.tol});
}

inline PathResult grid_path(const StateSpaceModel& model, const ObservationBatch& obs, const MethodSpec& m) {
  PathOptions opt;
  opt.solver = model.generalized() ? PathSolver::Admm : PathSolver::CoordinateDescent;
  opt.cd.max_sweeps = m.max_sweeps;
  opt.cd.tol = m.tol;
  opt.admm.kappa = m.kappa;
  opt.admm.max_iters = m.admm_iters;
  opt.admm.tol = m.admm_tol;
  const LambdaGrid grid = build_grid(lambda_bounds(model, obs), m.grid_x, m.grid_y, m.grid_floor);
  return solve_path(model, obs, grid, opt);
}

}  // namespace detail

/// Runs one method on one data set and returns the (N+1) x Dx estimate.
inline MatrixXd run_method(const MethodSpec& m, const StateSpaceModel& model, const ObservationBatch& obs,
                           const MethodContext& ctx) {
  const std::string& k = m.kind;
  if (k == "ks") return fixed_interval_ks(model, obs).x;
  if (k == "drs") return detail::fixed_lambda_drs(model, obs, m).x;
  if (k == "drs-avd" || k == "drs-avd-refined" || k == "drs-avd-rerun") {
    const SelectionResult s = select_avd(detail::grid_path(model, obs, m), model, obs);
    if (k == "drs-avd") return s.best.x;
    if (model.generalized()) throw UnsupportedModel(k + " needs G_n = I");
    if (k == "drs-avd-rerun") return ks_rerun_on_support(model, obs, s.best).x;
    ReweightConfig rc;
    rc.iterations = m.refine_iterations;
    rc.inner.max_sweeps = m.max_sweeps;
    rc.inner.tol = m.tol;
    return reweighted_drs(model, obs, s.lambda_x, s.lambda_y, s.best, rc).x;
  }
  if (k == "drs-fraction") {
    return select_known_fraction(detail::grid_path(model, obs, m), model, obs, ctx.pi_x, ctx.pi_y).best.x;
  }
  if (k == "huber") {
    HuberConfig h;
    h.lambda_x = h.lambda_y = m.huber_lambda;
    return huber_smoother(model, obs, h).x;
  }
  if (k == "ransac") {
    RansacConfig r;
    r.draws = m.ransac_draws;
    r.threshold = m.huber_lambda;
    r.seed = ctx.seed;
    r.then_huber = m.ransac_then_huber;
    r.huber.lambda_x = r.huber.lambda_y = m.huber_lambda;
    if (m.ransac_sampling == "state") {
      r.sampling = RansacSampling::State;
    } else if (m.ransac_sampling == "measurement") {
      r.sampling = RansacSampling::Measurement;
    } else if (m.ransac_sampling == "auto") {
      r.sampling = ctx.contamination == Contaminate::State ? RansacSampling::State : RansacSampling::Measurement;
    } else {
      throw InvalidArgument("ransac sampling must be auto, measurement or state");
    }
    return ransac_smoother(model, obs, r).x;
  }
  if (k == "fixed-lag-ks") return fixed_lag_ks(model, obs, m.lag, m.window);
  if (k == "fixed-lag-drs") {
    AdmmConfig a{m.lambda_x, m.lambda_y, m.kappa, m.admm_iters, m.admm_tol};
    return fixed_lag_drs(model, obs, m.lag, m.window, DrsConfig{m.lambda_x, m.lambda_y, m.max_sweeps, m.tol}, a);
  }
  if (k == "online-drs") {
    OnlineConfig c;
    c.lag = m.lag;
    c.window = m.window;
    c.sweeps = m.sweeps;
    c.lambda_x = m.lambda_x;
    c.lambda_y = m.lambda_y;
    c.kappa = m.kappa;
    return online_fixed_lag_drs(model, obs, c);
  }
  throw InvalidArgument("unknown method kind '" + k + "'");
}

// ---------------------------------------------------------------------------
// Experiments.

struct ExperimentSpec {
  std::string scenario = "dwna-glint";
  int replications = 25;
  std::uint64_t seed = 1;
  int horizon = 0;                           // 0 keeps the scenario's N
  std::vector<double> levels;                // empty keeps the scenario's levels
  std::optional<Contaminate> contamination;  // unset keeps the scenario's
  std::optional<double> state_level;         // unset keeps the scenario's
  int threads = 1;
  std::vector<MethodSpec> methods;
};

struct MethodLevelResult {
  std::string method;
  double level = 0.0;
  int successes = 0;
  int failures = 0;
  std::vector<std::string> errors;  // first few failure messages
  VectorXd rmse_position;           // RMSE_n, n = 0..N
  VectorXd rmse_velocity;
  VectorXd rmse_state;
  double time_avg_position = 0.0;  // mean over n of RMSE_n
  double time_avg_velocity = 0.0;
  double time_avg_state = 0.0;
  std::vector<double> run_position;  // per-replication RMSE of successful runs, in replication order
  std::vector<int> run_index;        // replication of each entry of run_position
  SummaryStats position_stats;
  SummaryStats velocity_stats;
  double seconds = 0.0;  // summed over replications
};

struct RmseReport {
  std::string scenario;
  std::string contamination;
  int replications = 0;
  std::uint64_t seed = 0;
  int horizon = 0;
  std::optional<double> state_level;
  std::vector<double> levels;
  std::vector<std::string> methods;
  std::vector<MethodLevelResult> results;  // level-major, then method

  const MethodLevelResult& at(const std::string& method, double level) const {
    for (const auto& r : results)
      if (r.method == method && r.level == level) return r;
    throw InvalidArgument("no result for method '" + method + "' at level " + fmt(level));
  }
  const MethodLevelResult& at(const std::string& method) const {
    if (levels.size() != 1) throw InvalidArgument("report has several levels; pass one");
    return at(method, levels.front());
  }
};

/// Scenario config for one contamination level.
inline ScenarioConfig level_config(const ScenarioTemplate& t, Contaminate c, double level,
                                   std::optional<double> state_level) {
  ScenarioConfig cfg = t.base;
  const bool state = c == Contaminate::State || c == Contaminate::Joint;
  const bool meas = c == Contaminate::Measurement || c == Contaminate::Joint;
  cfg.state_contamination.probability = state ? state_level.value_or(level) : 0.0;
  cfg.measurement_contamination.probability = meas ? level : 0.0;
  return cfg;
}

/// Paired mean difference a - b over replications where both succeeded,
/// with its standard error.
inline std::pair<double, double> paired_difference(const MethodLevelResult& a, const MethodLevelResult& b) {
  std::map<int, double> bm;
  for (std::size_t i = 0; i < b.run_index.size(); ++i) bm[b.run_index[i]] = b.run_position[i];
  std::vector<double> d;
  for (std::size_t i = 0; i < a.run_index.size(); ++i) {
    auto it = bm.find(a.run_index[i]);
    if (it != bm.end()) d.push_back(a.run_position[i] - it->second);
  }
  const SummaryStats s = summarize(d);
  return {s.mean, s.stderr_mean};
}

/// Runs every method on the same M seeded replications at each level.
/// Replication m at level l draws its data from derive(derive(seed, l), m), so
/// methods see identical data and comparisons are paired. Replications may
/// run on several threads; results are gathered by index, so the report does
/// not depend on the thread count.
inline RmseReport run_experiment(const ExperimentSpec& spec) {
  if (spec.replications < 1) throw InvalidArgument("replications must be >= 1");
  if (spec.threads < 1) throw InvalidArgument("threads must be >= 1");
  if (spec.methods.empty()) throw InvalidArgument("experiment lists no methods");
  const ScenarioTemplate t = find_scenario(spec.scenario);
  const Contaminate c = spec.contamination.value_or(t.contamination);
  RmseReport rep;
  rep.scenario = t.name;
  rep.contamination = to_string(c);
  rep.replications = spec.replications;
  rep.seed = spec.seed;
  rep.levels = spec.levels.empty() ? t.levels : spec.levels;
  rep.horizon = spec.horizon > 0 ? spec.horizon : t.base.horizon;
  rep.state_level = spec.state_level ? spec.state_level : t.state_level;
  if (c == Contaminate::Measurement) rep.state_level.reset();
  for (const auto& m : spec.methods) rep.methods.push_back(m.label());
  for (double l : rep.levels) {
    if (!(l >= 0.0 && l <= 1.0)) throw InvalidArgument("contamination level outside [0, 1]");
  }
  if (rep.state_level && !(*rep.state_level >= 0.0 && *rep.state_level <= 1.0))
    throw InvalidArgument("state level outside [0, 1]");

  const std::size_t M = static_cast<std::size_t>(spec.replications);
  const std::size_t K = spec.methods.size();
  std::vector<Index> all(static_cast<std::size_t>(t.base.model.state_dim()));
  std::iota(all.begin(), all.end(), Index{0});

  struct Run {
    std::optional<MatrixXd> x;
    std::string error;
    double seconds = 0.0;
  };

  for (std::size_t li = 0; li < rep.levels.size(); ++li) {
    const double level = rep.levels[li];
    ScenarioConfig cfg = level_config(t, c, level, rep.state_level);
    cfg.horizon = rep.horizon;
    auto beyond = [&](const FixedEvent& e) { return e.n > rep.horizon; };
    std::erase_if(cfg.maneuvers, beyond);  // a shortened horizon drops later events
    std::erase_if(cfg.measurement_events, beyond);
    const std::uint64_t level_seed = derive_seed(spec.seed, li);
    std::vector<MatrixXd> truth(M);
    std::vector<std::vector<Run>> runs(M, std::vector<Run>(K));

    auto replicate = [&](std::size_t m) {
      ScenarioConfig local = cfg;
      local.seed = derive_seed(level_seed, m);
      const Simulation sim = simulate(local);
      truth[m] = sim.states;
      for (std::size_t k = 0; k < K; ++k) {
        MethodContext ctx;
        ctx.pi_x = local.state_contamination.probability;
        ctx.pi_y = local.measurement_contamination.probability;
        ctx.seed = derive_seed(local.seed, 1000 + k);
        ctx.contamination = c;
        const auto t0 = std::chrono::steady_clock::now();
        try {
          MatrixXd x = run_method(spec.methods[k], local.model, sim.obs, ctx);
          if (!x.allFinite()) throw Error("estimate is not finite");
          runs[m][k].x = std::move(x);
        } catch (const std::exception& e) {
          runs[m][k].error = e.what();
        }
        runs[m][k].seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      }
    };

    if (spec.threads == 1) {
      for (std::size_t m = 0; m < M; ++m) replicate(m);
    } else {
      std::atomic<std::size_t> next{0};
      std::mutex err_mu;
      std::exception_ptr first_error;
      std::vector<std::thread> pool;
      const std::size_t nt = std::min<std::size_t>(static_cast<std::size_t>(spec.threads), M);
      for (std::size_t i = 0; i < nt; ++i) {
        pool.emplace_back([&] {
          for (std::size_t m = next++; m < M; m = next++) {
            try {
              replicate(m);
            } catch (...) {
              std::lock_guard<std::mutex> lock(err_mu);
              if (!first_error) first_error = std::current_exception();
            }
          }
        });
      }
      for (auto& th : pool) th.join();
      if (first_error) std::rethrow_exception(first_error);
    }

    for (std::size_t k = 0; k < K; ++k) {
      MethodLevelResult r;
      r.method = spec.methods[k].label();
      r.level = level;
      std::vector<MatrixXd> tr, est;
      std::vector<double> run_vel;
      for (std::size_t m = 0; m < M; ++m) {
        const Run& run = runs[m][k];
        r.seconds += run.seconds;
        if (!run.x) {
          ++r.failures;
          if (r.errors.size() < 3) r.errors.push_back("replication " + std::to_string(m) + ": " + run.error);
          continue;
        }
        ++r.successes;
        r.run_position.push_back(run_rmse(truth[m], *run.x, t.positions));
        r.run_index.push_back(static_cast<int>(m));
        run_vel.push_back(run_rmse(truth[m], *run.x, t.velocities));
        tr.push_back(truth[m]);
        est.push_back(*run.x);
      }
      if (r.successes > 0) {
        r.rmse_position = rmse_series(tr, est, t.positions);
        r.rmse_velocity = rmse_series(tr, est, t.velocities);
        r.rmse_state = rmse_series(tr, est, all);
        r.time_avg_position = r.rmse_position.mean();
        r.time_avg_velocity = r.rmse_velocity.mean();
        r.time_avg_state = r.rmse_state.mean();
      } else {
        r.time_avg_position = r.time_avg_velocity = r.time_avg_state = std::numeric_limits<double>::quiet_NaN();
      }
      r.position_stats = summarize(r.run_position);
      r.velocity_stats = summarize(run_vel);
      rep.results.push_back(std::move(r));
    }
  }
  return rep;
}

/// Summary table: one row per (level, method).
inline void write_report_csv(std::ostream& os, const RmseReport& r) {
  os << "method,contamination,time_avg_position,time_avg_velocity,time_avg_state,mean_position,std_position,"
        "median_position,mean_velocity,std_velocity,median_velocity,successes,failures\n";
  for (const auto& x : r.results) {
    os << x.method << ',' << fmt(x.level) << ',' << fmt(x.time_avg_position) << ',' << fmt(x.time_avg_velocity) << ','
       << fmt(x.time_avg_state) << ',' << fmt(x.position_stats.mean) << ',' << fmt(x.position_stats.stddev) << ','
       << fmt(x.position_stats.median) << ',' << fmt(x.velocity_stats.mean) << ',' << fmt(x.velocity_stats.stddev)
       << ',' << fmt(x.velocity_stats.median) << ',' << x.successes << ',' << x.failures << '\n';
  }
}

/// Plot-ready long format: method, contamination, n, rmse (position).
inline void write_long_csv(std::ostream& os, const RmseReport& r) {
  os << "method,contamination,n,rmse\n";
  for (const auto& x : r.results) {
    for (Index n = 0; n < x.rmse_position.size(); ++n) {
      os << x.method << ',' << fmt(x.level) << ',' << n << ',' << fmt(x.rmse_position(n)) << '\n';
    }
  }
}

}  // namespace drs
