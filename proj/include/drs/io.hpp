#pragma once

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "drs/bench.hpp"
#include "drs/format.hpp"
#include "drs/kalman.hpp"
#include "drs/model.hpp"

namespace drs {

using json = nlohmann::json;

/// Malformed or inconsistent configuration file.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A file could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// JSON <-> Eigen. Matrices are row-major nested lists.

namespace io {

inline const json& field(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw ConfigError(std::string("missing field '") + key + "'");
  return j.at(key);
}

inline double number(const json& j, const std::string& what) {
  if (!j.is_number()) throw ConfigError(what + " must be a number");
  return j.get<double>();
}

inline VectorXd vector_from_json(const json& j, const std::string& what) {
  if (!j.is_array()) throw ConfigError(what + " must be a list of numbers");
  VectorXd v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Index>(i)) = number(j[i], what);
  return v;
}

inline MatrixXd matrix_from_json(const json& j, const std::string& what) {
  if (!j.is_array() || j.empty() || !j.front().is_array())
    throw ConfigError(what + " must be a non-empty list of rows");
  const std::size_t cols = j.front().size();
  MatrixXd m(static_cast<Index>(j.size()), static_cast<Index>(cols));
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != cols) throw ConfigError(what + ": rows have different lengths");
    for (std::size_t c = 0; c < cols; ++c) m(static_cast<Index>(r), static_cast<Index>(c)) = number(j[r][c], what);
  }
  return m;
}

/// One matrix (time-invariant) or a list of matrices, one per step.
inline std::vector<MatrixXd> sequence_from_json(const json& j, const std::string& what) {
  if (j.is_array() && !j.empty() && j.front().is_array() && !j.front().empty() && j.front().front().is_array()) {
    std::vector<MatrixXd> out;
    for (std::size_t i = 0; i < j.size(); ++i) out.push_back(matrix_from_json(j[i], what + "[" + std::to_string(i) + "]"));
    return out;
  }
  return {matrix_from_json(j, what)};
}

inline json to_json(const VectorXd& v) {
  json a = json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline json to_json(const MatrixXd& m) {
  json a = json::array();
  for (Index r = 0; r < m.rows(); ++r) a.push_back(to_json(VectorXd(m.row(r).transpose())));
  return a;
}

inline json to_json(const std::vector<MatrixXd>& seq) {
  if (seq.size() == 1) return to_json(seq.front());
  json a = json::array();
  for (const auto& m : seq) a.push_back(to_json(m));
  return a;
}

}  // namespace io

// ---------------------------------------------------------------------------
// Models and scenarios.

/// Model schema: either explicit matrices
///   {"F", "H", "Q", "R", "m0", "Sigma0", optional "G"}
/// or the planar target model
///   {"dwna": {"tau": 1}, "Q", "R", "m0", "Sigma0"}.
/// F, G, H, Q, R may be a single matrix or a list with one matrix per step.
inline StateSpaceModel model_from_json(const json& j) {
  using namespace io;
  if (!j.is_object()) throw ConfigError("model must be an object");
  StateSpaceModel m;
  if (j.contains("dwna")) {
    const double tau = j.at("dwna").is_object() && j.at("dwna").contains("tau")
                           ? number(j.at("dwna").at("tau"), "dwna.tau")
                           : 1.0;
    if (!(tau > 0.0)) throw ConfigError("dwna.tau must be positive");
    m = dwna_model(tau, MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2), VectorXd::Zero(4),
                   MatrixXd::Identity(4, 4));
  } else {
    m.transition = sequence_from_json(field(j, "F"), "F");
    m.observation = sequence_from_json(field(j, "H"), "H");
    if (j.contains("G")) m.noise_gain = sequence_from_json(j.at("G"), "G");
  }
  m.process_noise = sequence_from_json(field(j, "Q"), "Q");
  m.measurement_noise = sequence_from_json(field(j, "R"), "R");
  m.m0 = vector_from_json(field(j, "m0"), "m0");
  m.Sigma0 = matrix_from_json(field(j, "Sigma0"), "Sigma0");
  if (const auto r = validate(m); !r.ok()) throw InvalidArgument("invalid model: " + r.failures.front());
  return m;
}

inline json model_to_json(const StateSpaceModel& m) {
  using io::to_json;
  json j;
  j["F"] = to_json(m.transition);
  j["H"] = to_json(m.observation);
  if (!m.noise_gain.empty()) j["G"] = to_json(m.noise_gain);
  j["Q"] = to_json(m.process_noise);
  j["R"] = to_json(m.measurement_noise);
  j["m0"] = to_json(m.m0);
  j["Sigma0"] = to_json(m.Sigma0);
  return j;
}

inline OutlierDistribution distribution_from_json(const json& j) {
  using namespace io;
  OutlierDistribution d;
  const std::string type = field(j, "type").get<std::string>();
  if (type == "uniform") {
    d.type = OutlierDistribution::Type::Uniform;
    d.low = number(field(j, "low"), "low");
    d.high = number(field(j, "high"), "high");
    if (!(d.low < d.high)) throw ConfigError("uniform outliers need low < high");
    return d;
  }
  if (type == "laplace") {
    d.type = OutlierDistribution::Type::Laplace;
  } else if (type == "uniform-zero-mean") {
    d.type = OutlierDistribution::Type::UniformZeroMean;
  } else if (type == "gaussian") {
    d.type = OutlierDistribution::Type::Gaussian;
  } else {
    throw ConfigError("unknown outlier distribution '" + type + "'");
  }
  d.variance = number(field(j, "variance"), "variance");
  if (!(d.variance > 0.0)) throw ConfigError("outlier variance must be positive");
  return d;
}

inline Contamination contamination_from_json(const json& j, const Contamination& base) {
  Contamination c = base;
  if (!j.is_object()) throw ConfigError("contamination must be an object");
  if (j.contains("probability")) c.probability = io::number(j.at("probability"), "probability");
  if (j.contains("per_entry")) c.per_entry = j.at("per_entry").get<bool>();
  if (j.contains("replace")) c.replace = j.at("replace").get<bool>();
  if (j.contains("distribution")) c.dist = distribution_from_json(j.at("distribution"));
  return c;
}

inline std::vector<FixedEvent> events_from_json(const json& j, const std::string& what) {
  if (!j.is_array()) throw ConfigError(what + " must be a list");
  std::vector<FixedEvent> out;
  for (const auto& e : j) out.push_back({io::field(e, "n").get<int>(), io::vector_from_json(io::field(e, "value"), what)});
  return out;
}

/// Scenario schema: "model" (see model_from_json) or "preset" naming a
/// registered scenario, plus optional "horizon", "tau", "initial_state",
/// "maneuvers", "measurement_events", "state_contamination",
/// "measurement_contamination", "seed", "trajectory_seed". Fields given
/// next to a preset override it.
inline ScenarioConfig scenario_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("scenario must be an object");
  ScenarioConfig s;
  if (j.contains("preset")) {
    const ScenarioTemplate t = find_scenario(j.at("preset").get<std::string>());
    s = t.base;
    if (t.contamination != Contaminate::Measurement) {
      s.state_contamination.probability = t.state_level.value_or(t.levels.front());
    }
    if (t.contamination != Contaminate::State) s.measurement_contamination.probability = t.levels.front();
  }
  if (j.contains("model")) s.model = model_from_json(j.at("model"));
  if (!j.contains("preset") && !j.contains("model")) throw ConfigError("scenario needs 'model' or 'preset'");
  if (j.contains("horizon")) s.horizon = j.at("horizon").get<int>();
  if (j.contains("tau")) s.tau = io::number(j.at("tau"), "tau");
  if (j.contains("initial_state")) s.initial_state = io::vector_from_json(j.at("initial_state"), "initial_state");
  if (j.contains("maneuvers")) s.maneuvers = events_from_json(j.at("maneuvers"), "maneuvers");
  if (j.contains("measurement_events"))
    s.measurement_events = events_from_json(j.at("measurement_events"), "measurement_events");
  if (j.contains("state_contamination"))
    s.state_contamination = contamination_from_json(j.at("state_contamination"), s.state_contamination);
  if (j.contains("measurement_contamination"))
    s.measurement_contamination = contamination_from_json(j.at("measurement_contamination"), s.measurement_contamination);
  if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("trajectory_seed")) {
    if (j.at("trajectory_seed").is_null()) {
      s.trajectory_seed.reset();
    } else {
      s.trajectory_seed = j.at("trajectory_seed").get<std::uint64_t>();
    }
  }
  if (auto errs = validate(s); !errs.empty()) throw InvalidArgument("invalid scenario: " + errs.front());
  return s;
}

inline MethodSpec method_from_json(const json& j) {
  if (j.is_string()) return method_preset(j.get<std::string>());
  if (!j.is_object()) throw ConfigError("method must be a name or an object");
  MethodSpec m = j.contains("preset") ? method_preset(j.at("preset").get<std::string>()) : MethodSpec{};
  if (j.contains("kind")) m.kind = j.at("kind").get<std::string>();
  if (m.kind.empty()) throw ConfigError("method needs 'kind' or 'preset'");
  const auto kinds = method_kinds();
  if (std::find(kinds.begin(), kinds.end(), m.kind) == kinds.end())
    throw ConfigError("unknown method kind '" + m.kind + "'");
  auto num = [&](const char* k, double& dst) {
    if (j.contains(k)) dst = io::number(j.at(k), k);
  };
  auto integer = [&](const char* k, int& dst) {
    if (j.contains(k)) dst = j.at(k).get<int>();
  };
  if (j.contains("name")) m.name = j.at("name").get<std::string>();
  num("lambda_x", m.lambda_x);
  num("lambda_y", m.lambda_y);
  integer("grid_x", m.grid_x);
  integer("grid_y", m.grid_y);
  num("grid_floor", m.grid_floor);
  integer("max_sweeps", m.max_sweeps);
  num("tol", m.tol);
  num("kappa", m.kappa);
  integer("admm_iters", m.admm_iters);
  num("admm_tol", m.admm_tol);
  num("huber_lambda", m.huber_lambda);
  integer("ransac_draws", m.ransac_draws);
  if (j.contains("ransac_sampling")) m.ransac_sampling = j.at("ransac_sampling").get<std::string>();
  if (j.contains("ransac_then_huber")) m.ransac_then_huber = j.at("ransac_then_huber").get<bool>();
  integer("refine_iterations", m.refine_iterations);
  integer("lag", m.lag);
  integer("window", m.window);
  integer("sweeps", m.sweeps);
  return m;
}

/// Experiment schema: {"scenario", "replications", "seed", "horizon",
/// "levels", "contamination", "state_level", "threads", "methods"}; methods
/// are names ("ks", "ransac-1000", ...) or objects with "kind" and parameters.
inline ExperimentSpec experiment_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("experiment must be an object");
  ExperimentSpec e;
  e.scenario = io::field(j, "scenario").get<std::string>();
  if (j.contains("replications")) e.replications = j.at("replications").get<int>();
  if (j.contains("seed")) e.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("horizon")) e.horizon = j.at("horizon").get<int>();
  if (j.contains("levels")) e.levels = j.at("levels").get<std::vector<double>>();
  if (j.contains("contamination")) e.contamination = parse_contaminate(j.at("contamination").get<std::string>());
  if (j.contains("state_level")) e.state_level = io::number(j.at("state_level"), "state_level");
  if (j.contains("threads")) e.threads = j.at("threads").get<int>();
  for (const auto& m : io::field(j, "methods")) e.methods.push_back(method_from_json(m));
  return e;
}

/// Parses JSON text, turning library parse and type errors into ConfigError.
template <class F>
auto parse_config(const std::string& text, F&& build) {
  try {
    return build(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  }
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("write to '" + path + "' failed");
}

// ---------------------------------------------------------------------------
// CSV. Comma-separated, header row, no quoting.

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline CsvTable read_csv(std::istream& in) {
  CsvTable t;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (first) {
      t.header = std::move(cells);
      first = false;
      continue;
    }
    if (cells.size() != t.header.size())
      throw ConfigError("CSV row " + std::to_string(t.rows.size() + 1) + " has " + std::to_string(cells.size()) +
                        " cells, header has " + std::to_string(t.header.size()));
    t.rows.push_back(std::move(cells));
  }
  if (first) throw ConfigError("CSV input is empty");
  return t;
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  if (!s.empty() && *b == '+') ++b;
  const auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e) throw ConfigError("not a number: '" + s + "'");
  return v;
}

/// Columns named prefix0, prefix1, ... in order.
inline std::vector<int> prefixed_columns(const CsvTable& t, const std::string& prefix) {
  std::vector<int> cols;
  for (int d = 0;; ++d) {
    const int c = t.column(prefix + std::to_string(d));
    if (c < 0) break;
    cols.push_back(c);
  }
  return cols;
}

/// Observations from a CSV with columns y0, y1, ... (an `n` column and any
/// other columns are allowed). Rows whose y cells are empty, such as the n = 0
/// row of a trajectory file, are skipped.
inline ObservationBatch read_observations(std::istream& in) {
  const CsvTable t = read_csv(in);
  const std::vector<int> cols = prefixed_columns(t, "y");
  if (cols.empty()) throw ConfigError("observation CSV has no y0 column");
  const int ncol = t.column("n");
  ObservationBatch obs;
  int expect = 1;
  for (const auto& row : t.rows) {
    if (row[static_cast<std::size_t>(cols.front())].empty()) continue;
    if (ncol >= 0 && static_cast<int>(parse_double(row[static_cast<std::size_t>(ncol)])) != expect)
      throw ConfigError("observation rows must be consecutive from n = 1");
    VectorXd y(static_cast<Index>(cols.size()));
    for (std::size_t d = 0; d < cols.size(); ++d) {
      const std::string& cell = row[static_cast<std::size_t>(cols[d])];
      if (cell.empty()) throw ConfigError("missing measurement entry at row " + std::to_string(expect));
      y(static_cast<Index>(d)) = parse_double(cell);
    }
    obs.y.push_back(std::move(y));
    ++expect;
  }
  if (obs.y.empty()) throw ConfigError("observation CSV has no measurement rows");
  return obs;
}

inline ObservationBatch read_observations_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  return read_observations(in);
}

namespace io {

inline void header_block(std::ostream& os, const char* prefix, Index count) {
  for (Index d = 0; d < count; ++d) os << ',' << prefix << d;
}

inline void row_block(std::ostream& os, const MatrixXd& m, Index row) {
  for (Index d = 0; d < m.cols(); ++d) os << ',' << fmt(m(row, d));
}

inline void empty_block(std::ostream& os, Index count) {
  for (Index d = 0; d < count; ++d) os << ',';
}

}  // namespace io

/// Simulated trajectory: n, x0.., y0.., ox0.., oy0..; y and outlier cells are
/// empty on the n = 0 row.
inline void write_trajectory_csv(std::ostream& os, const Simulation& sim) {
  const Index dx = sim.states.cols();
  const Index dy = sim.outliers.oy.cols();
  os << 'n';
  io::header_block(os, "x", dx);
  io::header_block(os, "y", dy);
  io::header_block(os, "ox", dx);
  io::header_block(os, "oy", dy);
  os << '\n';
  for (Index n = 0; n < sim.states.rows(); ++n) {
    os << n;
    io::row_block(os, sim.states, n);
    if (n == 0) {
      io::empty_block(os, dy + dx + dy);
    } else {
      const VectorXd& y = sim.obs.y[static_cast<std::size_t>(n - 1)];
      for (Index d = 0; d < dy; ++d) os << ',' << fmt(y(d));
      io::row_block(os, sim.outliers.ox, n - 1);
      io::row_block(os, sim.outliers.oy, n - 1);
    }
    os << '\n';
  }
}

/// Smoother estimate: n, xhat0.., ohx0.., ohy0..; outlier cells are empty on
/// the n = 0 row, and the outlier blocks are absent when `outliers` is empty.
inline void write_estimate_csv(std::ostream& os, const SmootherOutput& s) {
  const Index dx = s.x.cols();
  const bool has_o = s.outliers.ox.size() + s.outliers.oy.size() > 0;
  const Index odx = s.outliers.ox.cols(), ody = s.outliers.oy.cols();
  os << 'n';
  io::header_block(os, "xhat", dx);
  if (has_o) {
    io::header_block(os, "ohx", odx);
    io::header_block(os, "ohy", ody);
  }
  os << '\n';
  for (Index n = 0; n < s.x.rows(); ++n) {
    os << n;
    io::row_block(os, s.x, n);
    if (has_o) {
      if (n == 0) {
        io::empty_block(os, odx + ody);
      } else {
        io::row_block(os, s.outliers.ox, n - 1);
        io::row_block(os, s.outliers.oy, n - 1);
      }
    }
    os << '\n';
  }
}

inline json estimate_to_json(const SmootherOutput& s) {
  json j;
  j["x"] = io::to_json(s.x);
  j["ox"] = io::to_json(s.outliers.ox);
  j["oy"] = io::to_json(s.outliers.oy);
  j["support_x"] = s.outliers.support_x();
  j["support_y"] = s.outliers.support_y();
  j["iterations"] = s.iterations;
  j["converged"] = s.converged;
  j["objective_trace"] = s.objective_trace;
  j["pinv_fallbacks"] = s.pinv_fallbacks;
  j["warnings"] = s.warnings;
  return j;
}

namespace io {

inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json stats_json(const SummaryStats& s) {
  return {{"mean", number_or_null(s.mean)},
          {"std", number_or_null(s.stddev)},
          {"median", number_or_null(s.median)},
          {"stderr", number_or_null(s.stderr_mean)}};
}

inline json series_json(const VectorXd& v) {
  json a = json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(number_or_null(v(i)));
  return a;
}

}  // namespace io

/// Full report; run times are left out so the document is reproducible.
inline json report_to_json(const RmseReport& r) {
  json j;
  j["scenario"] = r.scenario;
  j["contamination"] = r.contamination;
  j["replications"] = r.replications;
  j["seed"] = r.seed;
  j["horizon"] = r.horizon;
  j["state_level"] = r.state_level ? json(*r.state_level) : json(nullptr);
  j["levels"] = r.levels;
  j["methods"] = r.methods;
  json res = json::array();
  for (const auto& x : r.results) {
    json e;
    e["method"] = x.method;
    e["level"] = x.level;
    e["successes"] = x.successes;
    e["failures"] = x.failures;
    e["errors"] = x.errors;
    e["time_avg_position"] = io::number_or_null(x.time_avg_position);
    e["time_avg_velocity"] = io::number_or_null(x.time_avg_velocity);
    e["time_avg_state"] = io::number_or_null(x.time_avg_state);
    e["position"] = io::stats_json(x.position_stats);
    e["velocity"] = io::stats_json(x.velocity_stats);
    e["rmse_position"] = io::series_json(x.rmse_position);
    e["rmse_velocity"] = io::series_json(x.rmse_velocity);
    e["rmse_state"] = io::series_json(x.rmse_state);
    e["run_position"] = x.run_position;
    res.push_back(std::move(e));
  }
  j["results"] = std::move(res);
  return j;
}

}  // namespace drs
