#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "drs/drs.hpp"

namespace drs::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kConfig = 3,
  kInvalidInput = 4,
  kNumerical = 5,
  kIo = 6,
  kUnsupported = 7,
};

inline const char* exit_code_help() {
  return "Exit codes:\n"
         "  0  success\n"
         "  1  other failure\n"
         "  2  usage error (unknown flag, bad option value)\n"
         "  3  malformed config or CSV\n"
         "  4  invalid input (dimension mismatch, out-of-range parameter)\n"
         "  5  numerical failure (singular matrix)\n"
         "  6  file could not be read or written\n"
         "  7  model not supported by the chosen method\n"
         "Errors are reported on stderr as one JSON object.\n"
         "Output goes to --out, else to $DRS_OUTPUT_DIR/<default name>, else to stdout.";
}

inline void report_error(std::ostream& err, int code, const std::string& type, const std::string& message) {
  nlohmann::json j;
  j["error"] = {{"code", code}, {"type", type}, {"message", message}};
  err << j.dump() << '\n';
}

/// Where a result goes: an explicit path, "-" for stdout, or the default
/// file name inside $DRS_OUTPUT_DIR when that is set.
inline std::string resolve_output(const std::string& explicit_path, const std::string& default_name) {
  if (!explicit_path.empty()) return explicit_path;
  if (const char* dir = std::getenv("DRS_OUTPUT_DIR"); dir && *dir) {
    return (std::filesystem::path(dir) / default_name).string();
  }
  return "-";
}

inline void emit(const std::string& dest, const std::string& text, std::ostream& out) {
  if (dest == "-") {
    out << text;
    out.flush();
  } else {
    write_file(dest, text);
  }
}

struct Options {
  // simulate
  std::string scenario_path;
  std::optional<std::uint64_t> seed;
  // smooth / select-lambda / stream
  std::string model_path;
  std::string obs_path;
  std::string method = "drs-cd";
  std::string format = "csv";
  double lambda_x = 0.05;
  double lambda_y = 0.01;
  int max_sweeps = 500;
  double tol = 1e-8;
  double kappa = 0.05;
  int admm_iters = 5000;
  double admm_tol = 1e-6;
  double huber_lambda = 1.345;
  int huber_iters = 200;
  double huber_tol = 1e-10;
  int ransac_draws = 100;
  std::string ransac_sampling = "measurement";
  bool ransac_no_huber = false;
  std::uint64_t method_seed = 0;
  std::string criterion = "avd";
  std::string grid = "10x10";
  double floor_ratio = 1e-3;
  double pi_x = 0.0;
  double pi_y = 0.0;
  std::string solver = "auto";
  int lag = 10;
  int window = 10;
  int sweeps = 50;
  bool reanchor = false;
  // bench
  std::string experiment_path;
  std::optional<int> replications;
  std::optional<int> threads;
  std::string out_dir;
  // common
  std::string out;
  bool verbose = false;
};

namespace detail {

inline StateSpaceModel load_model(const std::string& path) {
  return parse_config(read_file(path), [](const json& j) { return model_from_json(j); });
}

inline ObservationBatch load_obs(const std::string& path, std::istream& in) {
  if (path == "-") return read_observations(in);
  return read_observations_file(path);
}

inline void print_warnings(std::ostream& err, const std::vector<std::string>& w, bool verbose) {
  if (!verbose) return;
  for (const auto& s : w) err << "warning: " << s << '\n';
}

inline std::pair<int, int> parse_grid(const std::string& g) {
  const auto x = g.find('x');
  if (x == std::string::npos) throw InvalidArgument("grid must look like 10x10");
  try {
    std::size_t p1 = 0, p2 = 0;
    const int a = std::stoi(g.substr(0, x), &p1);
    const int b = std::stoi(g.substr(x + 1), &p2);
    if (p1 != x || p2 != g.size() - x - 1 || a < 1 || b < 1) throw InvalidArgument("");
    return {a, b};
  } catch (const std::exception&) {
    throw InvalidArgument("grid must look like 10x10 with positive counts, got '" + g + "'");
  }
}

inline int run_simulate(const Options& o, std::ostream& out, std::ostream& err) {
  ScenarioConfig s = parse_config(read_file(o.scenario_path), [](const json& j) { return scenario_from_json(j); });
  if (o.seed) s.seed = *o.seed;
  const Simulation sim = simulate(s);
  std::ostringstream ss;
  write_trajectory_csv(ss, sim);
  emit(resolve_output(o.out, "trajectory.csv"), ss.str(), out);
  if (o.verbose) err << "simulated " << s.horizon << " steps\n";
  return kOk;
}

inline int run_smooth(const Options& o, std::istream& in, std::ostream& out, std::ostream& err) {
  const StateSpaceModel model = load_model(o.model_path);
  const ObservationBatch obs = load_obs(o.obs_path, in);
  require_valid(model, obs);
  SmootherOutput result;
  if (o.method == "ks") {
    result = fixed_interval_ks(model, obs);
  } else if (o.method == "drs-cd") {
    if (model.generalized()) throw UnsupportedModel("drs-cd needs G_n = I; use drs-admm for a tall noise gain");
    result = drs_fixed_interval(model, obs, DrsConfig{o.lambda_x, o.lambda_y, o.max_sweeps, o.tol});
  } else if (o.method == "drs-admm") {
    AdmmConfig c{o.lambda_x, o.lambda_y, o.kappa, o.admm_iters, o.admm_tol};
    result = admm_drs(model, obs, c);
  } else if (o.method == "huber") {
    HuberConfig h{o.huber_lambda, o.huber_lambda, o.huber_iters, o.huber_tol};
    result = huber_smoother(model, obs, h);
  } else if (o.method == "ransac") {
    RansacConfig r;
    r.draws = o.ransac_draws;
    r.threshold = o.huber_lambda;
    r.seed = o.method_seed;
    r.then_huber = !o.ransac_no_huber;
    r.huber = HuberConfig{o.huber_lambda, o.huber_lambda, o.huber_iters, o.huber_tol};
    r.sampling = o.ransac_sampling == "state" ? RansacSampling::State : RansacSampling::Measurement;
    result = ransac_smoother(model, obs, r);
  } else {
    throw InvalidArgument("unknown method '" + o.method + "'");
  }
  print_warnings(err, result.warnings, o.verbose);
  if (o.format == "json") {
    emit(resolve_output(o.out, "estimate.json"), estimate_to_json(result).dump(2) + "\n", out);
  } else {
    std::ostringstream ss;
    write_estimate_csv(ss, result);
    emit(resolve_output(o.out, "estimate.csv"), ss.str(), out);
  }
  return kOk;
}

inline int run_select(const Options& o, std::istream& in, std::ostream& out, std::ostream& err) {
  const StateSpaceModel model = load_model(o.model_path);
  const ObservationBatch obs = load_obs(o.obs_path, in);
  require_valid(model, obs);
  const auto [ix, iy] = parse_grid(o.grid);
  const LambdaGrid grid = build_grid(lambda_bounds(model, obs), ix, iy, o.floor_ratio);
  PathOptions opt;
  if (o.solver == "admm" || (o.solver == "auto" && model.generalized())) {
    opt.solver = PathSolver::Admm;
  } else if (o.solver == "cd" || o.solver == "auto") {
    if (model.generalized()) throw UnsupportedModel("coordinate descent needs G_n = I; use --solver admm");
    opt.solver = PathSolver::CoordinateDescent;
  }
  opt.cd.max_sweeps = o.max_sweeps;
  opt.cd.tol = o.tol;
  opt.admm.kappa = o.kappa;
  opt.admm.max_iters = o.admm_iters;
  opt.admm.tol = o.admm_tol;
  const PathResult path = solve_path(model, obs, grid, opt);
  const SelectionResult sel = o.criterion == "fraction" ? select_known_fraction(path, model, obs, o.pi_x, o.pi_y)
                                                        : select_avd(path, model, obs);
  print_warnings(err, grid.warnings, o.verbose);
  if (o.verbose) {
    err << "selected lambda_x=" << fmt(sel.lambda_x) << " lambda_y=" << fmt(sel.lambda_y) << " (ix=" << sel.ix
        << ", iy=" << sel.iy << ")\n";
  }
  std::ostringstream ss;
  write_selection_csv(ss, sel);
  emit(resolve_output(o.out, "selection.csv"), ss.str(), out);
  return kOk;
}

/// Fixed-lag smoothing over a measurement stream. Rows are read one at a time
/// and each estimate is written as soon as it is available.
inline int run_stream(const Options& o, std::istream& in, std::ostream& out, std::ostream& err) {
  const StateSpaceModel model = load_model(o.model_path);
  std::ifstream file;
  std::istream* src = &in;
  if (o.obs_path != "-") {
    file.open(o.obs_path);
    if (!file) throw IoError("cannot open '" + o.obs_path + "'");
    src = &file;
  }
  const std::string dest = resolve_output(o.out, "stream.csv");
  std::ofstream fout;
  std::ostream* sink = &out;
  if (dest != "-") {
    fout.open(dest, std::ios::binary);
    if (!fout) throw IoError("cannot write '" + dest + "'");
    sink = &fout;
  }

  OnlineConfig cfg;
  cfg.lag = o.lag;
  cfg.window = o.window;
  cfg.sweeps = o.sweeps;
  cfg.lambda_x = o.lambda_x;
  cfg.lambda_y = o.lambda_y;
  cfg.kappa = o.kappa;
  cfg.reanchor = o.reanchor;
  OnlineDrs online(model, cfg);

  *sink << 'n';
  for (Index d = 0; d < model.state_dim(); ++d) *sink << ",xhat" << d;
  *sink << '\n';
  auto write = [&](const std::vector<Emission>& em) {
    for (const auto& e : em) {
      *sink << e.n;
      for (Index d = 0; d < e.x.size(); ++d) *sink << ',' << fmt(e.x(d));
      *sink << '\n';
    }
    sink->flush();
  };

  std::string line;
  std::vector<std::string> header;
  std::vector<int> ycols;
  long row = 0;
  while (std::getline(*src, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (header.empty()) {
      header = cells;
      CsvTable t;
      t.header = header;
      ycols = prefixed_columns(t, "y");
      if (ycols.empty()) throw ConfigError("stream header has no y0 column");
      continue;
    }
    ++row;
    if (cells.size() != header.size()) throw ConfigError("stream row " + std::to_string(row) + " has wrong cell count");
    if (cells[static_cast<std::size_t>(ycols.front())].empty()) continue;  // n = 0 row of a trajectory file
    VectorXd y(static_cast<Index>(ycols.size()));
    for (std::size_t d = 0; d < ycols.size(); ++d) y(static_cast<Index>(d)) = parse_double(cells[static_cast<std::size_t>(ycols[d])]);
    write(online.push(y));
  }
  if (header.empty()) throw ConfigError("stream input is empty");
  write(online.finish());
  if (o.verbose) err << "streamed " << online.time() << " measurements\n";
  return kOk;
}

inline int run_bench(const Options& o, std::ostream& out, std::ostream& err) {
  ExperimentSpec spec =
      parse_config(read_file(o.experiment_path), [](const json& j) { return experiment_from_json(j); });
  if (o.replications) spec.replications = *o.replications;
  if (o.seed) spec.seed = *o.seed;
  if (o.threads) spec.threads = *o.threads;
  const RmseReport rep = run_experiment(spec);
  std::ostringstream summary, long_csv;
  write_report_csv(summary, rep);
  write_long_csv(long_csv, rep);
  std::string dir = o.out_dir;
  if (dir.empty()) {
    if (const char* env = std::getenv("DRS_OUTPUT_DIR"); env && *env) dir = env;
  }
  if (dir.empty()) {
    out << summary.str();
  } else {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
    const std::filesystem::path p(dir);
    write_file((p / "report.csv").string(), summary.str());
    write_file((p / "rmse_long.csv").string(), long_csv.str());
    write_file((p / "report.json").string(), report_to_json(rep).dump(2) + "\n");
  }
  if (o.verbose) {
    for (const auto& r : rep.results) {
      err << r.method << " @ " << fmt(r.level) << ": " << r.successes << " ok, " << r.failures << " failed\n";
      for (const auto& e : r.errors) err << "  " << e << '\n';
    }
  }
  return kOk;
}

}  // namespace detail

/// Parses argv and runs one subcommand. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Doubly robust smoothing of linear state-space models with state and measurement outliers"};
  app.footer(exit_code_help());
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  Options o;
  app.add_flag("-v,--verbose", o.verbose, "Diagnostics on stderr");

  auto* sim = app.add_subcommand("simulate", "Draw a contaminated trajectory from a scenario config");
  sim->add_option("--scenario", o.scenario_path, "Scenario JSON")->required()->check(CLI::ExistingFile);
  sim->add_option("--seed", o.seed, "Override the scenario seed");
  sim->add_option("-o,--out", o.out, "Output CSV (- for stdout)");

  auto add_model_obs = [&](CLI::App* c) {
    c->add_option("--model", o.model_path, "Model JSON")->required()->check(CLI::ExistingFile);
    c->add_option("--obs", o.obs_path, "Observation CSV with y0, y1, ... columns (- for stdin)")->required();
    c->add_option("-o,--out", o.out, "Output file (- for stdout)");
  };
  auto add_lambdas = [&](CLI::App* c) {
    c->add_option("--lambda-x", o.lambda_x, "State outlier weight")->check(CLI::NonNegativeNumber);
    c->add_option("--lambda-y", o.lambda_y, "Measurement outlier weight")->check(CLI::NonNegativeNumber);
  };
  auto add_solver = [&](CLI::App* c) {
    c->add_option("--max-sweeps", o.max_sweeps, "Coordinate descent sweep limit")->check(CLI::PositiveNumber);
    c->add_option("--tol", o.tol, "Relative objective change that stops coordinate descent")
        ->check(CLI::PositiveNumber);
    c->add_option("--kappa", o.kappa, "ADMM penalty")->check(CLI::PositiveNumber);
    c->add_option("--admm-iters", o.admm_iters, "ADMM iteration limit")->check(CLI::PositiveNumber);
    c->add_option("--admm-tol", o.admm_tol, "ADMM residual tolerance")->check(CLI::PositiveNumber);
  };

  auto* smooth = app.add_subcommand("smooth", "Fixed-interval smoothing of an observation batch");
  add_model_obs(smooth);
  smooth->add_option("--method", o.method, "Estimator")
      ->check(CLI::IsMember({"ks", "drs-cd", "drs-admm", "huber", "ransac"}));
  smooth->add_option("--format", o.format, "Output format")->check(CLI::IsMember({"csv", "json"}));
  add_lambdas(smooth);
  add_solver(smooth);
  smooth->add_option("--huber-lambda", o.huber_lambda, "Huber threshold and RANSAC inlier threshold")
      ->check(CLI::PositiveNumber);
  smooth->add_option("--huber-iters", o.huber_iters, "IRLS iteration limit")->check(CLI::PositiveNumber);
  smooth->add_option("--huber-tol", o.huber_tol, "IRLS stop on the largest state change")
      ->check(CLI::PositiveNumber);
  smooth->add_option("--ransac-draws", o.ransac_draws, "RANSAC random draws")->check(CLI::PositiveNumber);
  smooth->add_option("--ransac-sampling", o.ransac_sampling, "Rows drawn at random")
      ->check(CLI::IsMember({"measurement", "state"}));
  smooth->add_flag("--ransac-no-huber", o.ransac_no_huber, "Refit the consensus set by least squares");
  smooth->add_option("--seed", o.method_seed, "RANSAC seed");

  auto* sel = app.add_subcommand("select-lambda", "Solve a lambda grid and pick a point");
  add_model_obs(sel);
  sel->add_option("--criterion", o.criterion, "Selection rule")->check(CLI::IsMember({"fraction", "avd"}));
  sel->add_option("--grid", o.grid, "Grid size IxxIy, log-spaced below the critical bounds");
  sel->add_option("--floor", o.floor_ratio, "Smallest grid value as a fraction of the bound")
      ->check(CLI::Range(1e-12, 1.0));
  sel->add_option("--pi-x", o.pi_x, "Known state outlier fraction (fraction rule)")->check(CLI::Range(0.0, 1.0));
  sel->add_option("--pi-y", o.pi_y, "Known measurement outlier fraction (fraction rule)")
      ->check(CLI::Range(0.0, 1.0));
  sel->add_option("--solver", o.solver, "Path solver; auto picks admm for a tall noise gain")
      ->check(CLI::IsMember({"auto", "cd", "admm"}));
  add_solver(sel);

  auto* stream = app.add_subcommand("stream", "Online fixed-lag smoothing over a measurement stream");
  add_model_obs(stream);
  add_lambdas(stream);
  stream->add_option("--lag", o.lag, "Lag l")->check(CLI::NonNegativeNumber);
  stream->add_option("--window", o.window, "Past window w")->check(CLI::NonNegativeNumber);
  stream->add_option("--sweeps", o.sweeps, "Solver iterations per step")->check(CLI::PositiveNumber);
  stream->add_option("--kappa", o.kappa, "ADMM penalty")->check(CLI::PositiveNumber);
  stream->add_flag("--reanchor", o.reanchor, "Advance the anchor filter on outlier-compensated data");

  auto* bench = app.add_subcommand("bench", "Monte-Carlo comparison from an experiment descriptor");
  bench->add_option("--experiment", o.experiment_path, "Experiment JSON")->required()->check(CLI::ExistingFile);
  bench->add_option("--replications", o.replications, "Override M")->check(CLI::PositiveNumber);
  bench->add_option("--seed", o.seed, "Override the master seed");
  bench->add_option("--threads", o.threads, "Worker threads for replications")->check(CLI::PositiveNumber);
  bench->add_option("--out-dir", o.out_dir,
                    "Directory for report.csv, rmse_long.csv, report.json; summary CSV on stdout when unset");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    report_error(err, kUsage, "usage", e.what());
    return kUsage;
  }

  try {
    if (*sim) return detail::run_simulate(o, out, err);
    if (*smooth) return detail::run_smooth(o, in, out, err);
    if (*sel) return detail::run_select(o, in, out, err);
    if (*stream) return detail::run_stream(o, in, out, err);
    if (*bench) return detail::run_bench(o, out, err);
  } catch (const ConfigError& e) {
    report_error(err, kConfig, "config", e.what());
    return kConfig;
  } catch (const IoError& e) {
    report_error(err, kIo, "io", e.what());
    return kIo;
  } catch (const UnsupportedModel& e) {
    report_error(err, kUnsupported, "unsupported_model", e.what());
    return kUnsupported;
  } catch (const SingularMatrix& e) {
    report_error(err, kNumerical, "numerical", e.what());
    return kNumerical;
  } catch (const InvalidArgument& e) {
    report_error(err, kInvalidInput, "invalid_input", e.what());
    return kInvalidInput;
  } catch (const std::exception& e) {
    report_error(err, kFailure, "error", e.what());
    return kFailure;
  }
  return kFailure;
}

}  // namespace drs::cli
