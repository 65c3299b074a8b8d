#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "drs/lambda_select.hpp"
#include "oracle.hpp"

using namespace drs;

namespace {

StateSpaceModel scalar_model(double f, double h, double q, double r, double m0, double s0) {
  return make_model(MatrixXd::Constant(1, 1, f), MatrixXd::Constant(1, 1, h), MatrixXd::Constant(1, 1, q),
                    MatrixXd::Constant(1, 1, r), VectorXd::Constant(1, m0), MatrixXd::Constant(1, 1, s0));
}

ObservationBatch scalar_obs(std::initializer_list<double> ys) {
  ObservationBatch obs;
  for (double v : ys) obs.y.push_back(VectorXd::Constant(1, v));
  return obs;
}

}  // namespace

TEST(LambdaBounds, ZeroDataGivesZeroBounds) {
  const StateSpaceModel m = make_model(MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2),
                                       MatrixXd::Identity(2, 2), VectorXd::Zero(2), MatrixXd::Identity(2, 2));
  ObservationBatch obs;
  for (int n = 0; n < 4; ++n) obs.y.push_back(VectorXd::Zero(2));
  const LambdaBounds b = lambda_bounds(m, obs);
  EXPECT_EQ(b.lambda_y, 0.0);
  EXPECT_EQ(b.lambda_x, 0.0);
  const LambdaGrid g = build_grid(b, 10, 10);
  EXPECT_EQ(g.Ix(), 1);
  EXPECT_EQ(g.Iy(), 1);
  EXPECT_EQ(g.x[0], 0.0);
  EXPECT_EQ(g.warnings.size(), 2u);
}

TEST(LambdaBounds, ScalarTwoStepMatchesDenseFormula) {
  const StateSpaceModel m = scalar_model(0.9, 1.5, 0.7, 0.4, 0.3, 2.0);
  const ObservationBatch obs = scalar_obs({1.0, -2.5});
  const MatrixXd x = oracle::dense_wls(m, obs);
  double by = 0, bx = 0;
  for (int n = 1; n <= 2; ++n) {
    by = std::max(by, std::abs((obs.y[n - 1](0) - 1.5 * x(n, 0)) / 0.4));
    bx = std::max(bx, std::abs((x(n, 0) - 0.9 * x(n - 1, 0)) / 0.7));
  }
  const LambdaBounds b = lambda_bounds(m, obs);
  EXPECT_NEAR(b.lambda_y, by, 1e-12);
  EXPECT_NEAR(b.lambda_x, bx, 1e-12);
}

TEST(LambdaBounds, JustAboveBoundsReturnsSmoother) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const auto inst = oracle::random_instance(rng, 6, 1 + trial % 2, 1 + (trial / 2) % 2, trial % 3 == 0);
    const LambdaBounds b = lambda_bounds(inst.model, inst.obs);
    const SmootherOutput drs =
        drs_fixed_interval(inst.model, inst.obs, DrsConfig{1.000001 * b.lambda_x, 1.000001 * b.lambda_y});
    EXPECT_TRUE(drs.outliers.all_zero());
    const SmootherOutput ks = fixed_interval_ks(inst.model, inst.obs);
    EXPECT_LT((drs.x - ks.x).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(LambdaBounds, JustBelowBoundsActivatesAnOutlier) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 10; ++trial) {
    const auto inst = oracle::random_instance(rng, 6, 2, 2, trial % 2 == 0);
    const LambdaBounds b = lambda_bounds(inst.model, inst.obs);
    const SmootherOutput sx =
        drs_fixed_interval(inst.model, inst.obs, DrsConfig{0.99 * b.lambda_x, 1.000001 * b.lambda_y});
    EXPECT_GT(sx.outliers.support_x(), 0);
    const SmootherOutput sy =
        drs_fixed_interval(inst.model, inst.obs, DrsConfig{1.000001 * b.lambda_x, 0.99 * b.lambda_y});
    EXPECT_GT(sy.outliers.support_y(), 0);
  }
}

TEST(LambdaBounds, GeneralizedBoundsCollapseAdmmToSmoother) {
  const double tau = 1.0;
  const StateSpaceModel m = dwna_model(tau, 0.5 * MatrixXd::Identity(2, 2), 4.0 * MatrixXd::Identity(2, 2),
                                       VectorXd::Zero(4), MatrixXd::Identity(4, 4));
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  ObservationBatch obs;
  for (int n = 1; n <= 12; ++n) obs.y.push_back(VectorXd{{2.0 * g(rng) + n, 2.0 * g(rng) - n}});
  const LambdaBounds b = lambda_bounds(m, obs);
  EXPECT_GT(b.lambda_x, 0.0);
  AdmmConfig cfg{1.000001 * b.lambda_x, 1.000001 * b.lambda_y};
  cfg.tol = 1e-10;
  cfg.max_iters = 200000;
  const AdmmOutput a = admm_drs(m, obs, cfg);
  EXPECT_TRUE(a.outliers.all_zero());
  const SmootherOutput ks = fixed_interval_ks(m, obs);
  EXPECT_LT((a.x - ks.x).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(LambdaGrid, Endpoints) {
  const auto two = log_axis(1.0, 2, 0.01);
  ASSERT_EQ(two.size(), 2u);
  EXPECT_EQ(two[0], 1.0);
  EXPECT_EQ(two[1], 0.01);
  const auto three = log_axis(1.0, 3, 0.01);
  EXPECT_EQ(three[0], 1.0);
  EXPECT_NEAR(three[1], 0.1, 1e-15);
  EXPECT_EQ(three[2], 0.01);
}

TEST(LambdaGrid, DefaultGridIsTenByTenDescending) {
  const LambdaGrid g = build_grid({2.0, 3.0}, 10, 10);
  EXPECT_EQ(g.Ix(), 10);
  EXPECT_EQ(g.Iy(), 10);
  EXPECT_EQ(g.floor_ratio, 1e-3);
  EXPECT_EQ(g.x.front(), 2.0);
  EXPECT_EQ(g.y.front(), 3.0);
  EXPECT_NEAR(g.x.back(), 2e-3, 1e-18);
  for (int i = 1; i < 10; ++i) {
    EXPECT_LT(g.x[i], g.x[i - 1]);
    EXPECT_GT(g.x[i], 0.0);
    EXPECT_NEAR(g.x[i] / g.x[i - 1], std::pow(1e-3, 1.0 / 9.0), 1e-12);
  }
}

TEST(LambdaGrid, RejectsBadArguments) {
  EXPECT_THROW(build_grid({1, 1}, 0, 2), InvalidArgument);
  EXPECT_THROW(build_grid({1, 1}, 2, 2, 1.0), InvalidArgument);
  EXPECT_THROW(build_grid({1, 1}, 2, 2, 0.0), InvalidArgument);
}

TEST(Path, SinglePointAtBoundsIsSmoother) {
  std::mt19937_64 rng(3);
  const auto inst = oracle::random_instance(rng, 8, 2, 2, false);
  const LambdaBounds b = lambda_bounds(inst.model, inst.obs);
  const LambdaGrid g = build_grid({1.000001 * b.lambda_x, 1.000001 * b.lambda_y}, 1, 1);
  const PathResult p = solve_path(inst.model, inst.obs, g);
  ASSERT_EQ(p.points.size(), 1u);
  EXPECT_TRUE(p.points[0].out.outliers.all_zero());
  EXPECT_LT((p.points[0].out.x - fixed_interval_ks(inst.model, inst.obs).x).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Path, WarmAndColdStartsAgree) {
  std::mt19937_64 rng(4);
  const auto inst = oracle::random_instance(rng, 10, 2, 2, false);
  const LambdaGrid g = build_grid(lambda_bounds(inst.model, inst.obs), 3, 3, 0.01);
  PathOptions warm, cold;
  warm.cd.tol = cold.cd.tol = 1e-12;
  warm.cd.max_sweeps = cold.cd.max_sweeps = 100000;
  cold.warm_start = false;
  const PathResult pw = solve_path(inst.model, inst.obs, g, warm);
  const PathResult pc = solve_path(inst.model, inst.obs, g, cold);
  const Interval iv = full_interval(inst.model, inst.obs);
  const Precisions prec(iv);
  for (std::size_t i = 0; i < pw.points.size(); ++i) {
    const auto& a = pw.points[i];
    const auto& c = pc.points[i];
    ASSERT_TRUE(a.valid && c.valid);
    const double fa = drs_objective(iv, prec, a.out.x, a.out.outliers, a.lambda_x, a.lambda_y);
    const double fc = drs_objective(iv, prec, c.out.x, c.out.outliers, c.lambda_x, c.lambda_y);
    EXPECT_NEAR(fa, fc, 1e-6 * std::max(1.0, std::abs(fc)));
  }
}

TEST(Path, WarmStartSavesSweeps) {
  std::mt19937_64 rng(6);
  const auto inst = oracle::random_instance(rng, 40, 2, 2, true, 0.1);
  const LambdaGrid g = build_grid(lambda_bounds(inst.model, inst.obs), 10, 10);
  PathOptions warm, cold;
  cold.warm_start = false;
  const PathResult pw = solve_path(inst.model, inst.obs, g, warm);
  const PathResult pc = solve_path(inst.model, inst.obs, g, cold);
  int hardest = 0;
  for (const auto& p : pc.points) hardest = std::max(hardest, p.out.iterations);
  EXPECT_LT(pw.total_iterations, 100L * hardest);
  EXPECT_LT(pw.total_iterations, pc.total_iterations);
}

TEST(Path, FailedPointsAreMarkedAndSkipped) {
  std::mt19937_64 rng(7);
  const auto inst = oracle::random_instance(rng, 5, 1, 1, true);
  LambdaGrid g = build_grid({1.0, 1.0}, 2, 2);
  g.x[1] = -1.0;  // rejected by the solver
  const PathResult p = solve_path(inst.model, inst.obs, g);
  EXPECT_FALSE(p.at(1, 0).valid);
  EXPECT_FALSE(p.at(1, 0).error.empty());
  EXPECT_TRUE(p.at(0, 1).valid);
  const SelectionResult s = select_avd(p, inst.model, inst.obs);
  EXPECT_TRUE(std::isnan(s.criterion(0, 1)));
}

TEST(SelectFraction, ZeroFractionsPickTheBoundsCorner) {
  std::mt19937_64 rng(8);
  const auto inst = oracle::random_instance(rng, 20, 2, 2, true);
  const LambdaBounds b = lambda_bounds(inst.model, inst.obs);
  const LambdaGrid g = build_grid({1.000001 * b.lambda_x, 1.000001 * b.lambda_y}, 4, 4);
  const PathResult p = solve_path(inst.model, inst.obs, g);
  const SelectionResult s = select_known_fraction(p, inst.model, inst.obs, 0.0, 0.0);
  EXPECT_EQ(s.ix, 0);
  EXPECT_EQ(s.iy, 0);
  EXPECT_EQ(s.criterion(0, 0), 0.0);
  EXPECT_TRUE(s.best.outliers.all_zero());
}

TEST(SelectFraction, ExactMatchHasZeroCriterion) {
  std::mt19937_64 rng(9);
  const auto inst = oracle::random_instance(rng, 20, 2, 2, true);
  const LambdaGrid g = build_grid(lambda_bounds(inst.model, inst.obs), 4, 4, 0.01);
  const PathResult p = solve_path(inst.model, inst.obs, g);
  const auto& target = p.at(2, 1);
  const double fx = detail::support_fraction(target.out.outliers.ox);
  const double fy = detail::support_fraction(target.out.outliers.oy);
  const SelectionResult s = select_known_fraction(p, inst.model, inst.obs, fx, fy);
  EXPECT_EQ(s.criterion(s.iy, s.ix), 0.0);
  EXPECT_EQ(s.frac_x(s.iy, s.ix), fx);
  EXPECT_EQ(s.frac_y(s.iy, s.ix), fy);
  // Ties resolve toward larger lambdas.
  for (int iy = 0; iy < g.Iy(); ++iy)
    for (int ix = 0; ix < g.Ix(); ++ix)
      if (s.criterion(iy, ix) == 0.0) EXPECT_LE(g.x[ix] + g.y[iy], s.lambda_x + s.lambda_y);
  EXPECT_THROW(select_known_fraction(p, inst.model, inst.obs, 1.5, 0.0), InvalidArgument);
}

TEST(SelectFraction, RecoversTenPercentContamination) {
  const StateSpaceModel m = make_model(MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2),
                                       0.1 * MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2), VectorXd::Zero(2),
                                       MatrixXd::Identity(2, 2));
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ScenarioConfig sc;
    sc.model = m;
    sc.horizon = 100;
    sc.seed = seed;
    sc.measurement_contamination.probability = 0.1;
    sc.measurement_contamination.dist.type = OutlierDistribution::Type::UniformZeroMean;
    sc.measurement_contamination.dist.variance = 400.0;
    const Simulation sim = simulate(sc);
    const LambdaGrid g = build_grid(lambda_bounds(m, sim.obs), 10, 10);
    const PathResult p = solve_path(m, sim.obs, g);
    const SelectionResult s = select_known_fraction(p, m, sim.obs, 0.0, 0.1);
    // One grid step in lambda_y: the fraction jump to either neighbour.
    double step = 0.0;
    for (int d : {-1, 1}) {
      const int iy = s.iy + d;
      if (iy >= 0 && iy < g.Iy()) step = std::max(step, std::abs(s.frac_y(iy, s.ix) - s.frac_y(s.iy, s.ix)));
    }
    EXPECT_LE(std::abs(s.frac_y(s.iy, s.ix) - 0.1), step + 1e-12) << "seed " << seed;
  }
}

TEST(Avd, UnitWhitenedResidualsGiveOne) {
  const StateSpaceModel m = scalar_model(1.0, 1.0, 1.0, 1.0, 0.0, 1.0);
  const ObservationBatch obs = scalar_obs({3.0});
  const Interval iv = full_interval(m, obs);
  MatrixXd x(2, 1);
  x << 1.0, 2.0;
  EXPECT_EQ(sigma2_hat(iv, x, OutlierField::zeros(1, 1, 1)), 1.0);
}

TEST(Avd, HandComputedTwoStepScalar) {
  const StateSpaceModel m = scalar_model(0.5, 2.0, 4.0, 0.25, 1.0, 2.0);
  const ObservationBatch obs = scalar_obs({3.0, -1.0});
  const Interval iv = full_interval(m, obs);
  MatrixXd x(3, 1);
  x << 0.0, 1.0, -0.5;
  OutlierField o = OutlierField::zeros(2, 1, 1);
  o.ox(1, 0) = 0.5;
  o.oy(0, 0) = 0.5;
  // prior: (0-1)^2/2 = 0.5
  // n=1: v = 3 - 2 - 0.5 = 0.5 -> 0.25/0.25 = 1;  w = 1 - 0 = 1 -> 1/4
  // n=2: v = -1 + 1 = 0;  w = -0.5 - 0.5 - 0.5 = -1.5 -> 2.25/4
  // denominator N*Dy + (N+1)*Dx = 2 + 3 = 5
  const double expected = (0.5 + 1.0 + 0.25 + 0.0 + 0.5625) / 5.0;
  EXPECT_DOUBLE_EQ(sigma2_hat(iv, x, o), expected);
}

TEST(Avd, DenominatorCountsEveryScalarResidual) {
  // Residuals each of unit whitened size: sum = N*Dy + (N+1)*Dx.
  const int N = 3;
  const StateSpaceModel m = make_model(MatrixXd::Identity(2, 2), MatrixXd::Identity(3, 2), MatrixXd::Identity(2, 2),
                                       MatrixXd::Identity(3, 3), VectorXd::Zero(2), MatrixXd::Identity(2, 2));
  ObservationBatch obs;
  MatrixXd x(N + 1, 2);
  x.row(0) << 1.0, -1.0;
  for (int n = 1; n <= N; ++n) {
    x.row(n) = x.row(n - 1) + Eigen::RowVectorXd::Constant(2, 1.0);
    VectorXd y(3);
    y << x(n, 0) + 1.0, x(n, 1) - 1.0, -1.0;
    obs.y.push_back(y);
  }
  EXPECT_DOUBLE_EQ(sigma2_hat(full_interval(m, obs), x, OutlierField::zeros(N, 2, 3)), 1.0);
}

TEST(Avd, GroundTruthCompensationIsNearOne) {
  ScenarioConfig sc;
  MatrixXd F = MatrixXd::Identity(4, 4);
  F(0, 1) = F(2, 3) = 1.0;
  MatrixXd H = MatrixXd::Zero(2, 4);
  H(0, 0) = H(1, 2) = 1.0;
  sc.model = make_model(F, H, VectorXd{{1.0, 0.001, 1.0, 0.001}}.asDiagonal(), 5.0 * MatrixXd::Identity(2, 2),
                        VectorXd::Zero(4), MatrixXd::Identity(4, 4));
  sc.horizon = 500;
  sc.seed = 77;
  sc.measurement_contamination.probability = 0.1;
  sc.measurement_contamination.dist.type = OutlierDistribution::Type::UniformZeroMean;
  sc.measurement_contamination.dist.variance = 20000.0;
  const Simulation sim = simulate(sc);
  const double s2 = sigma2_hat(full_interval(sc.model, sim.obs), sim.states, sim.outliers);
  EXPECT_NEAR(s2, 1.0, 0.15);
}

TEST(Avd, SelectionIsReproducible) {
  std::mt19937_64 rng(10);
  const auto inst = oracle::random_instance(rng, 30, 2, 2, false, 0.1);
  const LambdaGrid g = build_grid(lambda_bounds(inst.model, inst.obs), 5, 5);
  std::ostringstream a, b;
  write_selection_csv(a, select_avd(solve_path(inst.model, inst.obs, g), inst.model, inst.obs));
  write_selection_csv(b, select_avd(solve_path(inst.model, inst.obs, g), inst.model, inst.obs));
  EXPECT_EQ(a.str(), b.str());
  std::istringstream in(a.str());
  std::string line;
  int rows = 0;
  std::getline(in, line);
  EXPECT_EQ(line, "ix,iy,lambda_x,lambda_y,criterion,frac_ox,frac_oy,sigma2");
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 25);
}

TEST(Avd, AdmmPathOnGeneralizedModel) {
  const StateSpaceModel m = dwna_model(1.0, 0.5 * MatrixXd::Identity(2, 2), 4.0 * MatrixXd::Identity(2, 2),
                                       VectorXd::Zero(4), MatrixXd::Identity(4, 4));
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g;
  ObservationBatch obs;
  for (int n = 1; n <= 15; ++n) obs.y.push_back(VectorXd{{2.0 * g(rng), 2.0 * g(rng) + (n == 7 ? 60.0 : 0.0)}});
  PathOptions opt;
  opt.solver = PathSolver::Admm;
  const LambdaGrid grid = build_grid(lambda_bounds(m, obs), 3, 3);
  EXPECT_THROW(solve_path(m, obs, grid), UnsupportedModel);
  const PathResult p = solve_path(m, obs, grid, opt);
  const SelectionResult s = select_avd(p, m, obs);
  EXPECT_TRUE(std::isfinite(s.criterion(s.iy, s.ix)));
  EXPECT_EQ(p.at(0, 0).w.rows(), 15);
  EXPECT_EQ(p.at(0, 0).w.cols(), 2);
}
