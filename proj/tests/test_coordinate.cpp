#include <gtest/gtest.h>

#include <random>

#include "drs/coordinate.hpp"
#include "oracle.hpp"

using namespace drs;

namespace {

StateSpaceModel identity_model(Index dx, Index dy) {
  return make_model(MatrixXd::Identity(dx, dx), MatrixXd::Identity(dy, dx), MatrixXd::Identity(dx, dx),
                    MatrixXd::Identity(dy, dy), VectorXd::Zero(dx), MatrixXd::Identity(dx, dx));
}

double golden_section(const std::function<double(double)>& f, double lo, double hi) {
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - phi * (b - a), d = a + phi * (b - a);
  for (int i = 0; i < 300; ++i) {
    if (f(c) < f(d)) {
      b = d;
    } else {
      a = c;
    }
    c = b - phi * (b - a);
    d = a + phi * (b - a);
  }
  return 0.5 * (a + b);
}

}  // namespace

TEST(SoftThreshold, Values) {
  EXPECT_EQ(soft_threshold(2.0, 0.5), 1.5);
  EXPECT_EQ(soft_threshold(-0.3, 0.5), 0.0);
  EXPECT_EQ(soft_threshold(-2.0, 0.5), -1.5);
  for (double g : {-3.7, 0.0, 1e-300, 42.0}) EXPECT_EQ(soft_threshold(g, 0.0), g);
}

TEST(Objective, ZeroResidualConstantState) {
  const StateSpaceModel m = identity_model(2, 2);
  ObservationBatch obs{{VectorXd::Zero(2), VectorXd::Zero(2), VectorXd::Zero(2)}};
  const MatrixXd x = MatrixXd::Zero(4, 2);
  EXPECT_EQ(drs_objective(m, obs, x, OutlierField::zeros(3, 2, 2), 1.0, 1.0), 0.0);
}

TEST(Objective, SingleOutlierPerturbation) {
  const StateSpaceModel m = identity_model(1, 1);
  ObservationBatch obs{{VectorXd::Constant(1, 1.0), VectorXd::Constant(1, 2.0)}};
  MatrixXd x(3, 1);
  x << 0.1, 0.5, 1.5;
  OutlierField o = OutlierField::zeros(2, 1, 1);
  const double base = drs_objective(m, obs, x, o, 0.3, 0.7);
  o.oy(1, 0) = 0.25;
  const double pert = drs_objective(m, obs, x, o, 0.3, 0.7);
  // residual at n=2 goes from 0.5 to 0.25
  EXPECT_NEAR(pert - base, 0.7 * 0.25 + 0.5 * (0.25 * 0.25 - 0.5 * 0.5), 1e-15);
}

TEST(Objective, MatchesStackedForm) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    auto inst = oracle::random_instance(rng, 5, 2, 2, trial % 2 == 0);
    const Interval iv = full_interval(inst.model, inst.obs);
    const MatrixXd x = oracle::random_matrix(rng, 6, 2, 2.0);
    OutlierField o{oracle::random_matrix(rng, 5, 2, 1.0), oracle::random_matrix(rng, 5, 2, 1.0)};
    const auto p = oracle::assemble(iv, 0.4, 0.9);
    EXPECT_NEAR(drs_objective(inst.model, inst.obs, x, o, 0.4, 0.9), p.objective(p.pack(x, o)),
                1e-10 * std::max(1.0, p.objective(p.pack(x, o))));
  }
}

TEST(XStep, ZeroCompensationIsPlainSmoother) {
  std::mt19937_64 rng(14);
  auto inst = oracle::random_instance(rng, 8, 2, 2, false);
  CoordinateDescent cd(full_interval(inst.model, inst.obs), {1.0, 1.0});
  cd.x_step();
  EXPECT_EQ(cd.x(), fixed_interval_ks(inst.model, inst.obs).x);
}

TEST(XStep, CompensatedCostHasZeroGradient) {
  std::mt19937_64 rng(15);
  auto inst = oracle::random_instance(rng, 5, 2, 1, false);
  const Interval iv = full_interval(inst.model, inst.obs);
  CoordinateDescent cd(iv, {1.0, 1.0});
  OutlierField o{oracle::random_matrix(rng, 5, 2, 1.0), oracle::random_matrix(rng, 5, 1, 1.0)};
  cd.set_outliers(o);
  cd.x_step();
  const double h = 1e-5;
  double gmax = 0.0;
  for (Index i = 0; i < cd.x().rows(); ++i) {
    for (Index j = 0; j < cd.x().cols(); ++j) {
      MatrixXd xp = cd.x(), xm = cd.x();
      xp(i, j) += h;
      xm(i, j) -= h;
      gmax = std::max(gmax, std::abs(drs_objective(inst.model, inst.obs, xp, o, 0, 0) -
                                     drs_objective(inst.model, inst.obs, xm, o, 0, 0)) /
                                (2 * h));
    }
  }
  EXPECT_LT(gmax, 1e-7);
}

TEST(OStep, DiagonalCaseIsScalarSoftThreshold) {
  StateSpaceModel m = identity_model(2, 1);
  VectorXd qd(2);
  qd << 0.5, 2.0;
  m.process_noise = {MatrixXd(qd.asDiagonal())};
  ObservationBatch obs{{VectorXd::Zero(1)}};
  const double q11 = 2.0;
  CoordinateDescent cd(full_interval(m, obs), {q11, 1.0});
  // State residual 3 in the first coordinate: alpha = 3 q11, threshold 1.
  MatrixXd x = MatrixXd::Zero(2, 2);
  x(1, 0) = 3.0;
  cd.set_x(x);
  EXPECT_NEAR(cd.update_state_outlier(1, 0), 2.0, 1e-14);
  EXPECT_EQ(cd.update_state_outlier(1, 1), 0.0);
}

TEST(OStep, NonDiagonalSweepIsCoordinatewiseExact) {
  std::mt19937_64 rng(16);
  auto inst = oracle::random_instance(rng, 3, 2, 2, false, 0.5);
  const Interval iv = full_interval(inst.model, inst.obs);
  const double lx = 0.05, ly = 0.08;
  CoordinateDescent cd(iv, {lx, ly});
  OutlierField start{oracle::random_matrix(rng, 3, 2, 1.0), oracle::random_matrix(rng, 3, 2, 1.0)};
  cd.set_outliers(start);
  cd.x_step();
  for (int k = 1; k <= 3; ++k) {
    for (int d = 0; d < 2; ++d) {
      // 1-D oracle: minimize the full cost over this coordinate only.
      OutlierField probe = cd.outliers();
      auto f = [&](double v) {
        probe.ox(k - 1, d) = v;
        return drs_objective(iv, cd.precisions(), cd.x(), probe, lx, ly);
      };
      const double best = golden_section(f, -50.0, 50.0);
      const double got = cd.update_state_outlier(k, d);
      EXPECT_NEAR(got, best, 1e-6) << "ox " << k << "," << d;
    }
  }
  for (int k = 1; k <= 3; ++k) {
    for (int d = 0; d < 2; ++d) {
      OutlierField probe = cd.outliers();
      auto f = [&](double v) {
        probe.oy(k - 1, d) = v;
        return drs_objective(iv, cd.precisions(), cd.x(), probe, lx, ly);
      };
      const double best = golden_section(f, -50.0, 50.0);
      const double got = cd.update_measurement_outlier(k, d);
      EXPECT_NEAR(got, best, 1e-6) << "oy " << k << "," << d;
    }
  }
}

TEST(OStep, LargeLambdaGivesZero) {
  std::mt19937_64 rng(17);
  auto inst = oracle::random_instance(rng, 4, 2, 2, false, 0.5);
  CoordinateDescent cd(full_interval(inst.model, inst.obs), {1e9, 1e9});
  cd.x_step();
  for (int k = 1; k <= 4; ++k) {
    EXPECT_EQ(cd.update_state_outlier(k, 0), 0.0);
    EXPECT_EQ(cd.update_measurement_outlier(k, 1), 0.0);
  }
}

TEST(CoordinateDescent, GrossOutlierIsFlaggedAtItsIndex) {
  const StateSpaceModel m = make_model(MatrixXd::Identity(1, 1), MatrixXd::Identity(1, 1),
                                       MatrixXd::Constant(1, 1, 0.1), MatrixXd::Constant(1, 1, 0.1),
                                       VectorXd::Zero(1), MatrixXd::Identity(1, 1));
  ObservationBatch obs{{VectorXd::Constant(1, 0.1), VectorXd::Constant(1, 25.0), VectorXd::Constant(1, -0.05)}};
  const double ly = 1.0, lx = 1e3;
  const SmootherOutput s = drs_fixed_interval(m, obs, {lx, ly, 500, 1e-14});
  EXPECT_EQ(s.outliers.oy(0, 0), 0.0);
  EXPECT_NE(s.outliers.oy(1, 0), 0.0);
  EXPECT_EQ(s.outliers.oy(2, 0), 0.0);
  const auto ref = oracle::prox_grad_drs(m, obs, lx, ly);
  const double obj = s.objective_trace.back();
  EXPECT_LT(std::abs(obj - ref.objective) / std::abs(ref.objective), 1e-6);
}

TEST(CoordinateDescent, TraceIsNonincreasing) {
  std::mt19937_64 rng(18);
  for (int trial = 0; trial < 10; ++trial) {
    auto inst = oracle::random_instance(rng, 8, 2, 2, trial % 2 == 0, 0.3);
    const SmootherOutput s = drs_fixed_interval(inst.model, inst.obs, {0.3, 0.3, 500, 1e-12});
    for (std::size_t i = 1; i < s.objective_trace.size(); ++i) {
      EXPECT_LE(s.objective_trace[i], s.objective_trace[i - 1] + 1e-12) << trial << " @" << i;
    }
  }
}

TEST(CoordinateDescent, ConvergedSolutionIsStationary) {
  std::mt19937_64 rng(19);
  auto inst = oracle::random_instance(rng, 5, 2, 2, false, 0.4);
  const Interval iv = full_interval(inst.model, inst.obs);
  const SmootherOutput s = drs_solve(iv, {0.2, 0.2, 5000, 1e-15});
  EXPECT_TRUE(s.converged);
  EXPECT_LT(oracle::check_stationarity(iv, s.x, s.outliers, 0.2, 0.2).max_violation(), 1e-6);
}

TEST(CoordinateDescent, MaxSweepsReportsNonConvergence) {
  std::mt19937_64 rng(20);
  auto inst = oracle::random_instance(rng, 8, 2, 2, false, 0.4);
  const SmootherOutput s = drs_fixed_interval(inst.model, inst.obs, {0.01, 0.01, 1, 1e-15});
  EXPECT_FALSE(s.converged);
  EXPECT_EQ(s.iterations, 1);
  EXPECT_FALSE(s.warnings.empty());
}

TEST(CoordinateDescent, RejectsGeneralizedModelAndBadConfig) {
  const StateSpaceModel g = dwna_model(1.0, MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2), VectorXd::Zero(4),
                                       MatrixXd::Identity(4, 4));
  ObservationBatch obs{{VectorXd::Zero(2)}};
  EXPECT_THROW(drs_fixed_interval(g, obs, {1.0, 1.0}), UnsupportedModel);
  const StateSpaceModel m = identity_model(1, 1);
  ObservationBatch o1{{VectorXd::Zero(1)}};
  EXPECT_THROW(drs_fixed_interval(m, o1, {-1.0, 1.0}), InvalidArgument);
  EXPECT_THROW(drs_fixed_interval(m, o1, {1.0, 1.0, 10, 0.0}), InvalidArgument);
}

TEST(CoordinateDescent, CachedPrecisionsMatchInverses) {
  std::mt19937_64 rng(21);
  auto inst = oracle::random_instance(rng, 3, 2, 2, false);
  const Precisions p(full_interval(inst.model, inst.obs));
  EXPECT_LT((p.q(1) - inst.model.Q(1).inverse()).norm(), 1e-12 * p.q(1).norm());
  EXPECT_LT((p.r(2) - inst.model.R(2).inverse()).norm(), 1e-12 * p.r(2).norm());
  EXPECT_FALSE(p.diagonal_q);
}

TEST(Oracle, ProxGradAtLargeLambdaIsDenseWls) {
  std::mt19937_64 rng(22);
  auto inst = oracle::random_instance(rng, 4, 2, 1, false);
  const auto res = oracle::prox_grad_drs(inst.model, inst.obs, 1e6, 1e6);
  EXPECT_TRUE(res.o.all_zero());
  EXPECT_LT((res.x - oracle::dense_wls(inst.model, inst.obs)).norm(), 1e-6);
  for (std::size_t i = 1; i < res.trace.size(); ++i) EXPECT_LE(res.trace[i], res.trace[i - 1]);
}

TEST(Oracle, DenseWlsZeroData) {
  const StateSpaceModel m = identity_model(2, 2);
  ObservationBatch obs{{VectorXd::Zero(2), VectorXd::Zero(2)}};
  EXPECT_EQ(oracle::dense_wls(m, obs).cwiseAbs().maxCoeff(), 0.0);
  const auto rep = oracle::check_stationarity(full_interval(m, obs), MatrixXd::Zero(3, 2),
                                              OutlierField::zeros(2, 2, 2), 0.0, 0.0);
  EXPECT_EQ(rep.max_violation(), 0.0);
}

TEST(Oracle, StationarityFlagsSmootherBelowBounds) {
  const StateSpaceModel m = identity_model(1, 1);
  ObservationBatch obs{{VectorXd::Constant(1, 0.1), VectorXd::Constant(1, 30.0), VectorXd::Constant(1, 0.2)}};
  const SmootherOutput ks = fixed_interval_ks(m, obs);
  const auto rep = oracle::check_stationarity(full_interval(m, obs), ks.x, ks.outliers, 0.5, 0.5);
  EXPECT_GT(rep.max_violation(), 0.0);
}
