#include "iresnet/commands.hpp"
#include "iresnet/model.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace {

using namespace iresnet;
using graph::Activation;

const Index kHidden[] = {32, 32};

SpectralDenseLayer linear_layer(const Matrix& w) {
  SpectralDenseLayer l;
  l.weight = w;
  l.bias = RowVector::Zero(w.rows());
  l.u = Vector::Ones(w.rows()).normalized();
  l.v = Vector::Ones(w.cols()).normalized();
  l.coeff = 0.9;
  return l;
}

ResidualBlock linear_block(const Matrix& w) { return ResidualBlock({linear_layer(w)}, Activation::elu); }

IResNetModel single_stage(const ResidualBlock& block) {
  IResNetModel m;
  m.dim = block.dim();
  m.stages.push_back({ActNormLayer::identity(m.dim), block});
  return m;
}

IResNetModel random_model(Index dim, int blocks, double coeff, std::uint64_t seed) {
  Rng rng(seed);
  IResNetModel m = IResNetModel::random(dim, blocks, kHidden, coeff, Activation::elu, ActNormPlacement::before, rng);
  for (auto& s : m.stages) {
    s.actnorm.log_scale = 0.3 * rng.normal_matrix(dim, 1);
    s.actnorm.shift = 0.3 * rng.normal_matrix(dim, 1);
    s.actnorm.initialized = true;
  }
  return m;
}

TEST(Forward, ZeroBlocksAreIdentity) {
  IResNetModel m = random_model(2, 3, 0.9, 1);
  for (auto& s : m.stages) {
    s.actnorm = ActNormLayer::identity(2);
    for (auto& l : s.block.layers()) {
      l.weight.setZero();
      l.bias.setZero();
    }
  }
  Rng rng(2);
  const Matrix x = rng.normal_matrix(10, 2);
  EXPECT_EQ(forward(m, x), x);
}

TEST(Forward, HalfLinearBlock) {
  const IResNetModel m = single_stage(linear_block(0.5 * Matrix::Identity(2, 2)));
  Rng rng(3);
  const Matrix x = rng.normal_matrix(10, 2);
  EXPECT_LT((forward(m, x) - 1.5 * x).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Forward, SampledLipschitzWithinProduct) {
  const IResNetModel m = random_model(2, 5, 0.9, 4);
  const BiLipschitzBounds b = bi_lipschitz_bounds(m);
  Rng rng(5);
  const Matrix x = 2.0 * rng.normal_matrix(10000, 2);
  const Matrix y = x + 0.5 * rng.normal_matrix(10000, 2);
  const Vector ratio = (forward(m, x) - forward(m, y)).rowwise().norm().cwiseQuotient((x - y).rowwise().norm());
  EXPECT_LE(ratio.maxCoeff(), b.forward);
}

TEST(Forward, NonFiniteNamesStage) {
  IResNetModel m = random_model(2, 3, 0.9, 6);
  m.stages[1].actnorm.log_scale(0) = 1000.0;
  try {
    forward(m, Matrix(Matrix::Ones(2, 2)));
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("stage 1"), std::string::npos) << e.what();
  }
}

TEST(Forward, PlacementAfterRoundTrips) {
  Rng rng(7);
  IResNetModel m = IResNetModel::random(2, 4, kHidden, 0.9, Activation::elu, ActNormPlacement::after, rng);
  for (auto& s : m.stages) {
    s.actnorm.log_scale = 0.3 * rng.normal_matrix(2, 1);
    s.actnorm.shift = rng.normal_matrix(2, 1);
  }
  const Matrix x = rng.normal_matrix(50, 2);
  const InverseResult inv = inverse(m, forward(m, x), {1e-12, 500});
  EXPECT_TRUE(inv.converged);
  EXPECT_LT((inv.x - x).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(InverseBlock, ZeroBlockOneIteration) {
  const ResidualBlock block = linear_block(Matrix::Zero(2, 2));
  Rng rng(8);
  const Matrix y = rng.normal_matrix(4, 2);
  const auto [x, report] = inverse_block(block, y);
  EXPECT_EQ(x, y);
  EXPECT_EQ(report.iterations, 1);
  EXPECT_TRUE(report.converged);
}

TEST(InverseBlock, GeometricIterates) {
  const ResidualBlock block = linear_block(Matrix::Constant(1, 1, 0.5));
  const Matrix y = Matrix::Constant(1, 1, 3.0);
  const double expected[] = {3.0, 1.5, 2.25, 1.875};
  for (int n = 0; n < 4; ++n) EXPECT_DOUBLE_EQ(fixed_point_iterate(block, y, n)(0, 0), expected[n]) << n;
  double prev = std::abs(fixed_point_iterate(block, y, 0)(0, 0) - 2.0);
  for (int n = 1; n < 30; ++n) {
    const double err = std::abs(fixed_point_iterate(block, y, n)(0, 0) - 2.0);
    EXPECT_NEAR(err / prev, 0.5, 1e-9) << n;
    prev = err;
  }
  const auto [x, report] = inverse_block(block, y, {1e-12, 200});
  EXPECT_NEAR(x(0, 0), 2.0, 1e-12);
  EXPECT_TRUE(report.converged);
}

TEST(InverseBlock, RandomBlockRoundTrip) {
  Rng rng(9);
  const ResidualBlock block = ResidualBlock::random(2, kHidden, 0.9, Activation::elu, rng);
  const Matrix y = 2.0 * rng.normal_matrix(1000, 2);
  const auto [x, report] = inverse_block(block, y, {1e-9, 500});
  EXPECT_TRUE(report.converged);
  EXPECT_LT(((x + block.forward(x)) - y).rowwise().norm().maxCoeff(), 1e-8);
  EXPECT_LE(report.a_posteriori_bound, 1e-9);
}

TEST(InverseBlock, CapReachedIsFlagged) {
  Rng rng(10);
  const ResidualBlock block = ResidualBlock::random(2, kHidden, 0.9, Activation::elu, rng);
  const auto [x, report] = inverse_block(block, rng.normal_matrix(5, 2), {1e-15, 3});
  EXPECT_FALSE(report.converged);
  EXPECT_EQ(report.iterations, 3);
  EXPECT_EQ(x.rows(), 5);
}

TEST(InverseBlock, NonContractiveRefused) {
  const ResidualBlock block = linear_block(1.5 * Matrix::Identity(2, 2));
  EXPECT_THROW(inverse_block(block, Matrix(Matrix::Ones(1, 2))), ContractError);
}

TEST(InverseBlock, APrioriBoundDominatesError) {
  Rng rng(11);
  for (double c : {0.5, 0.9, 0.97}) {
    const ResidualBlock block = ResidualBlock::random(2, kHidden, c, Activation::elu, rng);
    const double lip = block.lipschitz_bound();
    const Matrix y = 2.0 * rng.normal_matrix(200, 2);
    const Matrix x_true = fixed_point_iterate(block, y, 3000);
    ASSERT_LT(((x_true + block.forward(x_true)) - y).cwiseAbs().maxCoeff(), 1e-12);
    const Vector step1 = (fixed_point_iterate(block, y, 1) - y).rowwise().norm();
    for (int n = 1; n <= 60; ++n) {
      const Vector err = (fixed_point_iterate(block, y, n) - x_true).rowwise().norm();
      const Vector bound = std::pow(lip, n) / (1 - lip) * step1;
      EXPECT_LE((err - bound).maxCoeff(), 1e-13) << "c " << c << " n " << n;
    }
  }
}

TEST(InverseBlock, ErrorDecaySlope) {
  Rng rng(12);
  for (double c : {0.5, 0.7, 0.9}) {
    const ResidualBlock block = ResidualBlock::random(2, kHidden, c, Activation::elu, rng);
    const Matrix x = 2.0 * rng.normal_matrix(256, 2);
    const Matrix y = x + block.forward(x);
    std::vector<int> iters;
    std::vector<double> errors;
    for (int n = 1; n <= 60; ++n) {
      iters.push_back(n);
      errors.push_back((fixed_point_iterate(block, y, n) - x).rowwise().norm().maxCoeff());
    }
    EXPECT_LE(log_error_slope(iters, errors), std::log(block.lipschitz_bound()) + 0.05) << c;
  }
}

TEST(InverseBlock, SmallerCoefficientNeedsFewerIterations) {
  const Matrix y = Rng(13).normal_matrix(500, 2) * 2.0;
  const IResNetModel slow = random_model(2, 1, 0.9, 14);
  const IResNetModel fast = random_model(2, 1, 0.5, 14);
  const auto [xs, rs] = inverse_block(slow.stages[0].block, y);
  const auto [xf, rf] = inverse_block(fast.stages[0].block, y);
  EXPECT_LT(rf.iterations, rs.iterations);
}

TEST(Inverse, IdentityModel) {
  IResNetModel m = single_stage(linear_block(Matrix::Zero(3, 3)));
  Rng rng(15);
  const Matrix z = rng.normal_matrix(10, 3);
  EXPECT_EQ(inverse(m, z).x, z);
}

TEST(Inverse, TwoStageLinearClosedForm) {
  Matrix a1(2, 2), a2(2, 2);
  a1 << 0.3, 0.1, -0.2, 0.25;
  a2 << -0.4, 0.2, 0.05, 0.3;
  IResNetModel m;
  m.dim = 2;
  m.stages.push_back({ActNormLayer::identity(2), linear_block(a1)});
  m.stages.push_back({ActNormLayer::identity(2), linear_block(a2)});
  m.stages[0].actnorm.log_scale << std::log(2.0), std::log(0.5);
  m.stages[0].actnorm.shift << 1.0, -1.0;
  m.stages[1].actnorm.log_scale << std::log(1.5), std::log(0.8);
  m.stages[1].actnorm.shift << -0.5, 0.25;

  Rng rng(16);
  const Matrix z = rng.normal_matrix(20, 2);
  // Per stage: y = s*x + t, z = (I + A^T) y in row form; invert in reverse.
  Matrix x = z;
  for (int t = 1; t >= 0; --t) {
    const Matrix a = t == 1 ? a2 : a1;
    const Eigen::MatrixXd inv = (Eigen::MatrixXd::Identity(2, 2) + Eigen::MatrixXd(a.transpose())).inverse();
    x = x * inv;
    const auto& an = m.stages[static_cast<std::size_t>(t)].actnorm;
    x.rowwise() -= an.shift.transpose();
    x.array().rowwise() /= an.scale().transpose().array();
  }
  const InverseResult inv = inverse(m, z, {1e-14, 1000});
  EXPECT_LT((inv.x - x).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((forward(m, x) - z).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Inverse, RoundTripWithinComposedTolerance) {
  const IResNetModel m = random_model(2, 6, 0.9, 17);
  const double tol = 1e-8;
  Rng rng(18);
  const Matrix x = 2.0 * rng.normal_matrix(1000, 2);
  const InverseResult inv = inverse(m, forward(m, x), {tol, 200});
  ASSERT_TRUE(inv.converged);
  const double limit = tol * static_cast<double>(m.stages.size()) * bi_lipschitz_bounds(m).inverse;
  EXPECT_LE((inv.x - x).rowwise().norm().maxCoeff(), limit);
  for (const auto& r : inv.reports) EXPECT_LE(r.a_posteriori_bound, tol);
}

TEST(BiLipschitz, HalfBlock) {
  const auto b = bi_lipschitz_bounds(single_stage(linear_block(0.5 * Matrix::Identity(2, 2))));
  EXPECT_NEAR(b.forward, 1.5, 1e-15);
  EXPECT_NEAR(b.inverse, 2.0, 1e-15);
}

TEST(BiLipschitz, ZeroBlock) {
  const auto b = bi_lipschitz_bounds(single_stage(linear_block(Matrix::Zero(2, 2))));
  EXPECT_EQ(b.forward, 1.0);
  EXPECT_EQ(b.inverse, 1.0);
}

TEST(BiLipschitz, SampledRatiosWithinCertificates) {
  const IResNetModel m = random_model(2, 4, 0.9, 19);
  const BiLipschitzBounds b = bi_lipschitz_bounds(m);
  Rng rng(20);
  const Matrix x = 2.0 * rng.normal_matrix(100000, 2);
  const Matrix y = x + rng.normal_matrix(100000, 2);
  const Matrix fx = forward(m, x), fy = forward(m, y);
  const Vector dx = (x - y).rowwise().norm(), df = (fx - fy).rowwise().norm();
  EXPECT_LE(df.cwiseQuotient(dx).maxCoeff(), b.forward);
  EXPECT_LE(dx.cwiseQuotient(df).maxCoeff(), b.inverse);
}

}  // namespace
