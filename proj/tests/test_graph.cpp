#include "iresnet/graph.hpp"
#include "iresnet/layers.hpp"
#include "iresnet/logdet.hpp"
#include "iresnet/rng.hpp"
#include "engine_checks.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace {

using namespace iresnet;
using graph::Activation;
using graph::Var;

using engine_check::uniform;

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index i = 0;
  for (const auto& r : rows) {
    Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

TEST(GraphEval, IdentityResidual) {
  const Var x = graph::constant(mat({{1, 2}}));
  const Var zero = graph::constant(Matrix::Zero(1, 2));
  const Matrix y = (x + zero).value();
  EXPECT_EQ(y(0, 0), 1.0);
  EXPECT_EQ(y(0, 1), 2.0);
}

TEST(GraphEval, LinearMap) {
  const Var w = graph::constant(mat({{3, 0}, {0, 1}}));
  const Var x = graph::constant(mat({{1}, {1}}));
  const Matrix y = graph::matmul(w, x).value();
  EXPECT_EQ(y(0, 0), 3.0);
  EXPECT_EQ(y(1, 0), 1.0);
}

TEST(GraphEval, EluDefinition) {
  const Matrix y = graph::activate(graph::constant(mat({{-1, 0, 1}})), Activation::elu).value();
  EXPECT_DOUBLE_EQ(y(0, 0), std::exp(-1.0) - 1.0);
  EXPECT_EQ(y(0, 1), 0.0);
  EXPECT_EQ(y(0, 2), 1.0);
}

TEST(GraphEval, ShapeMismatchNamesOperationAndShapes) {
  const Var a = graph::constant(Matrix::Zero(2, 3));
  try {
    graph::matmul(a, a);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("matmul"), std::string::npos) << what;
    EXPECT_NE(what.find("(2x3)"), std::string::npos) << what;
  }
  EXPECT_THROW(graph::add(a, graph::constant(Matrix::Zero(3, 2))), ShapeError);
}

TEST(GraphVjp, LinearMapGivesRowOfW) {
  Rng rng(1);
  const Matrix w = uniform(rng, 3, 3, -2, 2);
  const Var x = graph::variable(uniform(rng, 1, 3, -2, 2));
  const Var y = graph::matmul(x, graph::constant(w), false, true);
  for (Index i = 0; i < 3; ++i) {
    Matrix e = Matrix::Zero(1, 3);
    e(0, i) = 1.0;
    const Matrix row = graph::vjp(y, x, graph::constant(e)).value();
    EXPECT_LT((row - w.row(i)).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(GraphVjp, ElementwiseSquare) {
  const Var x = graph::variable(mat({{1, 2}}));
  const Matrix g = graph::vjp(graph::mul(x, x), x, graph::constant(mat({{1, 1}}))).value();
  EXPECT_DOUBLE_EQ(g(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(g(0, 1), 4.0);
}

TEST(GraphVjp, MlpBasisVjpsMatchFiniteDifferences) {
  Rng rng(2);
  const Matrix w1 = uniform(rng, 3, 5, -1, 1);
  const Matrix w2 = uniform(rng, 5, 3, -1, 1);
  const Matrix b1 = uniform(rng, 1, 5, -1, 1);
  auto mlp = [&](const Var& x) {
    const Var h = graph::activate(
        graph::matmul(x, graph::constant(w1)) + graph::broadcast_rows(graph::constant(b1), x.rows()),
        Activation::softplus);
    return graph::matmul(h, graph::constant(w2));
  };
  const Vector x0 = uniform(rng, 3, 1, -2, 2);
  const Var x = graph::variable(Matrix(x0.transpose()));
  const Var y = mlp(x);
  Matrix jac(3, 3);
  for (Index i = 0; i < 3; ++i) {
    Matrix e = Matrix::Zero(1, 3);
    e(0, i) = 1.0;
    jac.row(i) = graph::vjp(y, x, graph::constant(e)).value();
  }
  const Matrix fd = oracle::fd_jacobian(
      [&](const Vector& v) {
        graph::NoGradGuard off;
        return Vector(mlp(graph::constant(Matrix(v.transpose()))).value().transpose());
      },
      x0);
  EXPECT_LT((jac - fd).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(GraphVjp, DimensionMismatchRejected) {
  const Var x = graph::variable(Matrix::Zero(1, 2));
  EXPECT_THROW(graph::vjp(graph::mul(x, x), x, graph::constant(Matrix::Zero(1, 3))), ShapeError);
}

TEST(GraphPrimitives, MatchFiniteDifferences) {
  for (const auto& r : engine_check::run_all(3)) {
    EXPECT_LT(r.first_order, engine_check::kFirstOrderTol) << r.name;
    if (!std::isnan(r.second_order)) {
      EXPECT_LT(r.second_order, engine_check::kSecondOrderTol) << r.name;
    }
  }
}

TEST(GraphGradient, HalfSquaredNorm) {
  Rng rng(5);
  const Matrix x0 = uniform(rng, 1, 4, -2, 2);
  const Var x = graph::variable(x0);
  const Var params[] = {x};
  const auto g = graph::gradient(0.5 * graph::sum(graph::mul(x, x)), params);
  EXPECT_LT((g[0] - x0).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GraphGradient, TraceFormOfLinearMap) {
  // g(x) = a x: v^T J_g v = a |v|^2, so its a-derivative is |v|^2.
  const Var a = graph::variable(mat({{0.5}}));
  const Var x = graph::variable(mat({{0.3, -1.2, 2.0}}));
  const Matrix v = mat({{1.5, -0.5, 2.0}});
  const Var gx = graph::mul(graph::broadcast_scalar(a, 1, 3), x);
  const Var w = graph::vjp(gx, x, graph::constant(v));
  const Var params[] = {a};
  const auto g = graph::gradient(graph::sum(graph::mul(w, graph::constant(v))), params);
  EXPECT_NEAR(g[0](0, 0), v.squaredNorm(), 1e-14);
}

TEST(GraphGradient, SeriesLogdetGradientMatchesFiniteDifferences) {
  Rng rng(6);
  const Index hidden[] = {8, 8};
  ResidualBlock block = ResidualBlock::random(3, hidden, 0.8, Activation::elu, rng);
  const Matrix xs = uniform(rng, 4, 3, -2, 2);

  graph::EnableGradGuard on;
  const BlockParams params = block.bind(true);
  const Var x = graph::variable(xs);
  const Var gx = block.forward(x, params);
  const Var ps3 = graph::sum(terms::exact_trace_partial_sums(x, gx, 3)[2]);
  const std::vector<Var> theta = params.all();
  const auto g = graph::gradient(ps3, theta);

  // Deterministic PS(J_g, 3) from numeric Jacobians, perturbing one array at a time.
  auto ps_value = [&](const ResidualBlock& b) {
    double total = 0.0;
    for (const auto& j : block_jacobians(b, xs)) total += power_series_logdet(j, 3);
    return total;
  };
  for (std::size_t l = 0; l < block.layers().size(); ++l) {
    const Matrix fd_w = oracle::fd_gradient(
        [&](const Matrix& w) {
          ResidualBlock b = block;
          b.layers()[l].weight = w;
          return ps_value(b);
        },
        block.layers()[l].weight);
    const Matrix fd_b = oracle::fd_gradient(
        [&](const Matrix& bias) {
          ResidualBlock b = block;
          b.layers()[l].bias = bias;
          return ps_value(b);
        },
        block.layers()[l].bias);
    EXPECT_LT(oracle::rel_err(g[2 * l], fd_w), 1e-4) << "layer " << l << " weight";
    EXPECT_LT(oracle::rel_err(g[2 * l + 1], fd_b), 1e-4) << "layer " << l << " bias";
  }
}

TEST(GraphGradient, UntouchedParametersReceiveZero) {
  const Var x = graph::variable(mat({{1, 2}}));
  const Var unused = graph::variable(mat({{3, 4, 5}}));
  const Var params[] = {x, unused};
  const auto g = graph::gradient(graph::sum(x), params);
  EXPECT_EQ(g[1].rows(), 1);
  EXPECT_EQ(g[1].cols(), 3);
  EXPECT_EQ(g[1].cwiseAbs().maxCoeff(), 0.0);
}

TEST(GraphGradient, NonScalarRejected) {
  const Var x = graph::variable(mat({{1, 2}}));
  const Var params[] = {x};
  EXPECT_THROW(graph::gradient(graph::mul(x, x), params), ShapeError);
}

TEST(GraphGradient, FanOutAccumulates) {
  const Var x = graph::variable(mat({{1.5, -2.0}}));
  const Var params[] = {x};
  const auto g = graph::gradient(graph::sum(x + x), params);
  EXPECT_EQ(g[0](0, 0), 2.0);
  EXPECT_EQ(g[0](0, 1), 2.0);
  // x*x + x: adjoint 2x + 1 through two paths.
  const auto h = graph::gradient(graph::sum(graph::mul(x, x) + x), params);
  EXPECT_DOUBLE_EQ(h[0](0, 0), 4.0);
  EXPECT_DOUBLE_EQ(h[0](0, 1), -3.0);
}

TEST(GraphGradient, SecondDerivativeOfSoftplusSum) {
  // f(W) = sum(softplus(W x)); check d/dW <df/dW, D> against differences of df/dW.
  Rng rng(7);
  const Matrix w0 = uniform(rng, 3, 4, -2, 2);
  const Matrix x0 = uniform(rng, 4, 1, -2, 2);
  const Matrix dir = uniform(rng, 3, 4, -1, 1);
  auto first = [&](const Matrix& w, bool create) {
    const Var wv = graph::variable(w);
    const Var f = graph::sum(graph::activate(graph::matmul(wv, graph::constant(x0)), Activation::softplus));
    const Var outs[] = {f};
    const Var seeds[] = {graph::constant(Matrix::Ones(1, 1))};
    const Var ins[] = {wv};
    return std::make_pair(wv, graph::grad(outs, seeds, ins, create).front());
  };
  const auto [wv, g1] = first(w0, true);
  const Var params[] = {wv};
  const auto g2 = graph::gradient(graph::sum(graph::mul(g1, graph::constant(dir))), params);
  const Matrix fd = oracle::fd_gradient(
      [&](const Matrix& w) { return first(w, false).second.value().cwiseProduct(dir).sum(); }, w0);
  EXPECT_LT(oracle::rel_err(g2[0], fd), 1e-4);
}

TEST(GraphGradient, NoGradGuardRecordsNothing) {
  const Var x = graph::variable(mat({{1, 2}}));
  graph::NoGradGuard off;
  EXPECT_FALSE(graph::grad_enabled());
  const Var y = graph::mul(x, x);
  EXPECT_FALSE(y.requires_grad());
  {
    graph::EnableGradGuard on;
    EXPECT_TRUE(graph::mul(x, x).requires_grad());
  }
  EXPECT_FALSE(graph::grad_enabled());
}

TEST(GraphJacobian, Identity) {
  const Matrix j = graph::full_jacobian([](const Var& x) { return x; }, Vector::Ones(3));
  EXPECT_EQ((j - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(GraphJacobian, HalfScaling) {
  const Matrix j = graph::full_jacobian([](const Var& x) { return 0.5 * x; }, Vector::Ones(2));
  EXPECT_EQ((j - 0.5 * Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(GraphJacobian, RandomBlockMatchesFiniteDifferences) {
  Rng rng(8);
  const Index hidden[] = {16, 16};
  const ResidualBlock block = ResidualBlock::random(4, hidden, 0.9, Activation::elu, rng);
  const BlockParams params = block.bind(false);
  const Vector x0 = uniform(rng, 4, 1, -2, 2);
  const Matrix j = graph::full_jacobian([&](const Var& x) { return block.forward(x, params); }, x0);
  const Matrix fd = oracle::fd_jacobian([&](const Vector& v) { return block.forward(v); }, x0);
  EXPECT_LT((j - fd).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(GraphJacobian, BatchMatchesSinglePoint) {
  Rng rng(9);
  const Index hidden[] = {8, 8};
  const ResidualBlock block = ResidualBlock::random(3, hidden, 0.9, Activation::tanh, rng);
  const BlockParams params = block.bind(false);
  const Matrix xs = uniform(rng, 5, 3, -2, 2);
  const auto f = [&](const Var& x) { return block.forward(x, params); };
  const auto batch = graph::batch_jacobians(f, xs);
  ASSERT_EQ(batch.size(), 5u);
  for (Index r = 0; r < 5; ++r)
    EXPECT_LT((batch[static_cast<std::size_t>(r)] - graph::full_jacobian(f, xs.row(r).transpose()))
                  .cwiseAbs()
                  .maxCoeff(),
              1e-14);
}

TEST(GraphJacobian, OracleLimitEnforced) {
  EXPECT_THROW(graph::full_jacobian([](const Var& x) { return x; }, Vector::Ones(65)), ShapeError);
  EXPECT_THROW(graph::full_jacobian([](const Var& x) { return x; }, Vector::Ones(5), 4), ShapeError);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
  EXPECT_EQ(a.normal_matrix(3, 3), b.normal_matrix(3, 3));
}

TEST(Rng, DerivedStreamsAreLabelled) {
  const Rng root(7);
  Rng a = root.derive("data"), b = root.derive("probes"), c = root.derive("data");
  const auto x = a.next_u64();
  EXPECT_NE(x, b.next_u64());
  EXPECT_EQ(x, c.next_u64());
  EXPECT_NE(root.derive(std::uint64_t{1}).next_u64(), root.derive(std::uint64_t{2}).next_u64());
}

TEST(Rng, StateRoundTrip) {
  Rng a(3);
  a.normal();
  Rng b(99);
  b.restore(a.state());
  EXPECT_EQ(a.normal(), b.normal());
}

TEST(Rng, ProbeMoments) {
  Rng rng(11);
  const Matrix g = rng.normal_matrix(200000, 2);
  const Matrix r = rng.rademacher_matrix(200000, 2);
  for (const Matrix* m : {&g, &r}) {
    const RowVector mu = m->colwise().mean();
    const Matrix cov = (m->rowwise() - mu).transpose() * (m->rowwise() - mu) / double(m->rows() - 1);
    EXPECT_LT(mu.cwiseAbs().maxCoeff(), 0.01);
    EXPECT_LT((cov - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 0.02);
  }
  EXPECT_EQ(r.cwiseAbs().minCoeff(), 1.0);
}

}  // namespace
