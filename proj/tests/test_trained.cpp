// Properties of the models trained by the train_models fixture.

#include "iresnet/commands.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>

namespace {

using namespace iresnet;
namespace fs = std::filesystem;

const Checkpoint& run(const std::string& name) {
  static std::map<std::string, Checkpoint> cache;
  auto it = cache.find(name);
  if (it == cache.end()) {
    const char* root = std::getenv("IRESNET_RUNS");
    if (root == nullptr) throw IoError("IRESNET_RUNS not set");
    it = cache.emplace(name, load_checkpoint((fs::path(root) / name / "checkpoint.ckpt").string())).first;
  }
  return it->second;
}

TEST(Trained, CheckerboardMassInsideSquares) {
  const DensityGrid g = density_grid(run("checkerboard").state.model, -4, 4, 200);
  const double inside = g.mass_where(ToyDataset::in_checkerboard_support);
  EXPECT_GE(inside, 0.60) << "total mass " << g.mass();
}

TEST(Trained, GridMassNormalized) {
  for (const char* name : {"exact", "stochastic", "checkerboard"}) {
    const double mass = density_grid(run(name).state.model, -4, 4, 200).mass();
    EXPECT_GE(mass, 0.95) << name;
    EXPECT_LE(mass, 1.02) << name;
  }
}

TEST(Trained, SampleMomentsMatchData) {
  const Checkpoint& ck = run("exact");
  Rng rng(1);
  const SampleResult s = sample(ck.state.model, 100000, rng);
  ASSERT_TRUE(s.converged);
  const Matrix data = ToyDataset(ck.config.dataset).sample(100000, rng);
  auto moments = [](const Matrix& x) {
    const RowVector mean = x.colwise().mean();
    const Matrix c = x.rowwise() - mean;
    return std::pair<RowVector, Matrix>(mean, c.transpose() * c / double(x.rows()));
  };
  const auto [ms, cs] = moments(s.points);
  const auto [md, cd] = moments(data);
  EXPECT_LT((ms - md).cwiseAbs().maxCoeff(), 0.1) << ms << " vs " << md;
  EXPECT_LT((cs - cd).cwiseAbs().maxCoeff(), 0.1) << cs << "\nvs\n" << cd;
}

TEST(Trained, RoundTripFlagsAllPass) {
  Rng rng(2);
  const SampleResult s = sample(run("exact").state.model, 1000, rng, 1e-8);
  for (bool ok : s.round_trip_ok) EXPECT_TRUE(ok);
}

TEST(Trained, FinalNllBeatsGaussianBaseline) {
  for (const char* name : {"exact", "stochastic", "checkerboard"}) {
    const Checkpoint& ck = run(name);
    Rng rng(3);
    const Matrix eval = ToyDataset(ck.config.dataset).sample(20000, rng);
    EXPECT_LT(nll_loss(ck.state.model, eval), gaussian_fit_baseline(eval)) << name;
  }
}

TEST(Trained, CertificatesBelowCoefficient) {
  for (const char* name : {"exact", "stochastic", "checkerboard"})
    for (const auto& s : run(name).state.model.stages)
      for (const auto& l : s.block.layers()) EXPECT_LE(l.exact_norm(), run(name).config.coeff + 1e-6) << name;
}

TEST(Trained, SmoothedNllMostlyNonIncreasing) {
  // Each logged row is the mean NLL over the preceding log_every steps.
  for (const char* name : {"exact", "checkerboard"}) {
    const Checkpoint& ck = run(name);
    ASSERT_EQ(ck.config.log_every, 100);
    const auto& m = ck.state.metrics;
    const std::size_t warmup = m.size() / 10;
    int windows = 0, non_increasing = 0;
    for (std::size_t i = warmup + 1; i < m.size(); ++i) {
      ++windows;
      non_increasing += m[i].nll_bits <= m[i - 1].nll_bits;
    }
    ASSERT_GT(windows, 0);
    EXPECT_GE(double(non_increasing) / windows, 0.95) << name << ": " << non_increasing << " of " << windows;
  }
}

TEST(Trained, StochasticGradientFidelity) {
  const Checkpoint& ck = run("stochastic");
  const IResNetModel& model = ck.state.model;
  Rng rng(4);
  const Matrix batch = ToyDataset(ck.config.dataset).sample(64, rng);
  const int n = ck.config.n_terms;

  auto flat_grad = [&](LogDetMode mode, Rng* probes) {
    const ModelParams p = bind(model, true);
    const graph::Var l = nll_graph(model, p, batch, mode, n, ProbeDistribution::gaussian, probes);
    std::vector<double> out;
    for (const auto& g : graph::gradient(l, p.all())) out.insert(out.end(), g.data(), g.data() + g.size());
    return Vector(Eigen::Map<const Vector>(out.data(), static_cast<Index>(out.size())));
  };
  const Vector exact = flat_grad(LogDetMode::exact, nullptr);
  const Vector series = flat_grad(LogDetMode::series_exact_trace, nullptr);
  const int m = 256;
  Vector sum = Vector::Zero(exact.size()), sum_sq = Vector::Zero(exact.size());
  for (int k = 0; k < m; ++k) {
    const Vector g = flat_grad(LogDetMode::series_stochastic, &rng);
    sum += g;
    sum_sq += g.cwiseAbs2();
  }
  const Vector mean = sum / m;
  const Vector var = ((sum_sq / m) - mean.cwiseAbs2()) * (double(m) / (m - 1));
  const double combined_se = std::sqrt(var.sum() / m);
  const double truncation = (series - exact).norm();
  EXPECT_LE((mean - exact).norm(), 3.0 * combined_se + truncation)
      << "SE " << combined_se << ", truncation " << truncation;
  EXPECT_LE((mean - series).norm(), 3.0 * combined_se);
}

}  // namespace
