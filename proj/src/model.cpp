#include "iresnet/model.hpp"

#include <cmath>

namespace iresnet {
namespace {

void check_finite(const Matrix& m, std::size_t stage) {
  if (m.allFinite()) return;
  Index row = 0;
  while (row < m.rows() && m.row(row).allFinite()) ++row;
  throw ContractError("forward: non-finite value at stage " + std::to_string(stage) + ", sample " +
                      std::to_string(row));
}

double max_row_norm(const Matrix& m) {
  return m.rows() == 0 ? 0.0 : m.rowwise().norm().maxCoeff();
}

}  // namespace

std::string to_string(ActNormPlacement p) {
  return p == ActNormPlacement::before ? "before" : "after";
}

ActNormPlacement placement_from_string(const std::string& name) {
  if (name == "before") return ActNormPlacement::before;
  if (name == "after") return ActNormPlacement::after;
  throw ConfigError("actnorm placement '" + name + "' not recognized (accepted: before, after)");
}

IResNetModel IResNetModel::random(Index dim, int n_blocks, std::span<const Index> hidden,
                                  double coeff, graph::Activation activation,
                                  ActNormPlacement placement, Rng& rng) {
  check_coefficient(coeff);
  IResNetModel model;
  model.dim = dim;
  model.coeff = coeff;
  model.placement = placement;
  for (int t = 0; t < n_blocks; ++t) {
    model.stages.push_back(
        Stage{ActNormLayer::identity(dim), ResidualBlock::random(dim, hidden, coeff, activation, rng)});
  }
  return model;
}

void IResNetModel::initialize_actnorm(const Matrix& batch) {
  Matrix h = batch;
  for (auto& stage : stages) {
    if (placement == ActNormPlacement::before) {
      stage.actnorm.initialize(h);
      h = stage.actnorm.forward(h);
      h += stage.block.forward(h);
    } else {
      h += stage.block.forward(h);
      stage.actnorm.initialize(h);
      h = stage.actnorm.forward(h);
    }
  }
}

void IResNetModel::certify(int power_iters) {
  for (auto& stage : stages) stage.block.certify(power_iters);
}

std::vector<double> IResNetModel::lipschitz_bounds() const {
  std::vector<double> out;
  out.reserve(stages.size());
  for (const auto& stage : stages) out.push_back(stage.block.lipschitz_bound());
  return out;
}

Matrix forward(const IResNetModel& model, const Matrix& x) {
  if (x.cols() != model.dim)
    throw ShapeError("forward: input " + shape_string(x.rows(), x.cols()) +
                     " does not match model dimension " + std::to_string(model.dim));
  Matrix h = x;
  for (std::size_t t = 0; t < model.stages.size(); ++t) {
    const Stage& stage = model.stages[t];
    if (model.placement == ActNormPlacement::before) {
      h = stage.actnorm.forward(h);
      h += stage.block.forward(h);
    } else {
      h += stage.block.forward(h);
      h = stage.actnorm.forward(h);
    }
    check_finite(h, t);
  }
  return h;
}

Vector forward(const IResNetModel& model, const Vector& x) {
  return forward(model, Matrix(x.transpose())).row(0).transpose();
}

std::vector<Matrix> block_inputs(const IResNetModel& model, const Matrix& x) {
  std::vector<Matrix> inputs;
  inputs.reserve(model.stages.size());
  Matrix h = x;
  for (std::size_t t = 0; t < model.stages.size(); ++t) {
    const Stage& stage = model.stages[t];
    if (model.placement == ActNormPlacement::before) h = stage.actnorm.forward(h);
    inputs.push_back(h);
    h += stage.block.forward(h);
    if (model.placement == ActNormPlacement::after) h = stage.actnorm.forward(h);
    check_finite(h, t);
  }
  return inputs;
}

std::pair<Matrix, InverseReport> inverse_block(const ResidualBlock& block, const Matrix& y,
                                               const FixedPointOptions& options) {
  const double lip = block.lipschitz_bound();
  if (!(lip < 1.0))
    throw ContractError("inverse_block: Lipschitz certificate " + std::to_string(lip) +
                        " is not below 1, fixed-point iteration may diverge");
  InverseReport report;
  Matrix x = y;
  double first_step = 0.0;
  const double ratio = lip / (1.0 - lip);
  for (int i = 1; i <= options.max_iters; ++i) {
    Matrix next = y - block.forward(x);
    report.residual = max_row_norm(next - x);
    x = std::move(next);
    report.iterations = i;
    if (i == 1) first_step = report.residual;
    report.a_posteriori_bound = report.residual * ratio;
    if (report.a_posteriori_bound <= options.tol) {
      report.converged = true;
      break;
    }
  }
  report.a_priori_bound = std::pow(lip, report.iterations) / (1.0 - lip) * first_step;
  return {std::move(x), report};
}

Matrix fixed_point_iterate(const ResidualBlock& block, const Matrix& y, int iterations) {
  Matrix x = y;
  for (int i = 0; i < iterations; ++i) x = y - block.forward(x);
  return x;
}

InverseResult inverse(const IResNetModel& model, const Matrix& z, const FixedPointOptions& options) {
  if (z.cols() != model.dim)
    throw ShapeError("inverse: input " + shape_string(z.rows(), z.cols()) +
                     " does not match model dimension " + std::to_string(model.dim));
  InverseResult result;
  result.reports.resize(model.stages.size());
  Matrix h = z;
  for (std::size_t t = model.stages.size(); t-- > 0;) {
    const Stage& stage = model.stages[t];
    if (model.placement == ActNormPlacement::after) h = stage.actnorm.inverse(h);
    auto [x, report] = inverse_block(stage.block, h, options);
    h = std::move(x);
    result.converged = result.converged && report.converged;
    result.reports[t] = report;
    if (model.placement == ActNormPlacement::before) h = stage.actnorm.inverse(h);
  }
  result.x = std::move(h);
  return result;
}

Matrix inverse_fixed(const IResNetModel& model, const Matrix& z, int iterations) {
  Matrix h = z;
  for (std::size_t t = model.stages.size(); t-- > 0;) {
    const Stage& stage = model.stages[t];
    if (model.placement == ActNormPlacement::after) h = stage.actnorm.inverse(h);
    h = fixed_point_iterate(stage.block, h, iterations);
    if (model.placement == ActNormPlacement::before) h = stage.actnorm.inverse(h);
  }
  return h;
}

BiLipschitzBounds bi_lipschitz_bounds(const IResNetModel& model) {
  BiLipschitzBounds bounds;
  for (const auto& stage : model.stages) {
    const double lip = stage.block.lipschitz_bound();
    const Vector s = stage.actnorm.scale();
    bounds.forward *= (1.0 + lip) * s.cwiseAbs().maxCoeff();
    bounds.inverse *= s.cwiseAbs().cwiseInverse().maxCoeff() / (1.0 - lip);
  }
  return bounds;
}

}  // namespace iresnet
