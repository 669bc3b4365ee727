#include "iresnet/layers.hpp"

#include "iresnet/spectral.hpp"

#include <cmath>

namespace iresnet {

void check_coefficient(double coeff, const std::string& what) {
  if (!(coeff > 0.0 && coeff < 1.0))
    throw ConfigError(what + " = " + std::to_string(coeff) + " rejected: must lie in (0, 1)");
}

SpectralDenseLayer SpectralDenseLayer::random(Index in, Index out, double coeff, Rng& rng) {
  check_coefficient(coeff);
  SpectralDenseLayer layer;
  layer.weight = rng.normal_matrix(out, in) * std::sqrt(1.0 / static_cast<double>(in));
  layer.bias = RowVector::Zero(out);
  layer.u = rng.unit_vector(out);
  layer.v = rng.unit_vector(in);
  layer.coeff = coeff;
  layer.estimate_sigma(50);
  layer.normalize();
  return layer;
}

double SpectralDenseLayer::estimate_sigma(int iters) {
  const auto result = power_iteration(weight, iters, u, v);
  sigma_estimate = result.sigma;
  return sigma_estimate;
}

bool SpectralDenseLayer::normalize() { return spectral_rescale(weight, sigma_estimate, coeff); }

double SpectralDenseLayer::exact_norm() const { return exact_spectral_norm(weight); }

std::vector<graph::Var> BlockParams::all() const {
  std::vector<graph::Var> out;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.push_back(weights[i]);
    out.push_back(biases[i]);
  }
  return out;
}

ResidualBlock::ResidualBlock(std::vector<SpectralDenseLayer> layers, graph::Activation activation)
    : layers_(std::move(layers)), activation_(activation) {
  check_shapes();
}

void ResidualBlock::check_shapes() const {
  if (layers_.empty()) throw ShapeError("residual block: no layers");
  if (activation_ == graph::Activation::exp)
    throw ConfigError("residual block: activation must be 1-Lipschitz (elu, softplus, tanh)");
  for (std::size_t i = 1; i < layers_.size(); ++i) {
    if (layers_[i].in_dim() != layers_[i - 1].out_dim())
      throw ShapeError("residual block: layer " + std::to_string(i) + " expects input " +
                       std::to_string(layers_[i].in_dim()) + " but previous layer outputs " +
                       std::to_string(layers_[i - 1].out_dim()));
  }
  if (layers_.back().out_dim() != layers_.front().in_dim())
    throw ShapeError("residual block: output dimension " + std::to_string(layers_.back().out_dim()) +
                     " differs from input dimension " + std::to_string(layers_.front().in_dim()));
}

ResidualBlock ResidualBlock::random(Index dim, std::span<const Index> hidden, double coeff,
                                    graph::Activation activation, Rng& rng) {
  std::vector<SpectralDenseLayer> layers;
  Index in = dim;
  for (Index width : hidden) {
    layers.push_back(SpectralDenseLayer::random(in, width, coeff, rng));
    in = width;
  }
  layers.push_back(SpectralDenseLayer::random(in, dim, coeff, rng));
  return ResidualBlock(std::move(layers), activation);
}

Matrix ResidualBlock::forward(const Matrix& x) const {
  if (x.cols() != dim())
    throw ShapeError("block_forward: input " + shape_string(x.rows(), x.cols()) +
                     " does not match block dimension " + std::to_string(dim()));
  Matrix h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Matrix next = h * layers_[i].weight.transpose();
    next.rowwise() += layers_[i].bias;
    if (i + 1 < layers_.size()) next = graph::activation_derivative(next, activation_, 0);
    h = std::move(next);
  }
  return h;
}

Vector ResidualBlock::forward(const Vector& x) const {
  return forward(Matrix(x.transpose())).row(0).transpose();
}

graph::Var ResidualBlock::forward(const graph::Var& x, const BlockParams& params) const {
  if (x.cols() != dim())
    throw ShapeError("block_forward: input " + x.shape() + " does not match block dimension " +
                     std::to_string(dim()));
  graph::Var h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = graph::matmul(h, params.weights[i], false, true) +
        graph::broadcast_rows(params.biases[i], h.rows());
    if (i + 1 < layers_.size()) h = graph::activate(h, activation_);
  }
  return h;
}

BlockParams ResidualBlock::bind(bool trainable) const {
  BlockParams p;
  for (const auto& layer : layers_) {
    p.weights.push_back(trainable ? graph::variable(layer.weight) : graph::constant(layer.weight));
    p.biases.push_back(trainable ? graph::variable(Matrix(layer.bias))
                                 : graph::constant(Matrix(layer.bias)));
  }
  return p;
}

double ResidualBlock::lipschitz_bound() const {
  double bound = 1.0;
  for (const auto& layer : layers_) bound *= layer.exact_norm();
  return bound;
}

void ResidualBlock::update_normalization(int power_iters) {
  for (auto& layer : layers_) {
    layer.estimate_sigma(power_iters);
    layer.normalize();
  }
}

void ResidualBlock::certify(int power_iters) {
  for (auto& layer : layers_) {
    layer.estimate_sigma(power_iters);
    layer.normalize();
    const double exact = layer.exact_norm();
    if (exact > layer.coeff) {
      layer.weight *= layer.coeff / exact;
      layer.sigma_estimate = layer.coeff;
    }
  }
}

ActNormLayer ActNormLayer::identity(Index dim) {
  return ActNormLayer{Vector::Zero(dim), Vector::Zero(dim), false};
}

void ActNormLayer::initialize(const Matrix& batch) {
  if (batch.rows() == 0) throw ShapeError("actnorm_init: empty batch");
  if (batch.cols() != dim())
    throw ShapeError("actnorm_init: batch " + shape_string(batch.rows(), batch.cols()) +
                     " does not match dimension " + std::to_string(dim()));
  const RowVector mean = batch.colwise().mean();
  for (Index j = 0; j < dim(); ++j) {
    const double var = (batch.col(j).array() - mean(j)).square().mean();
    const double std_dev = std::sqrt(var);
    if (!(std_dev > 1e-8))
      throw ContractError("actnorm_init: dimension " + std::to_string(j) +
                          " is constant over the batch (std " + std::to_string(std_dev) + ")");
    log_scale(j) = -std::log(std_dev);
    shift(j) = -mean(j) / std_dev;
  }
  initialized = true;
}

Matrix ActNormLayer::forward(const Matrix& x) const {
  Matrix y = x * scale().asDiagonal();
  y.rowwise() += shift.transpose();
  return y;
}

Matrix ActNormLayer::inverse(const Matrix& y) const {
  Matrix x = y;
  x.rowwise() -= shift.transpose();
  return x * (-log_scale).array().exp().matrix().asDiagonal();
}

graph::Var ActNormLayer::forward(const graph::Var& x, const graph::Var& log_scale_var,
                                 const graph::Var& shift_var) const {
  const graph::Var s = graph::activate(log_scale_var, graph::Activation::exp);
  return graph::mul(x, graph::broadcast_rows(s, x.rows())) +
         graph::broadcast_rows(shift_var, x.rows());
}

}  // namespace iresnet
