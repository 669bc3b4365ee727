#pragma once

#include "iresnet/layers.hpp"

#include <string>
#include <utility>
#include <vector>

namespace iresnet {

enum class ActNormPlacement { before, after };

std::string to_string(ActNormPlacement p);
ActNormPlacement placement_from_string(const std::string& name);

struct Stage {
  ActNormLayer actnorm;
  ResidualBlock block;
};

/// F = stage_T o ... o stage_1, each stage an ActNorm and a residual map I + g.
struct IResNetModel {
  std::vector<Stage> stages;
  Index dim = 0;
  double coeff = 0.9;
  ActNormPlacement placement = ActNormPlacement::before;

  static IResNetModel random(Index dim, int n_blocks, std::span<const Index> hidden, double coeff,
                             graph::Activation activation, ActNormPlacement placement, Rng& rng);

  /// Data-dependent ActNorm initialization, stage by stage on `batch`.
  void initialize_actnorm(const Matrix& batch);
  /// Post-training certification of every layer.
  void certify(int power_iters = 200);
  std::vector<double> lipschitz_bounds() const;
};

/// z = F(x) row-wise. Throws ContractError naming the stage on non-finite values.
Matrix forward(const IResNetModel& model, const Matrix& x);
Vector forward(const IResNetModel& model, const Vector& x);

/// Inputs to each residual block along the forward pass of x.
std::vector<Matrix> block_inputs(const IResNetModel& model, const Matrix& x);

struct InverseReport {
  int iterations = 0;
  /// max over rows of ||x^n - x^{n-1}||.
  double residual = 0.0;
  /// Lip^n / (1 - Lip) ||x^1 - x^0||, the a-priori error bound at exit.
  double a_priori_bound = 0.0;
  /// residual Lip / (1 - Lip), the a-posteriori error bound at exit.
  double a_posteriori_bound = 0.0;
  bool converged = false;
};

struct FixedPointOptions {
  double tol = 1e-8;
  int max_iters = 200;
};

/// Solves x + g(x) = y for every row of y by x <- y - g(x) from x^0 = y, until
/// the contraction bound residual * L / (1 - L) drops to tol.
std::pair<Matrix, InverseReport> inverse_block(const ResidualBlock& block, const Matrix& y,
                                               const FixedPointOptions& options = {});

/// Exactly `iterations` fixed-point steps, no stopping test.
Matrix fixed_point_iterate(const ResidualBlock& block, const Matrix& y, int iterations);

struct InverseResult {
  Matrix x;
  std::vector<InverseReport> reports;  // one per stage, in stage order
  bool converged = true;
};

InverseResult inverse(const IResNetModel& model, const Matrix& z,
                      const FixedPointOptions& options = {});

/// Inverts every residual stage with exactly `iterations` fixed-point steps.
Matrix inverse_fixed(const IResNetModel& model, const Matrix& z, int iterations);

struct BiLipschitzBounds {
  double forward = 1.0;
  double inverse = 1.0;
};

/// Products of (1 + L_t) and 1 / (1 - L_t), with ActNorm scales.
BiLipschitzBounds bi_lipschitz_bounds(const IResNetModel& model);

}  // namespace iresnet
