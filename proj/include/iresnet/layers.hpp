#pragma once

#include "iresnet/common.hpp"
#include "iresnet/graph.hpp"
#include "iresnet/rng.hpp"

#include <span>
#include <vector>

namespace iresnet {

/// Rejects normalization coefficients outside (0, 1).
void check_coefficient(double coeff, const std::string& what = "coeff");

inline constexpr double kAuditTolerance = 1e-6;

/// Dense layer x -> W x + b whose weight is kept contractive by rescaling with
/// a power-iteration estimate of its spectral norm.
struct SpectralDenseLayer {
  Matrix weight;     // out x in
  RowVector bias;    // 1 x out
  Vector u;          // left singular estimate, unit norm, size out
  Vector v;          // right singular estimate, unit norm, size in
  double coeff = 0.9;
  double sigma_estimate = 0.0;

  static SpectralDenseLayer random(Index in, Index out, double coeff, Rng& rng);

  Index in_dim() const { return weight.cols(); }
  Index out_dim() const { return weight.rows(); }

  /// Warm-started power iteration; stores and returns the estimate.
  double estimate_sigma(int iters);
  /// Applies W <- c W / sigma_estimate when that shrinks W. True when rescaled.
  bool normalize();
  double exact_norm() const;
};

struct BlockParams {
  std::vector<graph::Var> weights;
  std::vector<graph::Var> biases;

  std::vector<graph::Var> all() const;
};

/// g(x) = W_L phi(... phi(W_1 x + b_1) ...) + b_L with 1-Lipschitz phi.
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(std::vector<SpectralDenseLayer> layers, graph::Activation activation);

  /// Layer widths dim -> hidden... -> dim, each layer normalized to `coeff`.
  static ResidualBlock random(Index dim, std::span<const Index> hidden, double coeff,
                              graph::Activation activation, Rng& rng);

  Index dim() const { return layers_.front().in_dim(); }
  graph::Activation activation() const { return activation_; }
  std::vector<SpectralDenseLayer>& layers() { return layers_; }
  const std::vector<SpectralDenseLayer>& layers() const { return layers_; }

  /// Row-wise evaluation of g on a batch.
  Matrix forward(const Matrix& x) const;
  Vector forward(const Vector& x) const;
  graph::Var forward(const graph::Var& x, const BlockParams& params) const;

  /// Graph leaves for the current weights; variables when trainable.
  BlockParams bind(bool trainable) const;

  /// Product of exact layer spectral norms, an upper bound on Lip(g).
  double lipschitz_bound() const;

  /// One training-step normalization: warm power iteration then rescale.
  void update_normalization(int power_iters);
  /// Post-training pass: long power iteration, rescale, then an exact check
  /// that rescales again by the exact norm if the estimate fell short.
  void certify(int power_iters = 200);

 private:
  void check_shapes() const;

  std::vector<SpectralDenseLayer> layers_;
  graph::Activation activation_ = graph::Activation::elu;
};

/// Per-dimension affine map y = s * x + t with s = exp(log_scale).
struct ActNormLayer {
  Vector log_scale;
  Vector shift;
  bool initialized = false;

  static ActNormLayer identity(Index dim);

  Index dim() const { return log_scale.size(); }
  Vector scale() const { return log_scale.array().exp().matrix(); }

  /// Standardizes `batch` per dimension: output mean 0, std 1.
  void initialize(const Matrix& batch);

  Matrix forward(const Matrix& x) const;
  Matrix inverse(const Matrix& y) const;
  graph::Var forward(const graph::Var& x, const graph::Var& log_scale_var,
                     const graph::Var& shift_var) const;
  /// sum_i ln|s_i|.
  double logdet() const { return log_scale.sum(); }
};

}  // namespace iresnet
