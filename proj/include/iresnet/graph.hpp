#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// Every primitive writes its backward rule in terms of other primitives, so
// adjoints computed with create_graph=true are graph values themselves and can
// be differentiated again (double backprop). That is what makes gradients of
// vector-Jacobian-product expressions such as the power-series log-determinant
// available to the optimizer.
//
// Batches are rows. Row-wise functions (all residual blocks here) have
// block-diagonal batch Jacobians, so one VJP with a B x d seed returns one
// vector-Jacobian product per sample.

#include "iresnet/common.hpp"

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace iresnet::graph {

enum class Activation { elu, softplus, tanh, exp };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

/// k-th derivative of the activation, elementwise. ELU and exp support any
/// order; softplus and tanh up to order 4.
Matrix activation_derivative(const Matrix& x, Activation a, int order);

enum class Op {
  leaf,
  matmul,
  add,
  sub,
  mul,
  scale,
  activation,
  log,
  power,
  sum,
  broadcast_scalar,
  broadcast_rows,
  sum_rows,
  slice_cols,
  pad_cols,
  logdet_rows,
  inv_transpose_rows,
};

std::string to_string(Op op);

struct Node {
  Matrix value;
  Op op = Op::leaf;
  std::vector<std::shared_ptr<Node>> parents;
  bool requires_grad = false;

  // Operation attributes; meaning depends on `op`.
  bool trans_a = false;
  bool trans_b = false;
  double alpha = 0.0;
  Activation activation = Activation::elu;
  int order = 0;
  Index offset = 0;
  Index extent = 0;
};

/// Handle to a node (the GraphValue of the design). Cheap to copy; the graph
/// lives as long as some handle reaches it.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_->requires_grad; }
  Op op() const { return node_->op; }
  bool defined() const { return static_cast<bool>(node_); }
  std::string shape() const { return shape_string(rows(), cols()); }
  double item() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Leaf that is never differentiated.
Var constant(Matrix value);
/// Leaf that gradients can be taken with respect to.
Var variable(Matrix value);

/// op(a) * op(b) where op transposes when the flag is set.
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
/// Elementwise product.
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var activate(const Var& x, Activation a, int order = 0);
Var log(const Var& x);
Var power(const Var& x, double exponent);
/// Sum of all entries, 1x1.
Var sum(const Var& x);
Var mean(const Var& x);
/// 1x1 -> rows x cols filled with the scalar.
Var broadcast_scalar(const Var& s, Index rows, Index cols);
/// 1 x c -> rows x c.
Var broadcast_rows(const Var& row, Index rows);
/// r x c -> 1 x c column sums.
Var sum_rows(const Var& x);
Var slice_cols(const Var& x, Index offset, Index count);
/// Places x at column offset inside a zero matrix of `total` columns.
Var pad_cols(const Var& x, Index offset, Index total);
Var concat_cols(std::span<const Var> parts);
/// Row r holds a d x d matrix in row-major order; returns ln|det| per row, B x 1.
Var logdet_rows(const Var& flat, Index d);
/// Row r holds A_r (d x d, row-major); returns vec(A_r^{-T}) per row. Only
/// first-order differentiable through logdet_rows; differentiating it throws.
Var inv_transpose_rows(const Var& flat, Index d);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

/// While alive, new operations on this thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Re-enables recording inside a NoGradGuard scope.
class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Adjoints of sum_i <seeds[i], outputs[i]> with respect to each input.
/// Only nodes on a path from an output to an input are visited. Inputs that are
/// unreachable receive zeros. With create_graph the adjoints are differentiable.
std::vector<Var> grad(std::span<const Var> outputs, std::span<const Var> seeds,
                      std::span<const Var> inputs, bool create_graph);

/// v^T J_f evaluated where y = f(x) was recorded. The result is itself a graph
/// value and can be differentiated again.
Var vjp(const Var& y, const Var& x, const Var& v);

/// Gradient of a 1x1 value with respect to each parameter, zeros for
/// parameters the value does not depend on.
std::vector<Matrix> gradient(const Var& scalar, std::span<const Var> params);

using Function = std::function<Var(const Var&)>;

inline constexpr Index kDefaultOracleLimit = 64;

/// Dense Jacobian of f at a single point; row i is vjp(f, x, e_i).
Matrix full_jacobian(const Function& f, const Vector& x, Index oracle_limit = kDefaultOracleLimit);

/// Jacobians of a row-wise f at each row of xs, d VJPs for the whole batch.
std::vector<Matrix> batch_jacobians(const Function& f, const Matrix& xs,
                                    Index oracle_limit = kDefaultOracleLimit);

}  // namespace iresnet::graph
