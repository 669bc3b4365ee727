#include "iresnet/graph.hpp"

#include <algorithm>
#include <optional>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

namespace iresnet::graph {
namespace {

thread_local bool g_grad_enabled = true;

[[noreturn]] void shape_fail(const std::string& op, const Var& a, const Var& b) {
  throw ShapeError(op + ": incompatible shapes " + a.shape() + " and " + b.shape());
}

Var make(Op op, Matrix value, std::initializer_list<Var> parents) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  if (g_grad_enabled) {
    for (const Var& p : parents) {
      if (p.requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
    if (node->requires_grad) {
      for (const Var& p : parents) node->parents.push_back(p.shared());
    }
  }
  return Var(std::move(node));
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double activation_scalar(double x, Activation a, int order) {
  switch (a) {
    case Activation::elu:
      if (order == 0) return x > 0 ? x : std::expm1(x);
      if (order == 1) return x > 0 ? 1.0 : std::exp(x);
      return x > 0 ? 0.0 : std::exp(x);
    case Activation::exp:
      return std::exp(x);
    case Activation::softplus: {
      if (order == 0) return softplus(x);
      const double s = sigmoid(x);
      switch (order) {
        case 1: return s;
        case 2: return s * (1 - s);
        case 3: return s * (1 - s) * (1 - 2 * s);
        case 4: return s * (1 - s) * (1 - 6 * s + 6 * s * s);
        default: break;
      }
      break;
    }
    case Activation::tanh: {
      const double t = std::tanh(x);
      const double sech2 = 1 - t * t;
      switch (order) {
        case 0: return t;
        case 1: return sech2;
        case 2: return -2 * t * sech2;
        case 3: return sech2 * (6 * t * t - 2);
        case 4: return sech2 * (16 * t - 24 * t * t * t);
        default: break;
      }
      break;
    }
  }
  throw std::logic_error("activation " + to_string(a) + ": derivative order " +
                         std::to_string(order) + " not available");
}

Matrix logdet_rows_value(const Matrix& flat, Index d) {
  Matrix out(flat.rows(), 1);
  for (Index r = 0; r < flat.rows(); ++r) {
    Eigen::Map<const Matrix> a(flat.row(r).data(), d, d);
    const Eigen::PartialPivLU<Eigen::MatrixXd> lu{Eigen::MatrixXd(a)};
    out(r, 0) = std::log(std::abs(lu.determinant()));
  }
  return out;
}

Matrix inv_transpose_rows_value(const Matrix& flat, Index d) {
  Matrix out(flat.rows(), flat.cols());
  for (Index r = 0; r < flat.rows(); ++r) {
    Eigen::Map<const Matrix> a(flat.row(r).data(), d, d);
    Matrix inv_t = Eigen::MatrixXd(a).inverse().transpose();
    out.row(r) = Eigen::Map<const RowVector>(inv_t.data(), d * d);
  }
  return out;
}

// Adjoints for each parent of `n`, given the adjoint `g` of its output.
std::vector<Var> backward_rule(const Node& n, const Var& g) {
  auto p = [&](std::size_t i) { return Var(n.parents[i]); };
  switch (n.op) {
    case Op::leaf:
      return {};
    case Op::matmul: {
      const Var a = p(0), b = p(1);
      if (!n.trans_a && !n.trans_b) return {matmul(g, b, false, true), matmul(a, g, true, false)};
      if (!n.trans_a && n.trans_b) return {matmul(g, b), matmul(g, a, true, false)};
      if (n.trans_a && !n.trans_b) return {matmul(b, g, false, true), matmul(a, g)};
      return {matmul(b, g, true, true), matmul(g, a, true, true)};
    }
    case Op::add:
      return {g, g};
    case Op::sub:
      return {g, scale(g, -1.0)};
    case Op::mul:
      return {mul(g, p(1)), mul(g, p(0))};
    case Op::scale:
      return {scale(g, n.alpha)};
    case Op::activation:
      return {mul(g, activate(p(0), n.activation, n.order + 1))};
    case Op::log:
      return {mul(g, power(p(0), -1.0))};
    case Op::power:
      if (n.alpha == 1.0) return {g};
      return {mul(g, scale(power(p(0), n.alpha - 1.0), n.alpha))};
    case Op::sum:
      return {broadcast_scalar(g, p(0).rows(), p(0).cols())};
    case Op::broadcast_scalar:
      return {sum(g)};
    case Op::broadcast_rows:
      return {sum_rows(g)};
    case Op::sum_rows:
      return {broadcast_rows(g, p(0).rows())};
    case Op::slice_cols:
      return {pad_cols(g, n.offset, p(0).cols())};
    case Op::pad_cols:
      return {slice_cols(g, n.offset, p(0).cols())};
    case Op::logdet_rows: {
      const Var flat = p(0);
      const Var spread = matmul(g, constant(Matrix::Ones(1, flat.cols())));
      return {mul(spread, inv_transpose_rows(flat, n.extent))};
    }
    case Op::inv_transpose_rows:
      throw std::logic_error("inv_transpose_rows: differentiating a log-determinant "
                             "beyond first order is not supported");
  }
  throw std::logic_error("backward_rule: unknown op");
}

void accumulate(std::unordered_map<const Node*, Var>& adjoints, const Node* key, const Var& g) {
  auto it = adjoints.find(key);
  if (it == adjoints.end()) {
    adjoints.emplace(key, g);
  } else {
    it->second = add(it->second, g);
  }
}

}  // namespace

std::string to_string(Activation a) {
  switch (a) {
    case Activation::elu: return "elu";
    case Activation::softplus: return "softplus";
    case Activation::tanh: return "tanh";
    case Activation::exp: return "exp";
  }
  return "unknown";
}

Activation activation_from_string(const std::string& name) {
  if (name == "elu") return Activation::elu;
  if (name == "softplus") return Activation::softplus;
  if (name == "tanh") return Activation::tanh;
  if (name == "exp") return Activation::exp;
  throw ConfigError("activation '" + name + "' not recognized (accepted: elu, softplus, tanh)");
}

std::string to_string(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::activation: return "activation";
    case Op::log: return "log";
    case Op::power: return "power";
    case Op::sum: return "sum";
    case Op::broadcast_scalar: return "broadcast_scalar";
    case Op::broadcast_rows: return "broadcast_rows";
    case Op::sum_rows: return "sum_rows";
    case Op::slice_cols: return "slice_cols";
    case Op::pad_cols: return "pad_cols";
    case Op::logdet_rows: return "logdet_rows";
    case Op::inv_transpose_rows: return "inv_transpose_rows";
  }
  return "unknown";
}

Matrix activation_derivative(const Matrix& x, Activation a, int order) {
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) out.data()[i] = activation_scalar(x.data()[i], a, order);
  return out;
}

double Var::item() const {
  if (rows() != 1 || cols() != 1) throw ShapeError("item: expected 1x1, got " + shape());
  return value()(0, 0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
EnableGradGuard::EnableGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var variable(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  const Index inner_a = trans_a ? a.rows() : a.cols();
  const Index inner_b = trans_b ? b.cols() : b.rows();
  if (inner_a != inner_b) shape_fail("matmul", a, b);
  Matrix out;
  if (!trans_a && !trans_b) out.noalias() = a.value() * b.value();
  else if (!trans_a) out.noalias() = a.value() * b.value().transpose();
  else if (!trans_b) out.noalias() = a.value().transpose() * b.value();
  else out.noalias() = a.value().transpose() * b.value().transpose();
  Var v = make(Op::matmul, std::move(out), {a, b});
  v.node()->trans_a = trans_a;
  v.node()->trans_b = trans_b;
  return v;
}

Var add(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("add", a, b);
  return make(Op::add, a.value() + b.value(), {a, b});
}

Var sub(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("sub", a, b);
  return make(Op::sub, a.value() - b.value(), {a, b});
}

Var mul(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("mul", a, b);
  return make(Op::mul, a.value().cwiseProduct(b.value()), {a, b});
}

Var scale(const Var& a, double factor) {
  Var v = make(Op::scale, a.value() * factor, {a});
  v.node()->alpha = factor;
  return v;
}

Var activate(const Var& x, Activation a, int order) {
  Var v = make(Op::activation, activation_derivative(x.value(), a, order), {x});
  v.node()->activation = a;
  v.node()->order = order;
  return v;
}

Var log(const Var& x) { return make(Op::log, x.value().array().log().matrix(), {x}); }

Var power(const Var& x, double exponent) {
  Var v = make(Op::power, x.value().array().pow(exponent).matrix(), {x});
  v.node()->alpha = exponent;
  return v;
}

Var sum(const Var& x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return make(Op::sum, std::move(out), {x});
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var broadcast_scalar(const Var& s, Index rows, Index cols) {
  if (s.rows() != 1 || s.cols() != 1)
    throw ShapeError("broadcast_scalar: expected 1x1, got " + s.shape());
  return make(Op::broadcast_scalar, Matrix::Constant(rows, cols, s.value()(0, 0)), {s});
}

Var broadcast_rows(const Var& row, Index rows) {
  if (row.rows() != 1) throw ShapeError("broadcast_rows: expected a single row, got " + row.shape());
  return make(Op::broadcast_rows, row.value().replicate(rows, 1), {row});
}

Var sum_rows(const Var& x) { return make(Op::sum_rows, x.value().colwise().sum(), {x}); }

Var slice_cols(const Var& x, Index offset, Index count) {
  if (offset < 0 || count < 0 || offset + count > x.cols())
    throw ShapeError("slice_cols: columns [" + std::to_string(offset) + ", " +
                     std::to_string(offset + count) + ") out of range for " + x.shape());
  Var v = make(Op::slice_cols, x.value().middleCols(offset, count), {x});
  v.node()->offset = offset;
  return v;
}

Var pad_cols(const Var& x, Index offset, Index total) {
  if (offset < 0 || offset + x.cols() > total)
    throw ShapeError("pad_cols: " + x.shape() + " does not fit at column " +
                     std::to_string(offset) + " of " + std::to_string(total));
  Matrix out = Matrix::Zero(x.rows(), total);
  out.middleCols(offset, x.cols()) = x.value();
  Var v = make(Op::pad_cols, std::move(out), {x});
  v.node()->offset = offset;
  return v;
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Index total = 0;
  for (const Var& p : parts) {
    if (p.rows() != parts.front().rows()) shape_fail("concat_cols", parts.front(), p);
    total += p.cols();
  }
  Var out;
  Index offset = 0;
  for (const Var& p : parts) {
    Var padded = pad_cols(p, offset, total);
    out = out.defined() ? add(out, padded) : padded;
    offset += p.cols();
  }
  return out;
}

Var logdet_rows(const Var& flat, Index d) {
  if (flat.cols() != d * d)
    throw ShapeError("logdet_rows: " + flat.shape() + " rows are not " + std::to_string(d) + "x" +
                     std::to_string(d) + " matrices");
  Var v = make(Op::logdet_rows, logdet_rows_value(flat.value(), d), {flat});
  v.node()->extent = d;
  return v;
}

Var inv_transpose_rows(const Var& flat, Index d) {
  if (flat.cols() != d * d)
    throw ShapeError("inv_transpose_rows: " + flat.shape() + " rows are not " + std::to_string(d) +
                     "x" + std::to_string(d) + " matrices");
  Var v = make(Op::inv_transpose_rows, inv_transpose_rows_value(flat.value(), d), {flat});
  v.node()->extent = d;
  return v;
}

std::vector<Var> grad(std::span<const Var> outputs, std::span<const Var> seeds,
                      std::span<const Var> inputs, bool create_graph) {
  if (outputs.size() != seeds.size())
    throw ShapeError("grad: " + std::to_string(outputs.size()) + " outputs but " +
                     std::to_string(seeds.size()) + " seeds");
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    if (outputs[i].rows() != seeds[i].rows() || outputs[i].cols() != seeds[i].cols())
      throw ShapeError("grad: seed " + seeds[i].shape() + " does not match output " +
                       outputs[i].shape());
  }

  std::optional<NoGradGuard> no_grad;
  if (!create_graph) no_grad.emplace();

  std::unordered_set<const Node*> targets;
  for (const Var& x : inputs) targets.insert(x.node());

  // Iterative post-order DFS; parents precede children in `order`.
  std::vector<const Node*> order;
  std::unordered_set<const Node*> visited;
  std::vector<std::pair<const Node*, std::size_t>> stack;
  for (const Var& y : outputs) {
    if (!visited.insert(y.node()).second) continue;
    stack.emplace_back(y.node(), 0);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        const Node* parent = node->parents[next++].get();
        if (visited.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::unordered_set<const Node*> relevant;
  for (const Node* node : order) {
    bool r = targets.count(node) > 0;
    for (const auto& parent : node->parents) r = r || relevant.count(parent.get()) > 0;
    if (r) relevant.insert(node);
  }

  std::unordered_map<const Node*, Var> adjoints;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    if (relevant.count(outputs[i].node())) accumulate(adjoints, outputs[i].node(), seeds[i]);
  }

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node* node = *it;
    if (node->parents.empty() || !relevant.count(node)) continue;
    auto adj = adjoints.find(node);
    if (adj == adjoints.end()) continue;
    const std::vector<Var> parent_adjoints = backward_rule(*node, adj->second);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      const Node* parent = node->parents[i].get();
      if (relevant.count(parent)) accumulate(adjoints, parent, parent_adjoints[i]);
    }
    // Interior adjoints are not needed once propagated.
    if (!targets.count(node)) adjoints.erase(adj);
  }

  std::vector<Var> result;
  result.reserve(inputs.size());
  for (const Var& x : inputs) {
    auto it = adjoints.find(x.node());
    result.push_back(it != adjoints.end() ? it->second
                                          : constant(Matrix::Zero(x.rows(), x.cols())));
  }
  return result;
}

Var vjp(const Var& y, const Var& x, const Var& v) {
  if (v.rows() != y.rows() || v.cols() != y.cols())
    throw ShapeError("vjp: vector " + v.shape() + " does not match output " + y.shape());
  const Var outs[] = {y};
  const Var seeds[] = {v};
  const Var ins[] = {x};
  return grad(outs, seeds, ins, true).front();
}

std::vector<Matrix> gradient(const Var& scalar, std::span<const Var> params) {
  if (scalar.rows() != 1 || scalar.cols() != 1)
    throw ShapeError("gradient: expected a scalar (1x1) value, got " + scalar.shape());
  const Var outs[] = {scalar};
  const Var seeds[] = {constant(Matrix::Ones(1, 1))};
  std::vector<Var> g = grad(outs, seeds, params, false);
  std::vector<Matrix> result;
  result.reserve(g.size());
  for (const Var& v : g) result.push_back(v.value());
  return result;
}

Matrix full_jacobian(const Function& f, const Vector& x, Index oracle_limit) {
  std::vector<Matrix> j = batch_jacobians(f, Matrix(x.transpose()), oracle_limit);
  return j.front();
}

std::vector<Matrix> batch_jacobians(const Function& f, const Matrix& xs, Index oracle_limit) {
  const Index d = xs.cols();
  if (d > oracle_limit)
    throw ShapeError("full_jacobian: dimension " + std::to_string(d) + " exceeds oracle limit " +
                     std::to_string(oracle_limit));
  EnableGradGuard recording;
  const Var x = variable(xs);
  const Var y = f(x);
  if (y.rows() != xs.rows() || y.cols() != d)
    throw ShapeError("full_jacobian: f maps " + x.shape() + " to " + y.shape() +
                     ", expected a square row-wise map");
  std::vector<Matrix> jac(static_cast<std::size_t>(xs.rows()), Matrix(d, d));
  const Var outs[] = {y};
  const Var ins[] = {x};
  for (Index i = 0; i < d; ++i) {
    Matrix seed = Matrix::Zero(xs.rows(), d);
    seed.col(i).setOnes();
    const Var seeds[] = {constant(std::move(seed))};
    const Matrix rows = grad(outs, seeds, ins, false).front().value();
    for (Index b = 0; b < xs.rows(); ++b) jac[static_cast<std::size_t>(b)].row(i) = rows.row(b);
  }
  return jac;
}

}  // namespace iresnet::graph
