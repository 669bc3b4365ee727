#include "iresnet/logdet.hpp"

#include "iresnet/csv.hpp"

#include <algorithm>
#include <cmath>

namespace iresnet {
namespace {


double alternating(int k) { return (k % 2 == 1) ? 1.0 : -1.0; }

void require_contractive(const IResNetModel& model, const std::string& op) {
  for (std::size_t t = 0; t < model.stages.size(); ++t) {
    const double lip = model.stages[t].block.lipschitz_bound();
    if (!(lip < 1.0))
      throw ContractError(op + ": stage " + std::to_string(t) + " has Lipschitz certificate " +
                          std::to_string(lip) + " >= 1; the power series is not guaranteed to converge");
  }
}

double actnorm_logdet(const IResNetModel& model) {
  double total = 0.0;
  for (const auto& stage : model.stages) total += stage.actnorm.logdet();
  return total;
}

Matrix replicate_rows(const Matrix& xs, Index times) {
  Matrix out(xs.rows() * times, xs.cols());
  for (Index i = 0; i < xs.rows(); ++i) out.middleRows(i * times, times) = xs.row(i).replicate(times, 1);
  return out;
}

}  // namespace

std::string to_string(LogDetMode mode) {
  switch (mode) {
    case LogDetMode::exact: return "exact";
    case LogDetMode::series_exact_trace: return "series-exact-trace";
    case LogDetMode::series_stochastic: return "series-stochastic";
  }
  return "unknown";
}

std::string to_string(ProbeDistribution dist) {
  return dist == ProbeDistribution::gaussian ? "gaussian" : "rademacher";
}

ProbeDistribution probe_distribution_from_string(const std::string& name) {
  if (name == "gaussian") return ProbeDistribution::gaussian;
  if (name == "rademacher") return ProbeDistribution::rademacher;
  throw ConfigError("probe distribution '" + name + "' not recognized (accepted: gaussian, rademacher)");
}

TraceProbe TraceProbe::draw(ProbeDistribution dist, Index rows, Index dim, Rng& rng) {
  return TraceProbe{dist, dist == ProbeDistribution::gaussian ? rng.normal_matrix(rows, dim)
                                                              : rng.rademacher_matrix(rows, dim)};
}

std::vector<Matrix> block_jacobians(const ResidualBlock& block, const Matrix& xs) {
  const BlockParams params = block.bind(false);
  return graph::batch_jacobians([&](const graph::Var& x) { return block.forward(x, params); }, xs);
}

Vector exact_logdet(const IResNetModel& model, const Matrix& xs) {
  const std::vector<Matrix> inputs = block_inputs(model, xs);
  Vector total = Vector::Constant(xs.rows(), actnorm_logdet(model));
  const Matrix eye = Matrix::Identity(model.dim, model.dim);
  for (std::size_t t = 0; t < model.stages.size(); ++t) {
    const std::vector<Matrix> jac = block_jacobians(model.stages[t].block, inputs[t]);
    for (std::size_t r = 0; r < jac.size(); ++r) {
      const double det = Eigen::PartialPivLU<Matrix>(eye + jac[r]).determinant();
      if (!(det > 0.0))
        throw ContractError("exact_logdet: stage " + std::to_string(t) + " has det(I + J_g) = " +
                            std::to_string(det) + " <= 0 at row " + std::to_string(r) +
                            "; its contraction certificate is broken");
      total(static_cast<Index>(r)) += std::log(det);
    }
  }
  return total;
}

double exact_logdet(const IResNetModel& model, const Vector& x) {
  return exact_logdet(model, Matrix(x.transpose()))(0);
}

double power_series_logdet(const Matrix& jacobian, int n, std::vector<double>* per_term) {
  Matrix power = Matrix::Identity(jacobian.rows(), jacobian.cols());
  double sum = 0.0;
  for (int k = 1; k <= n; ++k) {
    power = power * jacobian;
    const double term = alternating(k) * power.trace() / k;
    sum += term;
    if (per_term) (*per_term)[static_cast<std::size_t>(k - 1)] += term;
  }
  return sum;
}

LogDetEstimate series_logdet_exact_trace(const IResNetModel& model, const Vector& x, int n) {
  require_contractive(model, "series_logdet_exact_trace");
  LogDetEstimate est;
  est.mode = LogDetMode::series_exact_trace;
  est.n_terms = n;
  est.per_term.assign(static_cast<std::size_t>(n), 0.0);
  est.value = actnorm_logdet(model);
  const std::vector<Matrix> inputs = block_inputs(model, Matrix(x.transpose()));
  for (std::size_t t = 0; t < model.stages.size(); ++t) {
    const Matrix jac = block_jacobians(model.stages[t].block, inputs[t]).front();
    est.value += power_series_logdet(jac, n, &est.per_term);
  }
  est.trunc_bound = model_truncation_bound(model, n);
  return est;
}

Matrix stochastic_series_terms(const ResidualBlock& block, const Matrix& xs, const Matrix& probes,
                               int n_terms) {
  if (probes.rows() != xs.rows() || probes.cols() != xs.cols())
    throw ShapeError("stochastic_series_terms: probes " + shape_string(probes.rows(), probes.cols()) +
                     " do not match inputs " + shape_string(xs.rows(), xs.cols()));
  graph::EnableGradGuard recording;
  const BlockParams params = block.bind(false);
  const graph::Var x = graph::variable(xs);
  const graph::Var gx = block.forward(x, params);
  const graph::Var outs[] = {gx};
  const graph::Var ins[] = {x};
  Matrix w = probes;
  Matrix cumulative(xs.rows(), n_terms);
  Vector acc = Vector::Zero(xs.rows());
  for (int k = 1; k <= n_terms; ++k) {
    const graph::Var seeds[] = {graph::constant(std::move(w))};
    w = graph::grad(outs, seeds, ins, false).front().value();
    acc += alternating(k) / k * w.cwiseProduct(probes).rowwise().sum();
    cumulative.col(k - 1) = acc;
  }
  return cumulative;
}

LogDetEstimate stochastic_logdet(const IResNetModel& model, const Vector& x, int n, int m,
                                 ProbeDistribution dist, Rng& rng) {
  require_contractive(model, "stochastic_logdet");
  if (m < 1) throw ConfigError("stochastic_logdet: probes = " + std::to_string(m) + " must be >= 1");
  LogDetEstimate est;
  est.mode = LogDetMode::series_stochastic;
  est.n_terms = n;
  est.n_samples = m;
  est.per_term.assign(static_cast<std::size_t>(n), 0.0);
  const std::vector<Matrix> inputs = block_inputs(model, Matrix(x.transpose()));
  Vector per_probe = Vector::Constant(m, actnorm_logdet(model));
  for (std::size_t t = 0; t < model.stages.size(); ++t) {
    const TraceProbe probe = TraceProbe::draw(dist, m, model.dim, rng);
    const Matrix cumulative =
        stochastic_series_terms(model.stages[t].block, replicate_rows(inputs[t], m), probe.v, n);
    per_probe += cumulative.col(n - 1);
    for (int k = 0; k < n; ++k) {
      const double prev = k == 0 ? 0.0 : cumulative.col(k - 1).mean();
      est.per_term[static_cast<std::size_t>(k)] += cumulative.col(k).mean() - prev;
    }
  }
  est.value = per_probe.mean();
  if (m > 1) {
    const double var = (per_probe.array() - est.value).square().sum() / (m - 1);
    est.std_error = std::sqrt(var / m);
  }
  est.trunc_bound = model_truncation_bound(model, n);
  return est;
}

AdaptiveLogDet adaptive_logdet(const IResNetModel& model, const Vector& x, const AdaptiveOptions& options,
                               Rng& rng) {
  require_contractive(model, "adaptive_logdet");
  const double tol = options.tol_per_dim * static_cast<double>(model.dim);
  AdaptiveLogDet out;
  int n = 1;
  while (n < options.max_terms && model_truncation_bound(model, n) >= tol) ++n;
  out.terms_reached = model_truncation_bound(model, n) < tol;

  // Pooled first and second moments over probe batches.
  double sum = 0.0, sum_sq = 0.0;
  long total = 0;
  std::vector<double> per_term(static_cast<std::size_t>(n), 0.0);
  int batch = std::max(2, options.initial_probes);
  double mean = 0.0, se = std::numeric_limits<double>::infinity();
  while (true) {
    const LogDetEstimate b = stochastic_logdet(model, x, n, batch, options.distribution, rng);
    const double var = b.std_error * b.std_error * batch;
    sum += batch * b.value;
    sum_sq += (batch - 1) * var + batch * b.value * b.value;
    for (int k = 0; k < n; ++k) per_term[static_cast<std::size_t>(k)] += batch * b.per_term[static_cast<std::size_t>(k)];
    total += batch;
    mean = sum / static_cast<double>(total);
    const double pooled = std::max(0.0, (sum_sq - total * mean * mean) / static_cast<double>(total - 1));
    se = std::sqrt(pooled / static_cast<double>(total));
    if (se < tol || total >= options.max_probes) break;
    batch = static_cast<int>(std::min<long>(total, options.max_probes - total));
  }
  out.error_reached = se < tol;
  for (auto& t : per_term) t /= static_cast<double>(total);
  out.estimate.value = mean;
  out.estimate.n_terms = n;
  out.estimate.n_samples = static_cast<int>(total);
  out.estimate.mode = LogDetMode::series_stochastic;
  out.estimate.trunc_bound = model_truncation_bound(model, n);
  out.estimate.std_error = se;
  out.estimate.per_term = std::move(per_term);
  return out;
}

double model_truncation_bound(const IResNetModel& model, int n) {
  double total = 0.0;
  for (const auto& stage : model.stages)
    total += truncation_bound(model.dim, stage.block.lipschitz_bound(), n);
  return total;
}

LogDetBounds logdet_bounds(const IResNetModel& model) {
  LogDetBounds b;
  const double d = static_cast<double>(model.dim);
  const double act = actnorm_logdet(model);
  for (const auto& stage : model.stages) {
    const double lip = stage.block.lipschitz_bound();
    b.lower += d * std::log1p(-lip);
    b.upper += d * std::log1p(lip);
  }
  b.lower += act;
  b.upper += act;
  return b;
}

std::vector<BiasRow> bias_profile(const IResNetModel& model, const Matrix& xs,
                                  const BiasOptions& options, Rng& rng) {
  require_contractive(model, "bias_profile");
  if (model.dim > graph::kDefaultOracleLimit)
    throw ShapeError("bias_profile: dimension " + std::to_string(model.dim) +
                     " exceeds oracle limit " + std::to_string(graph::kDefaultOracleLimit));
  const int n_max = options.n_max;
  const Vector exact = exact_logdet(model, xs);
  const double act = actnorm_logdet(model);

  // Totals over points of the mean deviation and within-point variance.
  Vector mean_dev_sum = Vector::Zero(n_max);
  Vector within_var_sum = Vector::Zero(n_max);

  if (options.exact_traces) {
    for (Index i = 0; i < xs.rows(); ++i) {
      const std::vector<Matrix> inputs = block_inputs(model, xs.middleRows(i, 1));
      Vector est = Vector::Constant(n_max, act);
      for (std::size_t t = 0; t < model.stages.size(); ++t) {
        const Matrix jac = block_jacobians(model.stages[t].block, inputs[t]).front();
        for (int n = 1; n <= n_max; ++n) est(n - 1) += power_series_logdet(jac, n);
      }
      mean_dev_sum += (est.array() - exact(i)).matrix();
    }
  } else {
    const int probes = options.probes;
    if (probes < 2) throw ConfigError("bias_profile: probes must be >= 2 to estimate a spread");
    // Probe quadratic forms against explicit per-point Jacobians; same values
    // as the VJP recursion, without a graph pass per probe.
    const std::vector<Matrix> inputs = block_inputs(model, xs);
    std::vector<std::vector<Matrix>> jac;
    for (std::size_t t = 0; t < model.stages.size(); ++t)
      jac.push_back(block_jacobians(model.stages[t].block, inputs[t]));
    Matrix est(probes, n_max);
    for (Index i = 0; i < xs.rows(); ++i) {
      est.setConstant(act);
      for (std::size_t t = 0; t < model.stages.size(); ++t) {
        const Matrix v = TraceProbe::draw(options.distribution, probes, model.dim, rng).v;
        const Matrix& j = jac[t][static_cast<std::size_t>(i)];
        Matrix w = v;
        Vector acc = Vector::Zero(probes);
        for (int k = 1; k <= n_max; ++k) {
          w = w * j;
          acc += alternating(k) / k * w.cwiseProduct(v).rowwise().sum();
          est.col(k - 1) += acc;
        }
      }
      const RowVector mean = est.colwise().mean();
      mean_dev_sum += (mean.array() - exact(i)).matrix().transpose();
      const RowVector var = (est.rowwise() - mean).array().square().colwise().sum() / (probes - 1);
      within_var_sum += var.transpose();
    }
  }

  const double points = static_cast<double>(xs.rows());
  const double exact_mean = exact.mean();
  std::vector<BiasRow> out;
  for (int n = 1; n <= n_max; ++n) {
    BiasRow row;
    row.n = n;
    row.exact = exact_mean;
    row.mean = exact_mean + mean_dev_sum(n - 1) / points;
    row.std = std::sqrt(within_var_sum(n - 1) / points);
    row.trunc_bound = model_truncation_bound(model, n);
    out.push_back(row);
  }
  return out;
}

std::string bias_csv(const std::vector<BiasRow>& rows) {
  CsvWriter csv("n,mean_nats,std_nats,exact_nats,trunc_bound");
  for (const auto& r : rows) csv.row(r.n, r.mean, r.std, r.exact, r.trunc_bound);
  return csv.str();
}

GradientRate gradient_rate_check(const ResidualBlock& block, const Matrix& xs, int n_min, int n_max) {
  graph::EnableGradGuard recording;
  const BlockParams params = block.bind(true);
  const std::vector<graph::Var> theta = params.all();
  const graph::Var x = graph::variable(xs);
  const graph::Var gx = block.forward(x, params);

  const std::vector<Matrix> exact_grad = graph::gradient(graph::sum(terms::exact(x, gx)), theta);
  const std::vector<graph::Var> partial = terms::exact_trace_partial_sums(x, gx, n_max);

  GradientRate rate;
  for (int n = n_min; n <= n_max; ++n) {
    const std::vector<Matrix> g = graph::gradient(graph::sum(partial[static_cast<std::size_t>(n - 1)]), theta);
    double err = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i)
      err = std::max(err, (exact_grad[i] - g[i]).cwiseAbs().maxCoeff());
    rate.n.push_back(n);
    rate.error.push_back(err);
  }

  // Least squares over points above the round-off floor.
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < rate.n.size(); ++i) {
    if (!(rate.error[i] > 1e-12)) continue;
    const double px = rate.n[i], py = std::log(rate.error[i]);
    sx += px;
    sy += py;
    sxx += px * px;
    sxy += px * py;
    ++rate.fitted_points;
  }
  if (rate.fitted_points >= 2) {
    const double k = rate.fitted_points;
    rate.slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
  }
  return rate;
}

namespace terms {

graph::Var exact(const graph::Var& x, const graph::Var& gx) {
  const Index d = x.cols();
  std::vector<graph::Var> rows;
  rows.reserve(static_cast<std::size_t>(d));
  for (Index i = 0; i < d; ++i) {
    Matrix seed = Matrix::Zero(x.rows(), d);
    seed.col(i).setOnes();
    rows.push_back(graph::vjp(gx, x, graph::constant(std::move(seed))));
  }
  Matrix eye = Matrix::Identity(d, d);
  const RowVector eye_flat = Eigen::Map<const RowVector>(eye.data(), d * d);
  const graph::Var flat = graph::concat_cols(rows) + graph::constant(eye_flat.replicate(x.rows(), 1));
  return graph::logdet_rows(flat, d);
}

graph::Var stochastic(const graph::Var& x, const graph::Var& gx, const Matrix& probes, int n) {
  const graph::Var v = graph::constant(probes);
  const graph::Var ones = graph::constant(Matrix::Ones(x.cols(), 1));
  graph::Var w = v;
  graph::Var acc;
  for (int k = 1; k <= n; ++k) {
    w = graph::vjp(gx, x, w);
    const graph::Var term = graph::scale(graph::matmul(graph::mul(w, v), ones), alternating(k) / k);
    acc = acc.defined() ? acc + term : term;
  }
  return acc;
}

std::vector<graph::Var> exact_trace_partial_sums(const graph::Var& x, const graph::Var& gx, int n) {
  const Index d = x.cols();
  std::vector<graph::Var> traces(static_cast<std::size_t>(n));
  for (Index i = 0; i < d; ++i) {
    Matrix seed = Matrix::Zero(x.rows(), d);
    seed.col(i).setOnes();
    graph::Var w = graph::constant(std::move(seed));
    for (int k = 1; k <= n; ++k) {
      w = graph::vjp(gx, x, w);
      const graph::Var diag = graph::slice_cols(w, i, 1);
      auto& tr = traces[static_cast<std::size_t>(k - 1)];
      tr = tr.defined() ? tr + diag : diag;
    }
  }
  std::vector<graph::Var> partial;
  graph::Var acc;
  for (int k = 1; k <= n; ++k) {
    const graph::Var term = graph::scale(traces[static_cast<std::size_t>(k - 1)], alternating(k) / k);
    acc = acc.defined() ? acc + term : term;
    partial.push_back(acc);
  }
  return partial;
}

}  // namespace terms

}  // namespace iresnet
