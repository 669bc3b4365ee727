#pragma once

// ln|det J_F(x)| three ways: exact (dense Jacobian + LU), truncated power
// series with exact traces, and the same series with Hutchinson trace probes.
// Also the a-priori bounds and bias diagnostics for these estimates.

#include "iresnet/model.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace iresnet {

enum class LogDetMode { exact, series_exact_trace, series_stochastic };
enum class ProbeDistribution { gaussian, rademacher };

std::string to_string(LogDetMode mode);
std::string to_string(ProbeDistribution dist);
ProbeDistribution probe_distribution_from_string(const std::string& name);

struct LogDetEstimate {
  double value = 0.0;  // nats
  int n_terms = 0;
  int n_samples = 0;
  LogDetMode mode = LogDetMode::exact;
  double trunc_bound = 0.0;
  double std_error = 0.0;
  /// Series contribution of term k (index k-1), summed over blocks.
  std::vector<double> per_term;
};

/// Zero-mean, identity-covariance probe vectors, one per row.
struct TraceProbe {
  ProbeDistribution distribution = ProbeDistribution::gaussian;
  Matrix v;

  static TraceProbe draw(ProbeDistribution dist, Index rows, Index dim, Rng& rng);
};

/// Truncation bound -d (ln(1 - lip) + sum_{k<=n} lip^k / k)
/// on |PS(J_g, n) - ln det(I + J_g)|. Requires 0 <= lip < 1.
template <typename Scalar>
Scalar truncation_bound(Index d, Scalar lip, int n) {
  using std::log1p;
  if (!(lip >= Scalar(0) && lip < Scalar(1)))
    throw ContractError("truncation_bound: lip = " + std::to_string(static_cast<double>(lip)) +
                        " must lie in [0, 1)");
  if (lip == Scalar(0)) return Scalar(0);
  Scalar head = 0;
  Scalar p = 1;
  for (int k = 1; k <= n; ++k) {
    p *= lip;
    head += p / Scalar(k);
  }
  const Scalar direct = -Scalar(d) * (log1p(-lip) + head);
  if (direct > Scalar(1e-4)) return direct;
  // Far into the tail the difference above is round-off; sum the tail instead.
  Scalar tail = 0;
  Scalar term = p * lip;
  for (int k = n + 1; term > Scalar(0); ++k) {
    const Scalar next = term / Scalar(k);
    tail += next;
    if (next <= tail * std::numeric_limits<Scalar>::epsilon()) break;
    term *= lip;
  }
  return Scalar(d) * tail;
}

/// Dense Jacobian of g at each row of xs (batched VJPs).
std::vector<Matrix> block_jacobians(const ResidualBlock& block, const Matrix& xs);

/// Exact ln det J_F per row; throws ContractError when a stage determinant is
/// not positive, which would contradict the block's contraction certificate.
Vector exact_logdet(const IResNetModel& model, const Matrix& xs);
double exact_logdet(const IResNetModel& model, const Vector& x);

/// sum_{k=1}^n (-1)^{k+1} tr(J^k) / k from explicit matrix powers.
double power_series_logdet(const Matrix& jacobian, int n, std::vector<double>* per_term = nullptr);

LogDetEstimate series_logdet_exact_trace(const IResNetModel& model, const Vector& x, int n);

LogDetEstimate stochastic_logdet(const IResNetModel& model, const Vector& x, int n, int m,
                                 ProbeDistribution dist, Rng& rng);

struct AdaptiveOptions {
  double tol_per_dim = 1e-4;  // nats per dimension
  int max_terms = 200;
  int initial_probes = 64;
  int max_probes = 1 << 16;
  ProbeDistribution distribution = ProbeDistribution::gaussian;
};

struct AdaptiveLogDet {
  LogDetEstimate estimate;
  bool terms_reached = false;  // truncation bound below tolerance
  bool error_reached = false;  // standard error below tolerance
};

/// Evaluation-grade stochastic estimate: the smallest n whose truncation
/// bound is below tolerance, then probe batches doubled until the standard
/// error is too (or the caps are hit).
AdaptiveLogDet adaptive_logdet(const IResNetModel& model, const Vector& x, const AdaptiveOptions& options,
                               Rng& rng);

/// Per-row probe estimates of the block series: for each probe row v,
/// w^T <- w^T J_g k times and accumulate (-1)^{k+1} w^T v / k. Returns
/// rows x n_terms cumulative estimates (column k-1 holds the n = k estimate).
Matrix stochastic_series_terms(const ResidualBlock& block, const Matrix& xs, const Matrix& probes,
                               int n_terms);

/// Sum over blocks of truncation_bound(d, L_t, n).
double model_truncation_bound(const IResNetModel& model, int n);

struct LogDetBounds {
  double lower = 0.0;
  double upper = 0.0;
};

/// d sum ln(1 - L_t) and d sum ln(1 + L_t), offset by the ActNorm log-dets.
LogDetBounds logdet_bounds(const IResNetModel& model);

struct BiasRow {
  int n = 0;
  double mean = 0.0;   // mean estimate, nats
  double std = 0.0;    // std over probes of (estimate - exact)
  double exact = 0.0;  // mean exact log-det, nats
  double trunc_bound = 0.0;
};

struct BiasOptions {
  int n_max = 20;
  int probes = 1000;
  ProbeDistribution distribution = ProbeDistribution::gaussian;
  /// Replace probes by exact traces; the std column then vanishes.
  bool exact_traces = false;
};

/// Estimator bias and spread for n = 1..n_max, averaged over the rows of xs
/// with `probes` probes per row.
std::vector<BiasRow> bias_profile(const IResNetModel& model, const Matrix& xs,
                                  const BiasOptions& options, Rng& rng);

std::string bias_csv(const std::vector<BiasRow>& rows);

struct GradientRate {
  std::vector<int> n;
  std::vector<double> error;  // ||grad(exact - PS(n))||_inf
  double slope = 0.0;         // least-squares slope of ln error vs n
  int fitted_points = 0;
};

/// Gradient error of the exact-trace series against the exact log-det
/// gradient, with respect to the block parameters at the rows of xs.
GradientRate gradient_rate_check(const ResidualBlock& block, const Matrix& xs, int n_min, int n_max);

// Differentiable per-row log-det terms for training graphs; x must require
// grad so the Jacobian can be formed by VJPs. All return rows x 1.
namespace terms {

/// ln det(I + J_g) per row, from d VJPs and a dense log-determinant.
graph::Var exact(const graph::Var& x, const graph::Var& gx);
/// Hutchinson power series with one probe row per input row.
graph::Var stochastic(const graph::Var& x, const graph::Var& gx, const Matrix& probes, int n);
/// Power series with exact traces (basis probes); element k-1 is the n = k sum.
std::vector<graph::Var> exact_trace_partial_sums(const graph::Var& x, const graph::Var& gx, int n);

}  // namespace terms

}  // namespace iresnet
