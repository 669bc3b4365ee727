#pragma once

// Maximum-likelihood training of an i-ResNet flow on 2D toy densities.

#include "iresnet/logdet.hpp"

#include <array>
#include <string>
#include <vector>

namespace iresnet {

enum class ToyDensity { eight_gaussians, checkerboard, rings, gaussian };

std::string to_string(ToyDensity d);
ToyDensity toy_density_from_string(const std::string& name);

/// Seeded sampler for a 2D toy density; every sample lies in [-4, 4]^2.
class ToyDataset {
 public:
  explicit ToyDataset(ToyDensity density) : density_(density) {}
  explicit ToyDataset(const std::string& name) : density_(toy_density_from_string(name)) {}

  ToyDensity density() const { return density_; }
  std::string name() const { return to_string(density_); }
  Matrix sample(Index count, Rng& rng) const;

  /// Checkerboard only: true when (x, y) falls in a populated square.
  static bool in_checkerboard_support(double x, double y);

 private:
  Eigen::Vector2d sample_one(Rng& rng) const;
  ToyDensity density_;
};

/// NLL in bits/dim of the maximum-likelihood Gaussian fit, on the same data.
double gaussian_fit_baseline(const Matrix& data);

/// ln N(z; 0, I) per row.
Vector standard_normal_logpdf(const Matrix& z);

struct TrainConfig {
  int n_blocks = 10;
  std::vector<Index> hidden = {32, 32};
  double coeff = 0.9;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 64;
  int steps = 20000;
  LogDetMode logdet_mode = LogDetMode::exact;
  int n_terms = 10;
  ProbeDistribution probes = ProbeDistribution::gaussian;
  int power_iters = 1;
  graph::Activation activation = graph::Activation::elu;
  ActNormPlacement placement = ActNormPlacement::before;
  std::string dataset = "eight-gaussians";
  std::uint64_t seed = 0;
  int log_every = 100;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Adam moments for a flat parameter list.
struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long step = 0;
};

/// Writable views of every trainable array of the model, in binding order.
std::vector<Eigen::Map<Matrix>> parameter_views(IResNetModel& model);

/// Bias-corrected Adam step on the views with gradients in the same order.
void adam_update(AdamState& state, std::vector<Eigen::Map<Matrix>>& params,
                 const std::vector<Matrix>& grads, double lr, double beta1, double beta2, double eps);

struct MetricRow {
  long step = 0;
  double nll_bits = 0.0;
  double grad_norm = 0.0;
  double max_layer_sigma = 0.0;
};

struct TrainState {
  IResNetModel model;
  AdamState adam;
  long step = 0;
  double running_nll = 0.0;
  double initial_nll = 0.0;
  std::vector<MetricRow> metrics;
  Rng data_rng;
  Rng probe_rng;
};

/// Training diverged; the TrainState passed to run_training holds the last state.
class DivergenceError : public ContractError {
 public:
  using ContractError::ContractError;
};

struct ModelParams {
  std::vector<graph::Var> log_scales;
  std::vector<graph::Var> shifts;
  std::vector<BlockParams> blocks;

  /// Same order as parameter_views.
  std::vector<graph::Var> all() const;
};

ModelParams bind(const IResNetModel& model, bool trainable);

/// Graph of the mean NLL in bits/dim over `batch`. Stochastic mode draws one
/// probe per row and block from `probe_rng`.
graph::Var nll_graph(const IResNetModel& model, const ModelParams& params, const Matrix& batch,
                     LogDetMode mode, int n_terms, ProbeDistribution dist, Rng* probe_rng);

/// -mean[ln p_z(F(x)) + ln det J_F(x)] / (d ln 2) with the exact log-det.
double nll_loss(const IResNetModel& model, const Matrix& batch);
/// Same loss with the requested log-det mode (stochastic needs an rng).
double nll_loss(const IResNetModel& model, const Matrix& batch, LogDetMode mode, int n_terms,
                Rng* probe_rng);

TrainState init_training(const TrainConfig& config, const ToyDataset& dataset, Rng& rng);
/// Runs until state.step == config.steps, then certifies the weights.
void run_training(TrainState& state, const TrainConfig& config, const ToyDataset& dataset);
TrainState train(const TrainConfig& config, const ToyDataset& dataset, Rng& rng);

std::string metrics_csv(const std::vector<MetricRow>& rows);

struct SampleResult {
  Matrix points;
  std::vector<bool> round_trip_ok;
  bool converged = true;
};

/// x = F^{-1}(z) for z ~ N(0, I); each row checked by ||F(x) - z|| < 10 tol.
SampleResult sample(const IResNetModel& model, Index count, Rng& rng, double tol = 1e-8,
                    int max_iters = 200);

struct DensityGrid {
  std::vector<double> xs;
  std::vector<double> ys;
  Matrix log_density;  // (iy, ix)
  double cell_area = 0.0;

  /// Riemann sum of exp(log_density) over the cells.
  double mass() const;
  /// Mass restricted to cells whose centers satisfy `inside`.
  double mass_where(bool (*inside)(double, double)) const;
};

/// Exact-mode log densities at cell centers of a resolution x resolution grid
/// over [lo, hi]^2.
DensityGrid density_grid(const IResNetModel& model, double lo, double hi, int resolution);

std::string density_csv(const DensityGrid& grid);
std::string samples_csv(const SampleResult& samples);

}  // namespace iresnet
