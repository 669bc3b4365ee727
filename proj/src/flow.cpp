#include "iresnet/flow.hpp"

#include "iresnet/csv.hpp"

#include <cmath>
#include <numbers>

namespace iresnet {
namespace {

constexpr double kLn2 = std::numbers::ln2;
const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

bool in_box(const Eigen::Vector2d& p) { return p.cwiseAbs().maxCoeff() <= 4.0; }

Matrix as_row(const Vector& v) { return Matrix(v.transpose()); }

double max_sigma_estimate(const IResNetModel& model) {
  double s = 0.0;
  for (const auto& stage : model.stages)
    for (const auto& layer : stage.block.layers()) s = std::max(s, layer.sigma_estimate);
  return s;
}

}  // namespace

std::string to_string(ToyDensity d) {
  switch (d) {
    case ToyDensity::eight_gaussians: return "eight-gaussians";
    case ToyDensity::checkerboard: return "checkerboard";
    case ToyDensity::rings: return "rings";
    case ToyDensity::gaussian: return "gaussian";
  }
  return "unknown";
}

ToyDensity toy_density_from_string(const std::string& name) {
  if (name == "eight-gaussians") return ToyDensity::eight_gaussians;
  if (name == "checkerboard") return ToyDensity::checkerboard;
  if (name == "rings") return ToyDensity::rings;
  if (name == "gaussian") return ToyDensity::gaussian;
  throw ConfigError("dataset '" + name +
                    "' not recognized (accepted: eight-gaussians, checkerboard, rings, gaussian)");
}

bool ToyDataset::in_checkerboard_support(double x, double y) {
  if (std::abs(x) > 4.0 || std::abs(y) > 4.0) return false;
  const auto i = static_cast<long>(std::floor(x / 2.0));
  const auto j = static_cast<long>(std::floor(y / 2.0));
  return ((i + j) % 2 + 2) % 2 == 0;
}

Eigen::Vector2d ToyDataset::sample_one(Rng& rng) const {
  for (;;) {
    Eigen::Vector2d p;
    switch (density_) {
      case ToyDensity::eight_gaussians: {
        const double angle = static_cast<double>(rng.below(8)) * std::numbers::pi / 4.0;
        p << 2.0 * std::numbers::sqrt2 * std::cos(angle) + 0.35 * rng.normal(),
            2.0 * std::numbers::sqrt2 * std::sin(angle) + 0.35 * rng.normal();
        break;
      }
      case ToyDensity::checkerboard: {
        // Populated 2x2 squares are those with even floor(x/2) + floor(y/2).
        const long cell = static_cast<long>(rng.below(8));
        const long i = cell % 4 - 2;
        const long j = 2 * (cell / 4) - 2 + ((i % 2 + 2) % 2);
        p << 2.0 * (static_cast<double>(i) + rng.uniform()), 2.0 * (static_cast<double>(j) + rng.uniform());
        break;
      }
      case ToyDensity::rings: {
        const double radius = 1.0 + static_cast<double>(rng.below(3));
        const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
        p << radius * std::cos(angle) + 0.08 * rng.normal(), radius * std::sin(angle) + 0.08 * rng.normal();
        break;
      }
      case ToyDensity::gaussian:
        p << rng.normal(), rng.normal();
        break;
    }
    if (in_box(p)) return p;
  }
}

Matrix ToyDataset::sample(Index count, Rng& rng) const {
  Matrix out(count, 2);
  for (Index i = 0; i < count; ++i) out.row(i) = sample_one(rng).transpose();
  return out;
}

double gaussian_fit_baseline(const Matrix& data) {
  const double n = static_cast<double>(data.rows());
  const Index d = data.cols();
  const RowVector mean = data.colwise().mean();
  const Matrix centered = data.rowwise() - mean;
  const Matrix cov = centered.transpose() * centered / n;
  const double logdet = Eigen::LDLT<Matrix>(2.0 * std::numbers::pi * cov).vectorD().array().log().sum();
  return (0.5 * logdet + 0.5 * static_cast<double>(d)) / (static_cast<double>(d) * kLn2);
}

Vector standard_normal_logpdf(const Matrix& z) {
  return (-0.5 * z.rowwise().squaredNorm()).array() - static_cast<double>(z.cols()) * kHalfLog2Pi;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& accepted) {
    throw ConfigError("config field '" + field + "' invalid (accepted: " + accepted + ")");
  };
  if (n_blocks < 1) fail("model.n_blocks", "integer >= 1");
  for (Index w : hidden)
    if (w < 1) fail("model.hidden", "comma-separated positive widths");
  if (!(coeff > 0.0 && coeff < 1.0)) fail("model.coeff", "real in (0, 1)");
  if (!(lr > 0.0)) fail("train.lr", "positive real");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("train.beta1", "real in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("train.beta2", "real in [0, 1)");
  if (!(adam_eps > 0.0)) fail("train.adam_eps", "positive real");
  if (batch_size < 1) fail("train.batch_size", "integer >= 1");
  if (steps < 0) fail("train.steps", "integer >= 0");
  if (n_terms < 1) fail("train.n_terms", "integer >= 1");
  if (power_iters < 1) fail("model.power_iters", "integer >= 1");
  if (log_every < 1) fail("train.log_every", "integer >= 1");
  if (logdet_mode == LogDetMode::series_exact_trace) fail("train.logdet_mode", "exact, stochastic");
  if (activation == graph::Activation::exp) fail("model.activation", "elu, softplus, tanh");
  toy_density_from_string(dataset);
}

std::vector<Eigen::Map<Matrix>> parameter_views(IResNetModel& model) {
  std::vector<Eigen::Map<Matrix>> views;
  for (auto& stage : model.stages) {
    views.emplace_back(stage.actnorm.log_scale.data(), 1, stage.actnorm.dim());
    views.emplace_back(stage.actnorm.shift.data(), 1, stage.actnorm.dim());
  }
  for (auto& stage : model.stages) {
    for (auto& layer : stage.block.layers()) {
      views.emplace_back(layer.weight.data(), layer.weight.rows(), layer.weight.cols());
      views.emplace_back(layer.bias.data(), 1, layer.bias.size());
    }
  }
  return views;
}

std::vector<graph::Var> ModelParams::all() const {
  std::vector<graph::Var> out;
  for (std::size_t t = 0; t < log_scales.size(); ++t) {
    out.push_back(log_scales[t]);
    out.push_back(shifts[t]);
  }
  for (const auto& b : blocks) {
    const auto bv = b.all();
    out.insert(out.end(), bv.begin(), bv.end());
  }
  return out;
}

ModelParams bind(const IResNetModel& model, bool trainable) {
  ModelParams p;
  auto leaf = [trainable](Matrix m) {
    return trainable ? graph::variable(std::move(m)) : graph::constant(std::move(m));
  };
  for (const auto& stage : model.stages) {
    p.log_scales.push_back(leaf(as_row(stage.actnorm.log_scale)));
    p.shifts.push_back(leaf(as_row(stage.actnorm.shift)));
    p.blocks.push_back(stage.block.bind(trainable));
  }
  return p;
}

void adam_update(AdamState& state, std::vector<Eigen::Map<Matrix>>& params,
                 const std::vector<Matrix>& grads, double lr, double beta1, double beta2, double eps) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Matrix::Zero(p.rows(), p.cols()));
      state.v.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i].cwiseAbs2();
    params[i].array() -= lr * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + eps);
  }
}

graph::Var nll_graph(const IResNetModel& model, const ModelParams& params, const Matrix& batch,
                     LogDetMode mode, int n_terms, ProbeDistribution dist, Rng* probe_rng) {
  if (mode == LogDetMode::series_stochastic && probe_rng == nullptr)
    throw std::invalid_argument("nll_graph: stochastic mode needs a probe rng");
  graph::EnableGradGuard recording;
  const Index rows = batch.rows();
  const Index d = model.dim;
  graph::Var h = graph::variable(batch);
  graph::Var block_logdet;
  graph::Var actnorm_logdet;
  for (std::size_t t = 0; t < model.stages.size(); ++t) {
    const Stage& stage = model.stages[t];
    if (model.placement == ActNormPlacement::before)
      h = stage.actnorm.forward(h, params.log_scales[t], params.shifts[t]);
    const graph::Var gh = stage.block.forward(h, params.blocks[t]);
    graph::Var ld;
    switch (mode) {
      case LogDetMode::exact:
        ld = terms::exact(h, gh);
        break;
      case LogDetMode::series_stochastic:
        ld = terms::stochastic(h, gh, TraceProbe::draw(dist, rows, d, *probe_rng).v, n_terms);
        break;
      case LogDetMode::series_exact_trace:
        ld = terms::exact_trace_partial_sums(h, gh, n_terms).back();
        break;
    }
    block_logdet = block_logdet.defined() ? block_logdet + ld : ld;
    h = h + gh;
    if (model.placement == ActNormPlacement::after)
      h = stage.actnorm.forward(h, params.log_scales[t], params.shifts[t]);
    const graph::Var s = graph::sum(params.log_scales[t]);
    actnorm_logdet = actnorm_logdet.defined() ? actnorm_logdet + s : s;
  }
  const double denom = static_cast<double>(rows * d) * kLn2;
  graph::Var loss = graph::scale(graph::sum(graph::mul(h, h)), 0.5 / denom);
  if (block_logdet.defined()) loss = loss - graph::scale(graph::sum(block_logdet), 1.0 / denom);
  if (actnorm_logdet.defined())
    loss = loss - graph::scale(actnorm_logdet, 1.0 / (static_cast<double>(d) * kLn2));
  Matrix offset(1, 1);
  offset(0, 0) = kHalfLog2Pi / kLn2;
  return loss + graph::constant(std::move(offset));
}

double nll_loss(const IResNetModel& model, const Matrix& batch) {
  return nll_loss(model, batch, LogDetMode::exact, 0, nullptr);
}

double nll_loss(const IResNetModel& model, const Matrix& batch, LogDetMode mode, int n_terms,
                Rng* probe_rng) {
  const Matrix z = forward(model, batch);
  Vector logdet;
  switch (mode) {
    case LogDetMode::exact:
      logdet = exact_logdet(model, batch);
      break;
    case LogDetMode::series_exact_trace: {
      logdet.resize(batch.rows());
      for (Index i = 0; i < batch.rows(); ++i)
        logdet(i) = series_logdet_exact_trace(model, batch.row(i).transpose(), n_terms).value;
      break;
    }
    case LogDetMode::series_stochastic: {
      if (probe_rng == nullptr) throw std::invalid_argument("nll_loss: stochastic mode needs a probe rng");
      const std::vector<Matrix> inputs = block_inputs(model, batch);
      logdet = Vector::Zero(batch.rows());
      for (std::size_t t = 0; t < model.stages.size(); ++t) {
        logdet.array() += model.stages[t].actnorm.logdet();
        const Matrix probes = TraceProbe::draw(ProbeDistribution::gaussian, batch.rows(), model.dim, *probe_rng).v;
        logdet += stochastic_series_terms(model.stages[t].block, inputs[t], probes, n_terms).col(n_terms - 1);
      }
      break;
    }
  }
  const Vector per_row = -(standard_normal_logpdf(z) + logdet) / (static_cast<double>(model.dim) * kLn2);
  for (Index i = 0; i < per_row.size(); ++i) {
    if (!std::isfinite(per_row(i)))
      throw ContractError("nll_loss: non-finite loss at sample " + std::to_string(i));
  }
  return per_row.mean();
}

TrainState init_training(const TrainConfig& config, const ToyDataset& dataset, Rng& rng) {
  config.validate();
  Rng init_rng = rng.derive("init");
  TrainState state{IResNetModel::random(2, config.n_blocks, config.hidden, config.coeff,
                                        config.activation, config.placement, init_rng),
                   AdamState{}, 0, 0.0, 0.0, {}, rng.derive("data"), rng.derive("probes")};
  Rng actnorm_rng = rng.derive("actnorm");
  state.model.initialize_actnorm(dataset.sample(1024, actnorm_rng));
  return state;
}

void run_training(TrainState& state, const TrainConfig& config, const ToyDataset& dataset) {
  IResNetModel& model = state.model;
  double window_sum = 0.0;
  long window_count = 0;
  while (state.step < config.steps) {
    for (auto& stage : model.stages) stage.block.update_normalization(config.power_iters);
    const Matrix batch = dataset.sample(config.batch_size, state.data_rng);

    std::vector<Matrix> grads;
    double loss = 0.0;
    {
      const ModelParams params = bind(model, true);
      const graph::Var l = nll_graph(model, params, batch, config.logdet_mode, config.n_terms,
                                     config.probes, &state.probe_rng);
      loss = l.item();
      if (!std::isfinite(loss))
        throw DivergenceError("train: non-finite loss at step " + std::to_string(state.step + 1));
      grads = graph::gradient(l, params.all());
    }
    if (state.step == 0) state.initial_nll = loss;
    if (state.initial_nll > 0.0 && loss > 10.0 * state.initial_nll)
      throw DivergenceError("train: loss " + std::to_string(loss) + " exceeds 10x the initial " +
                            std::to_string(state.initial_nll) + " at step " +
                            std::to_string(state.step + 1));

    auto views = parameter_views(model);
    adam_update(state.adam, views, grads, config.lr, config.beta1, config.beta2, config.adam_eps);
    ++state.step;
    window_sum += loss;
    ++window_count;

    if (state.step % config.log_every == 0 || state.step == config.steps) {
      double g2 = 0.0;
      for (const auto& g : grads) g2 += g.squaredNorm();
      state.running_nll = window_sum / static_cast<double>(window_count);
      state.metrics.push_back(MetricRow{state.step, state.running_nll, std::sqrt(g2), max_sigma_estimate(model)});
      window_sum = 0.0;
      window_count = 0;
    }
  }
  model.certify(200);
}

TrainState train(const TrainConfig& config, const ToyDataset& dataset, Rng& rng) {
  TrainState state = init_training(config, dataset, rng);
  run_training(state, config, dataset);
  return state;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  CsvWriter csv("step,nll_bits,grad_norm,max_layer_sigma");
  for (const auto& r : rows) csv.row(r.step, r.nll_bits, r.grad_norm, r.max_layer_sigma);
  return csv.str();
}

SampleResult sample(const IResNetModel& model, Index count, Rng& rng, double tol, int max_iters) {
  SampleResult result;
  const Matrix z = rng.normal_matrix(count, model.dim);
  if (count == 0) {
    result.points = Matrix(0, model.dim);
    return result;
  }
  InverseResult inv = inverse(model, z, FixedPointOptions{tol, max_iters});
  result.converged = inv.converged;
  const Matrix back = forward(model, inv.x);
  for (Index i = 0; i < count; ++i) result.round_trip_ok.push_back((back.row(i) - z.row(i)).norm() < 10.0 * tol);
  result.points = std::move(inv.x);
  return result;
}

double DensityGrid::mass() const { return log_density.array().exp().sum() * cell_area; }

double DensityGrid::mass_where(bool (*inside)(double, double)) const {
  double total = 0.0;
  for (std::size_t iy = 0; iy < ys.size(); ++iy)
    for (std::size_t ix = 0; ix < xs.size(); ++ix)
      if (inside(xs[ix], ys[iy]))
        total += std::exp(log_density(static_cast<Index>(iy), static_cast<Index>(ix)));
  return total * cell_area;
}

DensityGrid density_grid(const IResNetModel& model, double lo, double hi, int resolution) {
  if (resolution < 2) throw ConfigError("density_grid: resolution must be >= 2");
  if (model.dim != 2) throw ShapeError("density_grid: model dimension must be 2");
  DensityGrid grid;
  const double h = (hi - lo) / resolution;
  grid.cell_area = h * h;
  for (int i = 0; i < resolution; ++i) {
    grid.xs.push_back(lo + (i + 0.5) * h);
    grid.ys.push_back(lo + (i + 0.5) * h);
  }
  Matrix points(static_cast<Index>(resolution) * resolution, 2);
  for (int iy = 0; iy < resolution; ++iy)
    for (int ix = 0; ix < resolution; ++ix)
      points.row(static_cast<Index>(iy) * resolution + ix) << grid.xs[ix], grid.ys[iy];
  const Vector logp = standard_normal_logpdf(forward(model, points)) + exact_logdet(model, points);
  grid.log_density = Eigen::Map<const Matrix>(logp.data(), resolution, resolution);
  return grid;
}

std::string density_csv(const DensityGrid& grid) {
  CsvWriter csv("x,y,value");
  for (std::size_t iy = 0; iy < grid.ys.size(); ++iy)
    for (std::size_t ix = 0; ix < grid.xs.size(); ++ix)
      csv.row(grid.xs[ix], grid.ys[iy], grid.log_density(static_cast<Index>(iy), static_cast<Index>(ix)));
  return csv.str();
}

std::string samples_csv(const SampleResult& samples) {
  CsvWriter csv("x,y,round_trip_ok");
  for (Index i = 0; i < samples.points.rows(); ++i)
    csv.row(samples.points(i, 0), samples.points(i, 1), samples.round_trip_ok[static_cast<std::size_t>(i)] ? 1 : 0);
  return csv.str();
}

}  // namespace iresnet
