#include "iresnet/commands.hpp"

#include "iresnet/csv.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <numbers>
#include <sstream>

namespace iresnet {
namespace {

namespace fs = std::filesystem;

std::string out_path(const CommandOptions& o, const std::string& name) {
  return (fs::path(o.out_dir) / name).string();
}

void ensure_out_dir(const CommandOptions& o) {
  std::error_code ec;
  fs::create_directories(o.out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + o.out_dir + "': " + ec.message());
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Checkpoint require_checkpoint(const CommandOptions& o, const std::string& cmd) {
  if (o.checkpoint_path.empty()) throw ConfigError(cmd + ": --checkpoint is required");
  return load_checkpoint(o.checkpoint_path);
}

// Runs a command body, mapping error categories onto exit codes.
template <typename Body>
int guarded(std::ostream& log, const std::string& cmd, Body&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    log << cmd << ": usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    log << cmd << ": i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ContractError& e) {
    log << cmd << ": numerical contract violated: " << e.what() << "\n";
    return kExitContract;
  } catch (const ShapeError& e) {
    log << cmd << ": usage error: " << e.what() << "\n";
    return kExitUsage;
  }
}

Matrix probe_points(const IResNetModel& model, Index count, Rng& rng, double lo, double hi) {
  Matrix xs(count, model.dim);
  for (Index i = 0; i < count; ++i)
    for (Index j = 0; j < model.dim; ++j) xs(i, j) = rng.uniform(lo, hi);
  return xs;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os.precision(6);
  os << v;
  return os.str();
}

}  // namespace

double log_error_slope(const std::vector<int>& iterations, const std::vector<double>& errors, double floor) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int k = 0;
  for (std::size_t i = 0; i < iterations.size(); ++i) {
    if (!(errors[i] > floor)) continue;
    const double x = iterations[i], y = std::log(errors[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++k;
  }
  if (k < 2) return -std::numeric_limits<double>::infinity();
  return (k * sxy - sx * sy) / (k * sxx - sx * sx);
}

bool AuditReport::pass() const {
  for (const auto& c : checks)
    if (!c.pass) return false;
  return true;
}

std::string AuditReport::text() const {
  std::ostringstream os;
  for (const auto& c : checks) os << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
  os << (pass() ? "AUDIT PASS" : "AUDIT FAIL") << "\n";
  return os.str();
}

AuditReport audit_model(const IResNetModel& model, const CommandOptions& options, Rng& rng) {
  AuditReport report;
  bool certified = true;
  for (std::size_t t = 0; t < model.stages.size(); ++t) {
    const auto& layers = model.stages[t].block.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& layer = layers[i];
      const double sigma = layer.exact_norm();
      const bool coeff_ok = layer.coeff > 0.0 && layer.coeff < 1.0;
      const bool ok = coeff_ok && sigma <= layer.coeff + kAuditTolerance;
      certified = certified && ok;
      report.checks.push_back({"stage " + std::to_string(t) + " layer " + std::to_string(i) + " spectral norm", ok,
                               "exact " + fmt(sigma) + " vs c " + fmt(layer.coeff) +
                                   (coeff_ok ? "" : " (c outside (0, 1))")});
    }
    const double lip = model.stages[t].block.lipschitz_bound();
    certified = certified && lip < 1.0;
    report.checks.push_back({"stage " + std::to_string(t) + " Lipschitz certificate", lip < 1.0,
                             "product of layer norms " + fmt(lip)});
  }
  if (!certified) return report;

  // Reconstruction error against fixed-point iteration count.
  const Matrix x = probe_points(model, 256, rng, options.lo, options.hi);
  const Matrix z = forward(model, x);
  std::vector<int> iters;
  std::vector<double> errors;
  CsvWriter curve("iterations,max_error");
  for (int n = 0; n <= options.curve_iters; ++n) {
    const double err = (inverse_fixed(model, z, n) - x).rowwise().norm().maxCoeff();
    curve.row(n, err);
    if (n >= 1) {
      iters.push_back(n);
      errors.push_back(err);
    }
  }
  report.curve_csv = curve.str();
  report.curve_slope = log_error_slope(iters, errors);
  const double slope_limit = std::log(model.coeff) + 0.05;
  report.checks.push_back({"reconstruction error decay", report.curve_slope <= slope_limit,
                           "slope " + fmt(report.curve_slope) + " vs ln(c) + 0.05 = " + fmt(slope_limit)});

  const Matrix probes = probe_points(model, 1000, rng, options.lo, options.hi);
  const std::vector<Matrix> inputs = block_inputs(model, probes);
  double min_det = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < model.stages.size(); ++t) {
    const auto jac = block_jacobians(model.stages[t].block, inputs[t]);
    for (const auto& j : jac)
      min_det = std::min(min_det, (Matrix::Identity(model.dim, model.dim) + j).determinant());
  }
  report.checks.push_back({"stage determinants positive", min_det > 0.0, "min det(I + J_g) " + fmt(min_det)});
  if (min_det > 0.0) {
    const LogDetBounds bounds = logdet_bounds(model);
    const Vector ld = exact_logdet(model, probes);
    const bool inside = ld.minCoeff() >= bounds.lower && ld.maxCoeff() <= bounds.upper;
    report.checks.push_back({"log-det within bounds", inside,
                             "[" + fmt(ld.minCoeff()) + ", " + fmt(ld.maxCoeff()) + "] inside [" +
                                 fmt(bounds.lower) + ", " + fmt(bounds.upper) + "]"});
  }
  return report;
}

int cmd_train(const CommandOptions& options, std::ostream& log) {
  return guarded(log, "train", [&] {
    if (options.config_path.empty()) throw ConfigError("train: --config is required");
    const std::string text = read_file(options.config_path);
    if (!config_sets(text, "train.dataset"))
      throw ConfigError("train: config field 'train.dataset' missing (accepted: eight-gaussians, checkerboard, rings, gaussian)");
    TrainConfig config = parse_config(text);
    if (options.seed) config.seed = *options.seed;
    if (options.n_terms) config.n_terms = *options.n_terms;
    config.validate();
    ensure_out_dir(options);
    const std::string started = utc_now();
    const auto clock_start = std::chrono::steady_clock::now();

    const ToyDataset dataset(config.dataset);
    Rng rng(config.seed);
    TrainState state = init_training(config, dataset, rng);
    try {
      run_training(state, config, dataset);
    } catch (const DivergenceError&) {
      save_checkpoint(out_path(options, "diverged.ckpt"), config, state);
      write_file(out_path(options, "metrics.csv"), metrics_csv(state.metrics));
      throw;
    }

    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
    const std::string ckpt = out_path(options, "checkpoint.ckpt");
    const std::string metrics = out_path(options, "metrics.csv");
    const std::string manifest = out_path(options, "manifest.json");
    save_checkpoint(ckpt, config, state);
    write_file(metrics, metrics_csv(state.metrics));

    Rng eval_rng = rng.derive("eval");
    const Matrix eval = dataset.sample(4096, eval_rng);
    const double nll = nll_loss(state.model, eval);
    const double baseline = gaussian_fit_baseline(eval);
    nlohmann::json m = {{"seed", config.seed},
                        {"start_time", started},
                        {"config_hash", config_hash(config)},
                        {"outputs", {ckpt, metrics, manifest}},
                        {"elapsed_seconds", elapsed},
                        {"final_nll_bits", nll},
                        {"gaussian_baseline_bits", baseline}};
    write_file(manifest, m.dump(2) + "\n");
    log << "train: " << state.step << " steps, eval NLL " << nll << " bits/dim (Gaussian fit " << baseline
        << ")\n";
    return static_cast<int>(kExitOk);
  });
}

int cmd_sample(const CommandOptions& options, std::ostream& log) {
  return guarded(log, "sample", [&] {
    const Checkpoint ck = require_checkpoint(options, "sample");
    ensure_out_dir(options);
    Rng rng(options.seed.value_or(0));
    Rng sample_rng = rng.derive("sample");
    const SampleResult s = sample(ck.state.model, options.count, sample_rng, options.tol, options.max_iters);
    write_file(out_path(options, "samples.csv"), samples_csv(s));
    std::size_t failed = 0;
    for (bool ok : s.round_trip_ok) failed += ok ? 0 : 1;
    log << "sample: " << s.points.rows() << " points, " << failed << " round-trip failures"
        << (s.converged ? "" : ", iteration cap reached") << "\n";
    return static_cast<int>(failed == 0 && s.converged ? kExitOk : kExitContract);
  });
}

int cmd_density(const CommandOptions& options, std::ostream& log) {
  return guarded(log, "density", [&] {
    if (options.resolution < 2) throw ConfigError("density: --resolution must be >= 2");
    const Checkpoint ck = require_checkpoint(options, "density");
    ensure_out_dir(options);
    const DensityGrid grid = density_grid(ck.state.model, options.lo, options.hi, options.resolution);
    write_file(out_path(options, "density.csv"), density_csv(grid));
    log << "density: " << options.resolution << "x" << options.resolution << " grid, mass " << grid.mass() << "\n";
    return static_cast<int>(kExitOk);
  });
}

int cmd_audit(const CommandOptions& options, std::ostream& log) {
  return guarded(log, "audit", [&] {
    const Checkpoint ck = require_checkpoint(options, "audit");
    ensure_out_dir(options);
    Rng rng(options.seed.value_or(0));
    Rng audit_rng = rng.derive("audit");
    const AuditReport report = audit_model(ck.state.model, options, audit_rng);
    write_file(out_path(options, "audit.txt"), report.text());
    if (!report.curve_csv.empty()) write_file(out_path(options, "reconstruction_curve.csv"), report.curve_csv);
    log << report.text();
    return static_cast<int>(report.pass() ? kExitOk : kExitContract);
  });
}

int cmd_bias(const CommandOptions& options, std::ostream& log) {
  return guarded(log, "bias", [&] {
    const Checkpoint ck = require_checkpoint(options, "bias");
    const IResNetModel& model = ck.state.model;
    if (model.dim > graph::kDefaultOracleLimit)
      throw ConfigError("bias: dimension " + std::to_string(model.dim) + " exceeds oracle limit");
    ensure_out_dir(options);
    Rng rng(options.seed.value_or(0));
    Rng data_rng = rng.derive("bias-points");
    Rng probe_rng = rng.derive("bias-probes");
    const Matrix xs = ToyDataset(ck.config.dataset).sample(options.bias_points, data_rng);
    BiasOptions bias;
    bias.n_max = options.n_max;
    bias.probes = options.probes.value_or(1000);
    const auto rows = bias_profile(model, xs, bias, probe_rng);
    write_file(out_path(options, "bias.csv"), bias_csv(rows));
    int code = kExitOk;
    if (options.n_max >= 10) {
      const BiasRow& r = rows[9];
      const double bits = std::abs(r.mean - r.exact) / (static_cast<double>(model.dim) * std::numbers::ln2);
      const bool ok = bits < 1e-3;
      log << (ok ? "PASS" : "FAIL") << " bias at n = 10: " << bits << " bits/dim (limit 0.001)\n";
      if (!ok) code = kExitContract;
    }
    return code;
  });
}

}  // namespace iresnet
