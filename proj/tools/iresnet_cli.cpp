#include "iresnet/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

using iresnet::CommandOptions;

void add_common(CLI::App* cmd, CommandOptions& o) {
  cmd->add_option("--seed", o.seed, "Seed for every random stream");
  cmd->add_option("--out-dir", o.out_dir, "Directory for output files")->capture_default_str();
}

void add_checkpoint(CLI::App* cmd, CommandOptions& o) {
  cmd->add_option("--checkpoint", o.checkpoint_path, "Checkpoint written by train")->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Invertible residual network flows on toy densities"};
  app.require_subcommand(1);
  CommandOptions o;
  bool print_config = false;

  auto* train = app.add_subcommand("train", "Train a flow from a config file");
  train->add_option("--config", o.config_path, "INI config with [model] and [train] sections");
  train->add_option("--n-terms", o.n_terms, "Series terms for the stochastic log-det");
  train->add_flag("--print-config", print_config, "Print the effective config and exit");
  add_common(train, o);

  auto* sample = app.add_subcommand("sample", "Draw samples by inverting the flow");
  add_checkpoint(sample, o);
  sample->add_option("--count", o.count, "Number of samples")->check(CLI::NonNegativeNumber)->capture_default_str();
  sample->add_option("--tol", o.tol, "Fixed-point stopping tolerance")->capture_default_str();
  sample->add_option("--max-iters", o.max_iters, "Fixed-point iteration cap per block")->capture_default_str();
  add_common(sample, o);

  auto* density = app.add_subcommand("density", "Evaluate the model density on a grid");
  add_checkpoint(density, o);
  density->add_option("--resolution", o.resolution, "Grid cells per axis")->capture_default_str();
  density->add_option("--lo", o.lo, "Lower grid bound on both axes")->capture_default_str();
  density->add_option("--hi", o.hi, "Upper grid bound on both axes")->capture_default_str();
  add_common(density, o);

  auto* audit = app.add_subcommand("audit", "Check Lipschitz certificates and inversion behaviour");
  add_checkpoint(audit, o);
  audit->add_option("--max-iters", o.curve_iters, "Longest point of the reconstruction curve")->capture_default_str();
  add_common(audit, o);

  auto* bias = app.add_subcommand("bias", "Tabulate log-det estimator bias against series length");
  add_checkpoint(bias, o);
  bias->add_option("--n-max", o.n_max, "Largest series length")->capture_default_str();
  bias->add_option("--probes", o.probes, "Hutchinson probes per point (default 1000)");
  bias->add_option("--count", o.bias_points, "Data points averaged over")->check(CLI::PositiveNumber)->capture_default_str();
  add_common(bias, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? iresnet::kExitOk : iresnet::kExitUsage;
  }

  if (train->parsed()) {
    if (print_config) {
      try {
        iresnet::TrainConfig c = o.config_path.empty() ? iresnet::TrainConfig{} : iresnet::load_config(o.config_path);
        if (o.seed) c.seed = *o.seed;
        if (o.n_terms) c.n_terms = *o.n_terms;
        std::cout << iresnet::config_to_string(c);
        return iresnet::kExitOk;
      } catch (const iresnet::ConfigError& e) {
        std::cerr << "train: usage error: " << e.what() << "\n";
        return iresnet::kExitUsage;
      } catch (const iresnet::IoError& e) {
        std::cerr << "train: i/o error: " << e.what() << "\n";
        return iresnet::kExitIo;
      }
    }
    return iresnet::cmd_train(o, std::cerr);
  }
  if (sample->parsed()) return iresnet::cmd_sample(o, std::cerr);
  if (density->parsed()) return iresnet::cmd_density(o, std::cerr);
  if (audit->parsed()) return iresnet::cmd_audit(o, std::cerr);
  return iresnet::cmd_bias(o, std::cerr);
}
