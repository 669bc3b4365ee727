#pragma once

// Subcommand implementations behind the command-line tool. Each returns a
// process exit code and writes its artifacts under the output directory.

#include "iresnet/io.hpp"

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace iresnet {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitContract = 2, kExitIo = 3 };

struct CommandOptions {
  std::string config_path;
  std::string checkpoint_path;
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;
  double tol = 1e-8;
  int max_iters = 200;
  std::optional<int> n_terms;
  std::optional<int> probes;
  Index count = 1000;
  int resolution = 100;
  double lo = -4.0;
  double hi = 4.0;
  int n_max = 20;
  Index bias_points = 16384;
  int curve_iters = 60;
};

struct AuditCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct AuditReport {
  std::vector<AuditCheck> checks;
  std::string curve_csv;  // iterations,max_error
  double curve_slope = 0.0;
  bool pass() const;
  std::string text() const;
};

/// Certificates, reconstruction curve and log-det bounds of a model.
AuditReport audit_model(const IResNetModel& model, const CommandOptions& options, Rng& rng);

int cmd_train(const CommandOptions& options, std::ostream& log);
int cmd_sample(const CommandOptions& options, std::ostream& log);
int cmd_density(const CommandOptions& options, std::ostream& log);
int cmd_audit(const CommandOptions& options, std::ostream& log);
int cmd_bias(const CommandOptions& options, std::ostream& log);

/// Least-squares slope of ln(error) against iteration count, over errors
/// above `floor`.
double log_error_slope(const std::vector<int>& iterations, const std::vector<double>& errors,
                       double floor = 1e-11);

}  // namespace iresnet
