// Command-line harness: gradient checks, parity checks, toy training,
// weight-ratio statistics and artifact export. Exit status 0 means every
// requested check passed.

#include <cstdio>
#include <exception>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "augfpn/config.hpp"
#include "augfpn/gradcheck.hpp"
#include "augfpn/parity.hpp"
#include "augfpn/train.hpp"

namespace {

augfpn::RunConfig resolve_config(const std::string& config_path,
                                 const std::optional<std::uint64_t>& seed,
                                 const std::optional<int>& precision) {
  augfpn::RunConfig cfg;
  if (!config_path.empty()) cfg = augfpn::load_config_file(config_path);
  if (seed) cfg.seed = *seed;
  if (precision) cfg.precision = *precision;
  cfg.validate();
  return cfg;
}

int run_gradcheck(std::uint64_t seed, int precision) {
  if (precision != 64) {
    std::fprintf(stderr, "gradcheck requires --precision 64 (finite differences need f64)\n");
    return 2;
  }
  augfpn::set_finite_checks(true);
  const auto report = augfpn::gradcheck_all(seed);
  for (const auto& c : report.cases) {
    std::printf("%-28s worst rel err %.3e  (tol %.0e)  %s\n", c.name.c_str(), c.worst_rel_err,
                c.tolerance, c.pass ? "ok" : "FAIL");
  }
  if (!report.all_pass) {
    std::fprintf(stderr, "gradcheck FAILED: op '%s' worst rel err %.3e exceeds %.0e\n",
                 report.first_failure()->name.c_str(), report.first_failure()->worst_rel_err,
                 report.first_failure()->tolerance);
    return 1;
  }
  std::printf("gradcheck: all %zu cases pass\n", report.cases.size());
  return 0;
}

int run_parity(std::uint64_t seed) {
  const auto report = augfpn::parity_check(seed);
  for (const auto& c : report.checks) {
    std::printf("%-44s %s\n", c.name.c_str(), c.pass ? "ok" : "FAIL");
    if (!c.pass && !c.detail.empty()) std::printf("    %s\n", c.detail.c_str());
  }
  if (!report.all_pass) {
    std::fprintf(stderr, "parity FAILED\n");
    return 1;
  }
  std::printf("parity: all %zu checks pass\n", report.checks.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature-pyramid neck verification harness"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "out";
  std::string checkpoint;
  std::string roi_file;
  std::optional<std::uint64_t> seed;
  std::optional<int> precision;

  auto add_common = [&](CLI::App* cmd, bool wants_out) {
    cmd->add_option("--config", config_path, "run configuration file");
    cmd->add_option("--seed", seed, "override the config seed");
    cmd->add_option("--precision", precision, "32 or 64")->check(CLI::IsMember({32, 64}));
    if (wants_out) cmd->add_option("--out", out_dir, "output directory");
  };

  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  add_common(gradcheck_cmd, false);

  auto* parity_cmd = app.add_subcommand("parity", "baseline/bitwise parity suite");
  add_common(parity_cmd, false);

  auto* train_cmd = app.add_subcommand("train-toy", "deterministic toy training run");
  add_common(train_cmd, true);

  std::string stats_out = "ratios.csv";
  auto* stats_cmd = app.add_subcommand("stats", "weight-ratio matrix from a checkpoint");
  stats_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  stats_cmd->add_option("--rois", roi_file, "RoI text file")->required();
  stats_cmd->add_option("--out", stats_out, "output CSV path");

  auto* export_cmd = app.add_subcommand("export", "write scene/parameter/pyramid artifacts");
  add_common(export_cmd, true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gradcheck_cmd->parsed()) {
      return run_gradcheck(seed.value_or(42), precision.value_or(64));
    }
    if (parity_cmd->parsed()) {
      return run_parity(seed.value_or(42));
    }
    if (train_cmd->parsed()) {
      const auto cfg = resolve_config(config_path, seed, precision);
      const auto result = augfpn::train_toy(cfg, out_dir);
      std::printf("train-toy: %zu steps, loss %.6g -> %.6g\n", result.losses.size(),
                  result.losses.front().total, result.losses.back().total);
      std::printf("  %s\n  %s\n  %s\n", result.loss_csv_path.c_str(),
                  result.ratio_csv_path.c_str(), result.checkpoint_dir.c_str());
      return 0;
    }
    if (stats_cmd->parsed()) {
      augfpn::emit_stats(checkpoint, roi_file, stats_out);
      std::printf("stats: wrote %s\n", stats_out.c_str());
      return 0;
    }
    if (export_cmd->parsed()) {
      const auto cfg = resolve_config(config_path, seed, precision);
      augfpn::export_artifacts(cfg, out_dir);
      std::printf("export: wrote artifacts to %s\n", out_dir.c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
