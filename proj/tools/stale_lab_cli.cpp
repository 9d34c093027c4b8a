#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "stale_lab/config.hpp"
#include "stale_lab/harness.hpp"
#include "stale_lab/verify.hpp"

using namespace stale_lab;

namespace {

int cmd_run(const std::string& config_path, const std::string& out_dir,
            const std::optional<std::uint64_t>& seed_override) {
  RunConfig cfg;
  try {
    cfg = load_run_config(config_path);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  }
  if (seed_override) cfg.seed = *seed_override;
  const auto start = std::chrono::steady_clock::now();
  const auto outcome = execute_run(cfg);
  // Wall time stays out of the result file so reruns are byte-identical.
  const std::chrono::duration<double> wall = std::chrono::steady_clock::now() - start;
  const auto path = write_result(outcome, out_dir);
  const auto& r = outcome.result;
  std::cout << path.string() << '\n'
            << "final_loss=" << r.final_loss << " initial_loss=" << r.initial_loss
            << " diverged=" << (r.diverged ? "true" : "false") << " rounds=" << r.rounds_completed
            << " sigma_bar=" << r.sigma_bar << " wall_s=" << wall.count() << '\n';
  return 0;
}

int cmd_sweep(const std::string& sweep_path, const std::string& out_dir, std::optional<int> jobs) {
  SweepSpec spec;
  try {
    spec = load_sweep_spec(sweep_path);
    expand_sweep(spec);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  }
  const int n = jobs ? *jobs : jobs_from_env(spec.jobs);
  const auto report = run_sweep(spec, out_dir, n);
  std::cout << report.cells << " cells: " << report.ran << " ran, " << report.skipped << " already present, "
            << report.failures.size() << " failed\n\n";
  write_summary_table(report.rows, std::cout);
  for (const auto& f : report.failures) std::cerr << f << '\n';
  return report.failures.empty() ? 0 : 1;
}

int cmd_gate_table(double alpha, const std::string& tau_cut, int lo, int hi, const std::string& csv) {
  StalenessGate gate{alpha, 0.0};
  if (tau_cut == "inf" || tau_cut == "infinity") {
    gate.tau_cut = kNoCutoff;
  } else {
    try {
      gate.tau_cut = std::stod(tau_cut);
    } catch (const std::exception&) {
      std::cerr << "--tau-cut: expected a number or inf\n";
      return 2;
    }
  }
  std::vector<GateRow> rows;
  try {
    rows = gate_table(gate, lo, hi);
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return 2;
  }
  write_gate_table(rows, gate, std::cout);
  if (!csv.empty()) {
    std::ofstream out(csv);
    if (!out) {
      std::cerr << "cannot write " << csv << '\n';
      return 1;
    }
    write_gate_csv(rows, gate, out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Controlled-delay simulator for staleness-aware outer optimizers"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "results";
  std::optional<std::uint64_t> seed_override;
  auto* run = app.add_subcommand("run", "Run one configuration and write its result JSON");
  run->add_option("--config", config_path, "Run config JSON")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out_dir, "Output directory");
  run->add_option("--seed-override", seed_override, "Replace the config's master seed");

  std::string sweep_path;
  std::string sweep_out = "sweep";
  std::optional<int> jobs;
  auto* sweep = app.add_subcommand("sweep", "Run a sweep (resumable) and summarize it");
  sweep->add_option("--sweep", sweep_path, "Sweep spec JSON")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", sweep_out, "Output directory");
  sweep->add_option("--jobs", jobs, "Concurrent cells (default: STALE_LAB_JOBS or the spec)")
      ->check(CLI::PositiveNumber);

  double alpha = 0.2;
  std::string tau_cut = "32";
  int tau_lo = 0;
  int tau_hi = 40;
  std::string csv;
  auto* gate = app.add_subcommand("gate-table", "Tabulate gamma, decay, sigma and tau*sigma");
  gate->add_option("--alpha", alpha, "Decay rate per round");
  gate->add_option("--tau-cut", tau_cut, "Cutoff in rounds, or inf");
  gate->add_option("--tau-min", tau_lo, "First tau");
  gate->add_option("--tau-max", tau_hi, "Last tau");
  gate->add_option("--csv", csv, "Also write CSV here");

  auto* verify = app.add_subcommand("verify", "Run the property suite");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config_path, out_dir, seed_override);
    if (*sweep) return cmd_sweep(sweep_path, sweep_out, jobs);
    if (*gate) return cmd_gate_table(alpha, tau_cut, tau_lo, tau_hi, csv);
    if (*verify) return print_report(run_verify_suite(), std::cout) ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
