#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "stale_lab/config.hpp"
#include "stale_lab/simulator.hpp"
#include "stale_lab/theory.hpp"

namespace stale_lab {

inline constexpr int kResultSchemaVersion = 1;

/// A finished run: the simulator result, its theory audit, and the JSON
/// document written to disk.
struct RunOutcome {
  RunConfig config;
  RunResult result;
  AuditReport audit;
  std::optional<RateBoundCheck> rate_bound;
  nlohmann::json document;
};

RunOutcome execute_run(const RunConfig& cfg);

nlohmann::json theory_to_json(const AuditReport& audit, const std::optional<RateBoundCheck>& rate);
nlohmann::json result_document(const RunConfig& cfg, const RunResult& result,
                               const AuditReport& audit,
                               const std::optional<RateBoundCheck>& rate);

/// "<config hash>_s<seed>.json"
std::string result_filename(const RunConfig& cfg);
/// Pretty-printed document with a trailing newline; same bytes for the same
/// outcome.
std::string serialize_document(const nlohmann::json& document);
std::filesystem::path write_result(const RunOutcome& outcome, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Sweeps

struct SweepGrid {
  std::vector<double> alpha;
  std::vector<double> tau_cut;
  std::vector<double> eta;
  std::vector<double> mu;
  std::vector<GatePlacement> gate_placement;
  std::vector<std::size_t> fragment_budget;
};

struct SweepSpec {
  std::string name = "sweep";
  /// Shared settings; method, seed and the outer config are filled per cell.
  RunConfig base{};
  /// Outer settings applied to every method, then per-method overrides.
  nlohmann::json base_outer = nlohmann::json::object();
  nlohmann::json method_overrides = nlohmann::json::object();
  std::vector<Method> methods;
  std::vector<DelaySchedule> delays;
  std::vector<std::uint64_t> seeds;
  SweepGrid grid;
  int jobs = 1;
};

struct SweepCell {
  std::size_t index = 0;
  RunConfig config;
  std::string method;
  std::string schedule;
  /// Grid coordinates, e.g. "alpha=0.1 placement=after"; empty without a grid.
  std::string variant;
};

SweepSpec sweep_spec_from_json(const nlohmann::json& j);
SweepSpec load_sweep_spec(const std::string& path);

/// Cross product methods x delays x grid x seeds. Every cell config is
/// validated before any is returned; failures throw ConfigError with the
/// cell index in each message.
std::vector<SweepCell> expand_sweep(const SweepSpec& spec);

struct SummaryRow {
  std::string method;
  std::string schedule;
  std::string variant;
  std::size_t expected = 0;
  std::size_t completed = 0;
  std::size_t diverged = 0;
  /// Over cells with a finite final loss.
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t finite = 0;
};

/// Sample mean and (n - 1) standard deviation; std is 0 for n < 2.
std::pair<double, double> mean_and_std(const std::vector<double>& xs);

/// Groups stored per-cell result files by (method, schedule, variant). Reads
/// only what is on disk; cells without a result count as missing.
std::vector<SummaryRow> summarize(const std::vector<SweepCell>& cells,
                                  const std::filesystem::path& dir);

void write_summary_csv(const std::vector<SummaryRow>& rows, std::ostream& out);
void write_summary_table(const std::vector<SummaryRow>& rows, std::ostream& out);

struct SweepReport {
  std::size_t cells = 0;
  std::size_t ran = 0;
  std::size_t skipped = 0;
  std::vector<std::string> failures;
  std::vector<SummaryRow> rows;
};

/// Runs every cell without a result file, up to `jobs` at a time, then writes
/// summary.csv and summary.txt into `dir`.
SweepReport run_sweep(const SweepSpec& spec, const std::filesystem::path& dir, int jobs);

/// Parallelism from STALE_LAB_JOBS, or `fallback` when unset or invalid.
int jobs_from_env(int fallback);

// ---------------------------------------------------------------------------
// Gate table

struct GateRow {
  int tau = 0;
  double gamma = 0.0;
  double decay = 0.0;
  double sigma = 0.0;
  double tau_sigma = 0.0;
  double running_max = 0.0;
};

std::vector<GateRow> gate_table(const StalenessGate& gate, int tau_lo, int tau_hi);
void write_gate_table(const std::vector<GateRow>& rows, const StalenessGate& gate, std::ostream& out);
void write_gate_csv(const std::vector<GateRow>& rows, const StalenessGate& gate, std::ostream& out);

}  // namespace stale_lab
