#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <tuple>
#include <utility>
#include <vector>

#include "stale_lab/config.hpp"
#include "stale_lab/objective.hpp"
#include "stale_lab/optim.hpp"

namespace stale_lab {

// ---------------------------------------------------------------------------
// Delays

/// Deterministic in (schedule.seed, worker, round). Exponential draws are
/// rounded half away from zero, then clipped to [0, tau_max].
int sample_delay(const DelaySchedule& schedule, int worker, std::int64_t round);

/// Rounded (unclipped) delay for an exponential draw u in [0, 1).
int exponential_delay_from_uniform(double u, double rate);

// ---------------------------------------------------------------------------
// Fragments

/// Contiguous slices of the parameter vector plus rounds-since-last-sync.
struct FragmentPartition {
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  std::vector<int> ages;

  /// `count` nearly equal contiguous slices covering [0, dim).
  static FragmentPartition even(std::size_t dim, std::size_t count);

  std::size_t size() const { return ranges.size(); }
  std::size_t length(std::size_t f) const { return ranges[f].second - ranges[f].first; }
};

/// Oldest-first, ties broken by fragment id. Returns `budget` ids, sorted.
std::vector<std::size_t> select_fragments(const FragmentPartition& partition, std::size_t budget,
                                          std::int64_t round);

/// Selected fragments reset to age 0, the rest age by one round.
void advance_ages(FragmentPartition& partition, std::span<const std::size_t> selected);

// ---------------------------------------------------------------------------
// Queue payloads

/// Symmetric int8 codes with one scale per fragment (scale = max_abs / 127).
struct QuantizedPayload {
  std::vector<std::int8_t> codes;
  std::vector<double> max_abs;

  double scale(std::size_t f) const { return max_abs[f] / 127.0; }
};

QuantizedPayload quantize_payload(std::span<const double> values,
                                  const FragmentPartition& partition);
std::vector<double> dequantize_payload(const QuantizedPayload& payload,
                                       const FragmentPartition& partition);

struct QueueEntry {
  int worker = 0;
  std::int64_t produced_round = 0;
  int tau = 0;
  std::int64_t available_round = 0;
  std::vector<double> raw;
  std::optional<QuantizedPayload> quantized;

  std::vector<double> payload(const FragmentPartition& partition) const;
};

/// In-flight pseudo-gradients. Entries come out in (available_round,
/// worker, produced_round) order regardless of push order.
class DelayQueue {
 public:
  void push(QueueEntry entry);
  std::vector<QueueEntry> pop_available(std::int64_t round);
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::tuple<std::int64_t, int, std::int64_t>, QueueEntry> entries_;
};

// ---------------------------------------------------------------------------
// Workers

struct WorkerState {
  std::vector<double> params;
  AdamMoments inner;
  Shard shard;
};

struct InnerPhaseResult {
  std::vector<double> delta;
  bool finite = true;
};

/// Copies `global_snapshot`, runs H inner AdamW steps from a fresh inner
/// state, and returns snapshot - worker params.
InnerPhaseResult run_inner_phase(const Objective& obj, WorkerState& worker,
                                 std::span<const double> global_snapshot, int inner_steps,
                                 std::int64_t round, const InnerConfig& inner);

// ---------------------------------------------------------------------------
// Runs

/// One outer-optimizer application of (part of) a queue entry.
struct StepRecord {
  std::int64_t round = 0;
  int worker = 0;
  std::size_t fragment = 0;
  int tau = 0;
  /// Age fed to the gate (tau, or max(tau, a_f) for pa_cgad).
  double age = 0.0;
  double sigma = 1.0;
  bool applied = true;
  double eta = 0.0;
  bool adam_kernel = false;
  double step_inf_norm = 0.0;
  double param_inf_norm = 0.0;
  double ratio_max = 0.0;
  /// ||grad F(theta)||^2 of the population objective before the step; NaN
  /// when the objective has no exact gradient.
  double grad_norm_sq = 0.0;
  double pseudo_grad_norm_sq = 0.0;
};

struct RoundMetrics {
  std::int64_t round = 0;
  double eval_loss = 0.0;
  std::size_t consumed = 0;
  std::size_t dropped = 0;
};

struct RunTrace {
  std::vector<StepRecord> steps;
  std::vector<RoundMetrics> rounds;
};

struct RunResult {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<double> losses;
  double initial_loss = 0.0;
  /// Mean loss at initialization over 32 seeds; the divergence reference.
  double reference_loss = 0.0;
  double final_loss = 0.0;
  bool diverged = false;
  std::int64_t rounds_completed = 0;
  std::size_t consumed_entries = 0;
  std::size_t applied_updates = 0;
  std::size_t dropped_updates = 0;
  std::size_t in_flight_at_end = 0;
  double sigma_bar = 1.0;
  double rho_max = 0.0;
  double rho_le_1_fraction = 1.0;
  double mean_fragment_wait = 0.0;
  std::vector<double> final_params;
  RunTrace trace;
};

/// Hooks for tests; production runs use the defaults.
struct SimulationOptions {
  /// Order in which workers run their inner phase each round. Empty means
  /// 0..K-1.
  std::vector<int> worker_order;
  bool record_trace = true;
};

/// Number of initialization seeds averaged into RunResult::reference_loss.
inline constexpr int kReferenceSeeds = 32;
/// A run is diverged if its final loss exceeds this multiple of the
/// reference loss, or any loss is non-finite.
inline constexpr double kDivergenceFactor = 5.0;
/// Final loss averages this many trailing eval losses.
inline constexpr std::size_t kFinalLossWindow = 5;

/// Stateful driver of the protocol; run_experiment wraps it. Single
/// threaded and deterministic.
class Simulation {
 public:
  explicit Simulation(const RunConfig& cfg, SimulationOptions options = {});

  /// One outer round: every worker produces a pseudo-gradient and enqueues it
  /// with a sampled delay, entries due this round are applied in queue
  /// order, fragment ages advance, and the global model is evaluated.
  /// Returns false once the global model is no longer finite.
  bool run_outer_round();

  std::int64_t round() const { return round_; }
  std::span<const double> global() const { return global_; }
  const FragmentPartition& partition() const { return partition_; }
  const DelayQueue& queue() const { return queue_; }
  const std::vector<OuterOptimizer>& optimizers() const { return optimizers_; }
  const RunTrace& trace() const { return trace_; }
  const Objective& objective() const { return objective_; }

  /// Summarizes the rounds run so far.
  RunResult result() const;

 private:
  void apply_entry(const QueueEntry& entry, std::span<const std::size_t> selected,
                   std::vector<double>& round_sum, std::size_t& round_count);

  RunConfig cfg_;
  SimulationOptions options_;
  Objective objective_;
  Batch eval_batch_;
  double reference_loss_ = 0.0;
  double initial_loss_ = 0.0;
  std::vector<double> global_;
  std::vector<WorkerState> workers_;
  std::vector<OuterOptimizer> optimizers_;
  FragmentPartition partition_;
  DelayQueue queue_;
  RunTrace trace_;
  std::vector<double> losses_;
  std::int64_t round_ = 0;
  bool finite_ = true;
  std::size_t consumed_ = 0;
  std::size_t applied_ = 0;
  std::size_t dropped_ = 0;
  double wait_sum_ = 0.0;
  std::size_t wait_count_ = 0;
  double sigma_mean_ = 0.0;
  std::size_t sigma_count_ = 0;
  double rho_max_ = 0.0;
  std::size_t rho_le_1_ = 0;
  std::size_t rho_count_ = 0;
  // Eager mixing history: last applied pseudo-gradient per worker and the
  // mean of the previous round's applied pseudo-gradients.
  std::vector<std::optional<std::vector<double>>> eager_prev_own_;
  std::optional<std::vector<double>> eager_prev_avg_;
};

/// Executes `cfg.rounds` outer rounds of the controlled-delay protocol.
/// Throws ConfigError for invalid configs.
RunResult run_experiment(const RunConfig& cfg, const SimulationOptions& options = {});

/// Held-out evaluation batch for a run seed.
Batch evaluation_batch(const Objective& obj, std::uint64_t seed, std::size_t size);

double reference_loss(const Objective& obj, const Batch& eval, std::uint64_t seed);

}  // namespace stale_lab
