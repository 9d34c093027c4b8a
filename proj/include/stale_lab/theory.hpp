#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stale_lab/gate.hpp"
#include "stale_lab/simulator.hpp"

namespace stale_lab {

/// 1 / (e alpha): the maximum of tau exp(-alpha tau) over tau >= 0.
double tau_decay_peak(double alpha);

struct TauSigmaMax {
  double argmax = 0.0;
  double value = 0.0;
};

/// Grid search of tau * sigma(tau) over [0, max(2 tau_cut, 4 / alpha)] with
/// the given step. The upper end drops whichever term is infinite; a gate
/// with neither a cutoff nor decay has no maximum and is rejected.
TauSigmaMax max_tau_sigma(const StalenessGate& gate, double grid_step = 1e-4);

/// Quantities entering the rate bound for the idealized gated update.
struct TheoryInputs {
  double smoothness = 1.0;     // L
  double grad_bound = 1.0;     // G
  double noise_bound = 1.0;    // sigma^2
  double step_constant = 1.0;  // c, with eta = c / sqrt(T)
  std::int64_t horizon = 1;    // T
  double initial_gap = 1.0;    // F(theta_0) - F*

  std::vector<std::string> validate() const;
};

struct BoundTerms {
  double optimization = 0.0;  // F_gap / (c sqrt T)
  double noise = 0.0;         // L c sigma^2 / (2 sqrt T)
  double staleness = 0.0;     // L c G / (e alpha sqrt T)

  double total() const { return optimization + noise + staleness; }
};

BoundTerms bound_terms(const TheoryInputs& inputs, double alpha);

struct AuditReport {
  std::size_t steps = 0;
  std::size_t step_bound_checked = 0;
  std::size_t step_bound_violations = 0;
  /// Largest (step - eta sigma rho) / (eta sigma rho) seen; <= 0 means tight.
  double step_bound_worst_excess = 0.0;
  /// Fraction of applied Adam-kernel steps whose normalized ratio was <= 1.
  double rho_le_1_fraction = 1.0;
  double rho_max = 0.0;
  /// (1/T) sum_t sigma_t.
  double sigma_bar = 1.0;
  /// (1/T) sum_t sigma_t ||grad F(theta_t)||^2; absent without exact
  /// gradients.
  std::optional<double> weighted_grad_norm_avg;
  /// max_t ||grad F(theta_t)|| over the trace (estimate of G).
  std::optional<double> grad_bound_estimate;
  /// mean ||Delta_t||^2 over the trace (estimate of sigma^2).
  double noise_bound_estimate = 0.0;
  /// Steps whose recorded sigma disagrees with the gate (only when a gate
  /// is supplied).
  std::size_t sigma_mismatches = 0;
};

/// Relative tolerance for the per-step magnitude inequality.
inline constexpr double kStepBoundRelTol = 1e-12;

/// Checks ||dtheta||_inf <= eta sigma rho at every applied Adam-kernel step.
/// The realized step is a difference of stored parameters, so it may exceed
/// the exact increment by the rounding of one parameter write; that
/// allowance (one ulp of ||theta||_inf) is added to the relative tolerance.
AuditReport audit_run(std::span<const StepRecord> steps,
                      const std::optional<StalenessGate>& gate = std::nullopt,
                      double relative_tol = kStepBoundRelTol);

/// Weighted gradient average of a quadratic run against the rate bound built
/// from its exact L and F_gap and measured G and sigma^2.
struct RateBoundCheck {
  TheoryInputs inputs;
  BoundTerms terms;
  double lhs = 0.0;
  bool holds = false;
};

std::optional<RateBoundCheck> rate_bound_check(const AuditReport& audit, const Objective& obj,
                                               double initial_loss, double eta, double alpha);

}  // namespace stale_lab
