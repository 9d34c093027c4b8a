#pragma once

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "stale_lab/optim.hpp"

namespace stale_lab {

struct PropertyResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

using GateFn = std::function<double(double tau)>;
using AdamStepFn = std::function<StepReport(std::span<double>, std::span<const double>, double,
                                            AdamMoments&, const OuterConfig&)>;

/// sigma(0) = 1, sigma = 0 from tau_cut on, and nonincreasing on a grid
/// {0, step, ..., 2 tau_cut} up to 1e-15.
PropertyResult check_gate_shape(const GateFn& sigma, double tau_cut, double step = 1e-2);

/// Grid max of tau sigma(tau) <= 1/(e alpha) + 1e-12 for each alpha, with
/// the given cutoff.
PropertyResult check_tau_sigma_bound(const std::vector<double>& alphas, double tau_cut);

/// `steps` gated steps at tau = 0 against an independent plain-Adam loop;
/// parameters and moments must match bit for bit.
PropertyResult check_adam_equivalence(const AdamStepFn& step, int steps = 100);

/// A dropped update followed by fresh ones must equal the same stream with
/// the dropped gradient removed.
PropertyResult check_drop_totality(const AdamStepFn& step, int steps = 50);

PropertyResult check_quantization_round_trip(int trials = 10000);
PropertyResult check_finite_differences();
PropertyResult check_determinism();
PropertyResult check_step_bound_short_run();
PropertyResult check_partial_sync_reduction();
PropertyResult check_adam_decay_reduction();

/// Everything above with production step functions.
std::vector<PropertyResult> run_verify_suite();

/// One line per property; returns true iff all passed.
bool print_report(const std::vector<PropertyResult>& results, std::ostream& out);

}  // namespace stale_lab
