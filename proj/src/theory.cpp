#include "stale_lab/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace stale_lab {

double tau_decay_peak(double alpha) {
  if (!(alpha > 0.0)) throw std::domain_error("alpha must be > 0");
  return 1.0 / (std::numbers::e * alpha);
}

TauSigmaMax max_tau_sigma(const StalenessGate& gate, double grid_step) {
  gate.validate();
  if (!(grid_step > 0.0)) throw std::invalid_argument("grid step must be > 0");
  double upper = 0.0;
  if (gate.has_cutoff()) upper = 2.0 * gate.tau_cut;
  if (gate.alpha > 0.0) upper = std::max(upper, 4.0 / gate.alpha);
  if (upper == 0.0) throw std::invalid_argument("tau * sigma(tau) is unbounded for the identity gate");

  TauSigmaMax best;
  const auto n = static_cast<std::int64_t>(std::floor(upper / grid_step));
  for (std::int64_t i = 0; i <= n; ++i) {
    const double tau = static_cast<double>(i) * grid_step;
    const double v = tau * staleness_weight(tau, gate);
    if (v > best.value) best = {tau, v};
  }
  return best;
}

std::vector<std::string> TheoryInputs::validate() const {
  std::vector<std::string> errors;
  auto positive = [&](double x, const char* name) {
    if (!(x > 0.0) || !std::isfinite(x)) errors.push_back(std::string(name) + ": must be > 0");
  };
  positive(smoothness, "smoothness");
  positive(grad_bound, "grad_bound");
  positive(noise_bound, "noise_bound");
  positive(step_constant, "step_constant");
  positive(initial_gap, "initial_gap");
  if (horizon < 1) errors.push_back("horizon: must be >= 1");
  return errors;
}

BoundTerms bound_terms(const TheoryInputs& in, double alpha) {
  if (const auto errors = in.validate(); !errors.empty()) {
    throw std::invalid_argument("invalid theory inputs: " + errors.front());
  }
  if (!(alpha > 0.0)) throw std::domain_error("alpha must be > 0");
  const double root_t = std::sqrt(static_cast<double>(in.horizon));
  BoundTerms t;
  t.optimization = in.initial_gap / (in.step_constant * root_t);
  t.noise = in.smoothness * in.step_constant * in.noise_bound / (2.0 * root_t);
  t.staleness = in.smoothness * in.step_constant * in.grad_bound / (std::numbers::e * alpha * root_t);
  return t;
}

AuditReport audit_run(std::span<const StepRecord> steps, const std::optional<StalenessGate>& gate,
                      double relative_tol) {
  AuditReport rep;
  rep.steps = steps.size();
  // Running mean, so a trace of identical gates averages to exactly that gate.
  double sigma_mean = 0.0;
  std::size_t seen = 0;
  double weighted = 0.0;
  bool exact_grads = !steps.empty();
  double grad_max = 0.0;
  double noise_sum = 0.0;
  std::size_t rho_le_1 = 0;
  std::size_t rho_count = 0;

  for (const auto& s : steps) {
    sigma_mean += (s.sigma - sigma_mean) / static_cast<double>(++seen);
    noise_sum += s.pseudo_grad_norm_sq;
    if (std::isfinite(s.grad_norm_sq)) {
      weighted += s.sigma * s.grad_norm_sq;
      grad_max = std::max(grad_max, std::sqrt(s.grad_norm_sq));
    } else {
      exact_grads = false;
    }
    if (gate && s.adam_kernel && staleness_weight(s.age, *gate) != s.sigma) ++rep.sigma_mismatches;
    if (!s.adam_kernel || !s.applied) continue;

    ++rho_count;
    if (s.ratio_max <= 1.0) ++rho_le_1;
    rep.rho_max = std::max(rep.rho_max, s.ratio_max);

    const double bound = s.eta * s.sigma * s.ratio_max;
    const double allowance = bound * relative_tol +
                             (std::nextafter(s.param_inf_norm, std::numeric_limits<double>::infinity()) -
                              s.param_inf_norm);
    ++rep.step_bound_checked;
    if (!(s.step_inf_norm <= bound + allowance)) ++rep.step_bound_violations;
    if (bound > 0.0) {
      rep.step_bound_worst_excess = std::max(rep.step_bound_worst_excess, (s.step_inf_norm - bound) / bound);
    }
  }

  if (!steps.empty()) {
    const auto n = static_cast<double>(steps.size());
    rep.sigma_bar = sigma_mean;
    rep.noise_bound_estimate = noise_sum / n;
    if (exact_grads) {
      rep.weighted_grad_norm_avg = weighted / n;
      rep.grad_bound_estimate = grad_max;
    }
  }
  if (rho_count > 0) rep.rho_le_1_fraction = static_cast<double>(rho_le_1) / static_cast<double>(rho_count);
  return rep;
}

std::optional<RateBoundCheck> rate_bound_check(const AuditReport& audit, const Objective& obj,
                                               double initial_loss, double eta, double alpha) {
  const auto smooth = obj.smoothness();
  const auto optimum = obj.optimal_loss();
  if (!smooth || !optimum || !audit.weighted_grad_norm_avg || !audit.grad_bound_estimate) {
    return std::nullopt;
  }
  if (audit.steps == 0 || !(alpha > 0.0)) return std::nullopt;
  RateBoundCheck check;
  check.inputs.smoothness = *smooth;
  check.inputs.grad_bound = std::max(*audit.grad_bound_estimate, std::numeric_limits<double>::min());
  check.inputs.noise_bound = std::max(audit.noise_bound_estimate, std::numeric_limits<double>::min());
  check.inputs.horizon = static_cast<std::int64_t>(audit.steps);
  check.inputs.step_constant = eta * std::sqrt(static_cast<double>(audit.steps));
  check.inputs.initial_gap = std::max(initial_loss - *optimum, std::numeric_limits<double>::min());
  check.terms = bound_terms(check.inputs, alpha);
  check.lhs = *audit.weighted_grad_norm_avg;
  check.holds = check.lhs <= check.terms.total();
  return check;
}

}  // namespace stale_lab
