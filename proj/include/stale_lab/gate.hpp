#pragma once

#include <limits>

namespace stale_lab {

/// Sentinel for a gate without a cosine cutoff (exponential decay only).
inline constexpr double kNoCutoff = std::numeric_limits<double>::infinity();

/// Staleness gate sigma(tau) = gamma(tau) * exp(-alpha * tau), where gamma is
/// the cosine cutoff that reaches zero at tau_cut and stays there.
///
/// Delays are real-valued rounds. alpha = 0 with no cutoff is the identity
/// gate (sigma = 1 everywhere).
struct StalenessGate {
  double alpha = 0.2;
  double tau_cut = 32.0;

  static StalenessGate identity() { return {0.0, kNoCutoff}; }
  static StalenessGate exponential_only(double alpha) { return {alpha, kNoCutoff}; }

  bool has_cutoff() const { return tau_cut != kNoCutoff; }

  /// Throws std::domain_error if alpha < 0 or tau_cut is not positive.
  void validate() const;

  double evaluate(double tau) const;
};

/// 1/2 (1 + cos(pi tau / tau_cut)) for tau < tau_cut, exactly 0 beyond.
/// Returns 1 for every tau when tau_cut is kNoCutoff.
double cosine_gate(double tau, double tau_cut);

/// exp(-alpha * tau).
double exponential_decay(double tau, double alpha);

double staleness_weight(double tau, const StalenessGate& gate);

/// Age used by per-fragment gating: the larger of the transport delay and
/// the rounds since the fragment was last synchronized.
double effective_age(double tau, double fragment_age);

}  // namespace stale_lab
