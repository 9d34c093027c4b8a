#include "stale_lab/gate.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace stale_lab {

namespace {

void check_tau(double tau) {
  if (!(tau >= 0.0)) {
    throw std::domain_error("staleness must be a nonnegative number of rounds, got " +
                            std::to_string(tau));
  }
}

void check_cutoff(double tau_cut) {
  if (!(tau_cut > 0.0)) {
    throw std::domain_error("tau_cut must be positive or kNoCutoff, got " +
                            std::to_string(tau_cut));
  }
}

}  // namespace

void StalenessGate::validate() const {
  if (!(alpha >= 0.0) || std::isinf(alpha)) {
    throw std::domain_error("gate alpha must be finite and >= 0, got " + std::to_string(alpha));
  }
  check_cutoff(tau_cut);
}

double StalenessGate::evaluate(double tau) const { return staleness_weight(tau, *this); }

double cosine_gate(double tau, double tau_cut) {
  check_tau(tau);
  check_cutoff(tau_cut);
  if (tau_cut == kNoCutoff) return 1.0;
  if (tau >= tau_cut) return 0.0;
  // Upper half uses sin^2 of the distance to the cutoff so the value cannot
  // round to zero before tau_cut is actually reached.
  if (2.0 * tau <= tau_cut) {
    return 0.5 * (1.0 + std::cos(std::numbers::pi * tau / tau_cut));
  }
  const double s = std::sin(0.5 * std::numbers::pi * (tau_cut - tau) / tau_cut);
  return s * s;
}

double exponential_decay(double tau, double alpha) {
  check_tau(tau);
  return std::exp(-alpha * tau);
}

double staleness_weight(double tau, const StalenessGate& gate) {
  const double gamma = cosine_gate(tau, gate.tau_cut);
  if (gamma == 0.0) return 0.0;
  return gamma * exponential_decay(tau, gate.alpha);
}

double effective_age(double tau, double fragment_age) {
  check_tau(tau);
  check_tau(fragment_age);
  return std::max(tau, fragment_age);
}

}  // namespace stale_lab
