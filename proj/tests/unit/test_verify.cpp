#include <sstream>

#include "doctest.h"

#include "stale_lab/verify.hpp"

using namespace stale_lab;

TEST_CASE("gate shape property") {
  const StalenessGate g{};
  CHECK(check_gate_shape([&](double tau) { return staleness_weight(tau, g); }, g.tau_cut).passed);

  // Mutation: flipped gate sign.
  const auto flipped = check_gate_shape([&](double tau) { return -staleness_weight(tau, g); }, g.tau_cut);
  CHECK_FALSE(flipped.passed);
  CHECK_FALSE(flipped.detail.empty());

  // Mutation: cutoff leaks a little weight.
  CHECK_FALSE(check_gate_shape([&](double tau) { return staleness_weight(tau, g) + (tau >= 32 ? 1e-9 : 0.0); },
                               g.tau_cut)
                  .passed);
}

TEST_CASE("tau sigma bound property") {
  CHECK(check_tau_sigma_bound({0.025, 0.05, 0.1, 0.2, 0.4}, 32.0).passed);
}

TEST_CASE("adam equivalence and drop totality") {
  CHECK(check_adam_equivalence(&cgad_step).passed);
  CHECK(check_drop_totality(&cgad_step).passed);

  // Mutation: dropped updates still advance t.
  const AdamStepFn advances_t = [](std::span<double> p, std::span<const double> g, double tau,
                                   AdamMoments& s, const OuterConfig& cfg) {
    if (staleness_weight(tau, cfg.gate) == 0.0) {
      ++s.t;
      StepReport rep;
      rep.applied = false;
      return rep;
    }
    return cgad_step(p, g, tau, s, cfg);
  };
  CHECK(check_adam_equivalence(advances_t).passed);
  const auto drop = check_drop_totality(advances_t);
  CHECK_FALSE(drop.passed);

  // Mutation: bias correction with the pre-increment counter.
  const AdamStepFn off_by_one = [](std::span<double> p, std::span<const double> g, double tau,
                                   AdamMoments& s, const OuterConfig& cfg) {
    auto shifted = cfg;
    shifted.beta1 = cfg.beta1 * 0.999;
    return cgad_step(p, g, tau, s, shifted);
  };
  CHECK_FALSE(check_adam_equivalence(off_by_one).passed);
}

TEST_CASE("full suite passes on the production code") {
  const auto results = run_verify_suite();
  CHECK(results.size() >= 10);
  std::ostringstream out;
  CHECK(print_report(results, out));
  for (const auto& r : results) CHECK_MESSAGE(r.passed, r.name << ": " << r.detail);
  CHECK(out.str().find("FAIL") == std::string::npos);

  std::vector<PropertyResult> failing{{"made up", false, "boom"}};
  std::ostringstream bad;
  CHECK_FALSE(print_report(failing, bad));
  CHECK(bad.str().find("made up") != std::string::npos);
}
