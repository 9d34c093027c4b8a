#include "stale_lab/verify.hpp"

#include <cmath>
#include <numbers>
#include <ostream>
#include <sstream>

#include "stale_lab/harness.hpp"
#include "stale_lab/objective.hpp"
#include "stale_lab/seeding.hpp"
#include "stale_lab/simulator.hpp"
#include "stale_lab/theory.hpp"

namespace stale_lab {

namespace {

PropertyResult pass(std::string name, std::string detail = {}) {
  return {std::move(name), true, std::move(detail)};
}

PropertyResult fail(std::string name, std::string detail) {
  return {std::move(name), false, std::move(detail)};
}

std::vector<std::vector<double>> random_stream(std::uint64_t seed, int steps, std::size_t dim) {
  Rng rng(seed);
  std::vector<std::vector<double>> out(static_cast<std::size_t>(steps), std::vector<double>(dim));
  for (auto& g : out) {
    for (auto& x : g) x = rng.normal() * std::exp(2.0 * rng.normal());
  }
  return out;
}

RunConfig small_quadratic(Method method) {
  RunConfig cfg;
  cfg.objective.kind = ObjectiveKind::quadratic;
  cfg.objective.dim = 8;
  cfg.objective.noise_std = 0.1;
  cfg.objective.batch_size = 4;
  cfg.workers = 2;
  cfg.inner_steps = 2;
  cfg.rounds = 30;
  cfg.outer = OuterConfig::defaults(method);
  cfg.delay = DelaySchedule::fixed(2);
  return cfg;
}

}  // namespace

PropertyResult check_gate_shape(const GateFn& sigma, double tau_cut, double step) {
  const std::string name = "gate shape (tau_cut=" + std::to_string(tau_cut) + ")";
  if (sigma(0.0) != 1.0) return fail(name, "sigma(0) != 1");
  const auto n = static_cast<long>(std::llround(2.0 * tau_cut / step));
  double prev = sigma(0.0);
  for (long i = 1; i <= n; ++i) {
    const double tau = static_cast<double>(i) * step;
    const double s = sigma(tau);
    if (!(s >= 0.0 && s <= 1.0)) {
      std::ostringstream os;
      os << "sigma(" << tau << ") = " << s << " outside [0, 1]";
      return fail(name, os.str());
    }
    if (s > prev + 1e-15) {
      std::ostringstream os;
      os << "not monotone: sigma(" << tau << ") = " << s << " > " << prev;
      return fail(name, os.str());
    }
    if (tau >= tau_cut && s != 0.0) {
      std::ostringstream os;
      os << "sigma(" << tau << ") = " << s << " beyond the cutoff";
      return fail(name, os.str());
    }
    prev = s;
  }
  if (sigma(tau_cut) != 0.0) return fail(name, "sigma(tau_cut) != 0");
  return pass(name);
}

PropertyResult check_tau_sigma_bound(const std::vector<double>& alphas, double tau_cut) {
  const std::string name = "tau*sigma <= 1/(e alpha)";
  std::ostringstream detail;
  for (double alpha : alphas) {
    const auto best = max_tau_sigma({alpha, tau_cut}, 1e-4);
    const double bound = tau_decay_peak(alpha);
    detail << "alpha=" << alpha << ": " << best.value << " <= " << bound << "; ";
    if (!(best.value <= bound + 1e-12)) return fail(name, detail.str());
  }
  return pass(name, detail.str());
}

PropertyResult check_adam_equivalence(const AdamStepFn& step, int steps) {
  const std::string name = "gated step at tau=0 equals plain Adam";
  constexpr std::size_t dim = 6;
  const auto stream = random_stream(11, steps, dim);
  OuterConfig cfg = OuterConfig::defaults(Method::cgad);

  std::vector<double> gated(dim, 0.5);
  AdamMoments gated_state(dim);
  std::vector<double> plain(dim, 0.5);
  std::vector<double> m(dim, 0.0), v(dim, 0.0);
  for (int k = 0; k < steps; ++k) {
    step(gated, stream[k], 0.0, gated_state, cfg);
    const double t = k + 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < dim; ++i) {
      const double g = stream[k][i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      plain[i] -= cfg.eta * ((m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.epsilon));
    }
  }
  if (gated != plain) return fail(name, "parameters differ");
  if (gated_state.m != m || gated_state.v != v) return fail(name, "moments differ");
  if (gated_state.t != steps) return fail(name, "step counter " + std::to_string(gated_state.t));
  return pass(name, std::to_string(steps) + " steps bit-identical");
}

PropertyResult check_drop_totality(const AdamStepFn& step, int steps) {
  const std::string name = "dropped update leaves no trace";
  constexpr std::size_t dim = 5;
  const auto stream = random_stream(23, steps + 1, dim);
  OuterConfig cfg = OuterConfig::defaults(Method::cgad);
  const int drop_at = steps / 2;

  std::vector<double> with_drop(dim, -0.25);
  AdamMoments a(dim);
  std::vector<double> without(dim, -0.25);
  AdamMoments b(dim);
  for (int k = 0; k <= steps; ++k) {
    if (k == drop_at) {
      const auto before = with_drop;
      const auto state_before = a;
      step(with_drop, stream[k], cfg.gate.tau_cut + 1.0, a, cfg);
      if (with_drop != before || !(a == state_before)) {
        return fail(name, "drop at tau > tau_cut modified params or state");
      }
      continue;
    }
    step(with_drop, stream[k], 0.0, a, cfg);
    step(without, stream[k], 0.0, b, cfg);
  }
  if (with_drop != without || !(a == b)) {
    return fail(name, "stream with a dropped update diverges from the stream without it (t=" +
                          std::to_string(a.t) + " vs " + std::to_string(b.t) + ")");
  }
  return pass(name);
}

PropertyResult check_quantization_round_trip(int trials) {
  const std::string name = "int8 queue round trip";
  Rng rng(7);
  const auto partition = FragmentPartition::even(64, 4);
  double worst = 0.0;
  for (int k = 0; k < trials; ++k) {
    std::vector<double> x(64);
    const double scale = std::exp(3.0 * rng.normal());
    for (auto& v : x) v = scale * (2.0 * rng.uniform() - 1.0);
    const auto q = quantize_payload(x, partition);
    const auto y = dequantize_payload(q, partition);
    for (std::size_t f = 0; f < partition.size(); ++f) {
      const auto [lo, hi] = partition.ranges[f];
      const double bound = q.max_abs[f] / 254.0;
      const double slack = 4.0 * std::numeric_limits<double>::epsilon() * q.max_abs[f];
      for (std::size_t i = lo; i < hi; ++i) {
        const double err = std::abs(y[i] - x[i]);
        if (err > bound + slack) {
          std::ostringstream os;
          os << "error " << err << " exceeds scale/2 = " << bound;
          return fail(name, os.str());
        }
        if (std::abs(x[i]) == q.max_abs[f] && y[i] != x[i]) return fail(name, "endpoint not exact");
        worst = std::max(worst, bound > 0 ? err / bound : 0.0);
      }
    }
  }
  std::vector<double> zeros(64, 0.0);
  if (dequantize_payload(quantize_payload(zeros, partition), partition) != zeros) {
    return fail(name, "all-zero payload not exact");
  }
  std::ostringstream os;
  os << trials << " payloads, worst error " << worst << " x scale/2";
  return pass(name, os.str());
}

PropertyResult check_finite_differences() {
  const std::string name = "analytic gradients vs central differences";
  ObjectiveSpec quad;
  quad.kind = ObjectiveKind::quadratic;
  quad.dim = 12;
  quad.noise_std = 0.5;
  ObjectiveSpec mlp;
  mlp.kind = ObjectiveKind::mlp_regression;
  mlp.layers = {6, 10, 2};
  ObjectiveSpec rosen;
  rosen.kind = ObjectiveKind::rosenbrock_sum;
  rosen.dim = 6;
  rosen.init_scale = 0.5;

  std::ostringstream detail;
  for (const auto& [spec, tol] : {std::pair{quad, 1e-8}, std::pair{mlp, 1e-5}, std::pair{rosen, 1e-5}}) {
    const Objective obj(spec);
    Rng rng(derive_seed(3, "fd"));
    for (int k = 0; k < 5; ++k) {
      const auto params = obj.initial_params(static_cast<std::uint64_t>(k));
      const auto batch = obj.sample(rng, 8);
      const auto rep = finite_diff_check(obj, params, batch, tol);
      if (!rep.passed) {
        std::ostringstream os;
        os << to_string(spec.kind) << ": rel error " << rep.max_rel_error << " at " << rep.worst_index;
        return fail(name, os.str());
      }
    }
    detail << to_string(spec.kind) << " < " << tol << "; ";
  }
  return pass(name, detail.str());
}

PropertyResult check_determinism() {
  const std::string name = "same config, same bytes";
  RunConfig cfg = small_quadratic(Method::cgad);
  cfg.delay = DelaySchedule::uniform(0, 4);
  const auto a = serialize_document(execute_run(cfg).document);
  const auto b = serialize_document(execute_run(cfg).document);
  if (a != b) return fail(name, "two runs produced different result documents");
  return pass(name);
}

PropertyResult check_step_bound_short_run() {
  const std::string name = "step-magnitude audit";
  RunConfig cfg = small_quadratic(Method::cgad);
  cfg.delay = DelaySchedule::uniform(0, 40);
  const auto outcome = execute_run(cfg);
  std::ostringstream os;
  os << outcome.audit.step_bound_violations << " violations over " << outcome.audit.step_bound_checked
     << " steps; rho<=1 on " << outcome.audit.rho_le_1_fraction * 100.0 << "%";
  if (outcome.audit.step_bound_violations != 0 || outcome.audit.step_bound_checked == 0 ||
      outcome.audit.sigma_mismatches != 0) {
    return fail(name, os.str());
  }
  return pass(name, os.str());
}

PropertyResult check_partial_sync_reduction() {
  const std::string name = "pa_cgad with full budget equals cgad";
  RunConfig cgad = small_quadratic(Method::cgad);
  cgad.fragments = 4;
  RunConfig pa = cgad;
  pa.outer.method = Method::pa_cgad;
  const auto a = run_experiment(cgad);
  const auto b = run_experiment(pa);
  if (a.final_params != b.final_params || a.losses != b.losses) return fail(name, "trajectories differ");
  return pass(name);
}

PropertyResult check_adam_decay_reduction() {
  const std::string name = "cgad without cutoff equals adam_decay";
  RunConfig cgad = small_quadratic(Method::cgad);
  cgad.outer.gate.tau_cut = kNoCutoff;
  RunConfig decay = small_quadratic(Method::adam_decay);
  const auto a = run_experiment(cgad);
  const auto b = run_experiment(decay);
  if (a.final_params != b.final_params || a.losses != b.losses) return fail(name, "trajectories differ");
  return pass(name);
}

std::vector<PropertyResult> run_verify_suite() {
  std::vector<PropertyResult> results;
  const StalenessGate gate{};
  results.push_back(check_gate_shape([&](double t) { return staleness_weight(t, gate); }, gate.tau_cut));
  results.push_back(check_tau_sigma_bound({0.025, 0.05, 0.1, 0.2, 0.4}, 32.0));
  results.push_back(check_adam_equivalence(cgad_step));
  results.push_back(check_drop_totality(cgad_step));
  results.push_back(check_adam_decay_reduction());
  results.push_back(check_partial_sync_reduction());
  results.push_back(check_determinism());
  results.push_back(check_step_bound_short_run());
  results.push_back(check_quantization_round_trip());
  results.push_back(check_finite_differences());
  return results;
}

bool print_report(const std::vector<PropertyResult>& results, std::ostream& out) {
  bool ok = true;
  for (const auto& r : results) {
    out << (r.passed ? "[PASS] " : "[FAIL] ") << r.name;
    if (!r.detail.empty()) out << " -- " << r.detail;
    out << '\n';
    ok = ok && r.passed;
  }
  out << (ok ? "all properties hold\n" : "violated properties listed above\n");
  return ok;
}

}  // namespace stale_lab
