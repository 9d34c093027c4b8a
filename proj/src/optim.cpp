#include "stale_lab/optim.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <utility>

namespace stale_lab {

namespace {

constexpr std::array<std::pair<Method, std::string_view>, 10> kMethodNames{{
    {Method::cgad, "cgad"},
    {Method::pa_cgad, "pa_cgad"},
    {Method::adam, "adam"},
    {Method::adam_decay, "adam_decay"},
    {Method::nesterov, "nesterov"},
    {Method::sdm, "sdm"},
    {Method::delayed_nesterov, "delayed_nesterov"},
    {Method::poly_decay, "poly_decay"},
    {Method::eager, "eager"},
    {Method::mla, "mla"},
}};

void check_shapes(std::span<const double> params, std::span<const double> grad,
                  std::size_t state_size) {
  if (params.size() != grad.size() || params.size() != state_size) {
    throw ShapeError("shape mismatch: params " + std::to_string(params.size()) + ", grad " +
                     std::to_string(grad.size()) + ", state " + std::to_string(state_size));
  }
}

void require_nonneg_tau(double tau) {
  if (!(tau >= 0.0)) throw std::domain_error("staleness must be >= 0");
}

// Nesterov on c * g, where c is the staleness damping factor.
StepReport scaled_nesterov(std::span<double> params, std::span<const double> grad, double c,
                           NesterovVelocity& state, const OuterConfig& cfg) {
  check_shapes(params, grad, state.v.size());
  StepReport report;
  report.scale = c;
  report.ratio_max = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = c * grad[i];
    state.v[i] = cfg.mu * state.v[i] + g;
    const double before = params[i];
    params[i] -= cfg.eta * (g + cfg.mu * state.v[i]);
    report.step_inf_norm = std::max(report.step_inf_norm, std::abs(params[i] - before));
  }
  return report;
}

}  // namespace

std::string_view to_string(Method m) {
  for (const auto& [method, name] : kMethodNames) {
    if (method == m) return name;
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  for (const auto& [method, n] : kMethodNames) {
    if (n == name) return method;
  }
  throw std::invalid_argument("unknown method '" + std::string(name) + "'");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods = [] {
    std::vector<Method> out;
    for (const auto& entry : kMethodNames) out.push_back(entry.first);
    return out;
  }();
  return methods;
}

bool uses_adam_kernel(Method m) {
  return m == Method::cgad || m == Method::pa_cgad || m == Method::adam ||
         m == Method::adam_decay;
}

std::string_view to_string(GatePlacement p) {
  return p == GatePlacement::before ? "before" : "after";
}

GatePlacement parse_gate_placement(std::string_view name) {
  if (name == "before") return GatePlacement::before;
  if (name == "after") return GatePlacement::after;
  throw std::invalid_argument("unknown gate placement '" + std::string(name) + "'");
}

OuterConfig OuterConfig::defaults(Method method) {
  OuterConfig cfg;
  cfg.method = method;
  switch (method) {
    case Method::cgad:
    case Method::pa_cgad:
      break;
    case Method::adam:
      cfg.gate = StalenessGate::identity();
      break;
    case Method::adam_decay:
      cfg.gate = StalenessGate::exponential_only(0.2);
      break;
    case Method::sdm:
      cfg.gate = StalenessGate::exponential_only(0.2);
      cfg.eta = 0.7;
      cfg.mu = 0.9;
      break;
    case Method::nesterov:
    case Method::delayed_nesterov:
    case Method::poly_decay:
    case Method::eager:
    case Method::mla:
      cfg.gate = StalenessGate::identity();
      cfg.eta = 0.7;
      cfg.mu = 0.9;
      break;
  }
  return cfg;
}

std::vector<std::string> OuterConfig::validate() const {
  std::vector<std::string> errors;
  if (!(eta > 0.0) || !std::isfinite(eta)) errors.push_back("eta: must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) errors.push_back("beta1: must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) errors.push_back("beta2: must be in [0, 1)");
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) errors.push_back("epsilon: must be > 0");
  if (!(mu >= 0.0 && mu < 1.0)) errors.push_back("mu: must be in [0, 1)");
  if (!(gate.alpha >= 0.0) || !std::isfinite(gate.alpha)) {
    errors.push_back("alpha: must be finite and >= 0");
  }
  if (!(gate.tau_cut > 0.0)) errors.push_back("tau_cut: must be > 0 or \"inf\"");
  if (buffer_period < 1) errors.push_back("buffer_period: must be >= 1");
  return errors;
}

std::vector<std::string> InnerConfig::validate() const {
  std::vector<std::string> errors;
  if (!(lr > 0.0) || !std::isfinite(lr)) errors.push_back("lr: must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) errors.push_back("beta1: must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) errors.push_back("beta2: must be in [0, 1)");
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) errors.push_back("epsilon: must be > 0");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    errors.push_back("weight_decay: must be >= 0");
  }
  return errors;
}

StepReport cgad_step(std::span<double> params, std::span<const double> grad, double tau,
                     AdamMoments& state, const OuterConfig& cfg) {
  check_shapes(params, grad, state.m.size());
  if (state.v.size() != state.m.size()) throw ShapeError("adam moments disagree in size");

  StepReport report;
  const double sigma = staleness_weight(tau, cfg.gate);
  report.scale = sigma;
  if (sigma == 0.0) {
    report.applied = false;
    return report;
  }

  const bool gate_first = cfg.gate_placement == GatePlacement::before;
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));

  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = gate_first ? sigma * grad[i] : grad[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    const double ratio = m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    const double before = params[i];
    report.param_inf_norm = std::max(report.param_inf_norm, std::abs(before));
    params[i] -= cfg.eta * sigma * ratio;
    report.ratio_max = std::max(report.ratio_max, std::abs(ratio));
    report.step_inf_norm = std::max(report.step_inf_norm, std::abs(params[i] - before));
  }
  return report;
}

StepReport nesterov_step(std::span<double> params, std::span<const double> grad,
                         NesterovVelocity& state, const OuterConfig& cfg) {
  return scaled_nesterov(params, grad, 1.0, state, cfg);
}

StepReport sdm_step(std::span<double> params, std::span<const double> grad, double tau,
                    NesterovVelocity& state, const OuterConfig& cfg) {
  return scaled_nesterov(params, grad, exponential_decay(tau, cfg.gate.alpha), state, cfg);
}

StepReport poly_decay_step(std::span<double> params, std::span<const double> grad, double tau,
                           NesterovVelocity& state, const OuterConfig& cfg) {
  require_nonneg_tau(tau);
  return scaled_nesterov(params, grad, 1.0 / std::sqrt(1.0 + tau), state, cfg);
}

StepReport delayed_nesterov_step(std::span<double> params, std::span<const double> grad,
                                 DelayBuffer& buffer, NesterovVelocity& velocity,
                                 const OuterConfig& cfg) {
  check_shapes(params, grad, velocity.v.size());
  check_shapes(params, grad, buffer.accumulated.size());

  StepReport report;
  report.ratio_max = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> before(params.begin(), params.end());

  for (std::size_t i = 0; i < params.size(); ++i) {
    buffer.accumulated[i] += grad[i];
    params[i] -= cfg.eta * grad[i];
  }
  ++buffer.count;
  ++buffer.rounds_since_burst;

  if (buffer.rounds_since_burst >= cfg.buffer_period) {
    const double n = static_cast<double>(buffer.count);
    for (std::size_t i = 0; i < params.size(); ++i) {
      velocity.v[i] = cfg.mu * velocity.v[i] + buffer.accumulated[i] / n;
      params[i] -= cfg.eta * cfg.mu * velocity.v[i];
      buffer.accumulated[i] = 0.0;
    }
    buffer.count = 0;
    buffer.rounds_since_burst = 0;
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    report.step_inf_norm = std::max(report.step_inf_norm, std::abs(params[i] - before[i]));
  }
  return report;
}

StepReport mla_step(std::span<double> params, std::span<const double> grad, double tau,
                    NesterovVelocity& state, const OuterConfig& cfg) {
  require_nonneg_tau(tau);
  check_shapes(params, grad, state.v.size());
  StepReport report;
  report.ratio_max = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.v[i] = cfg.mu * state.v[i] + grad[i];
    const double before = params[i];
    params[i] -= cfg.eta * (grad[i] + cfg.mu * state.v[i]);
    params[i] -= cfg.eta * tau * cfg.mu * state.v[i];
    report.step_inf_norm = std::max(report.step_inf_norm, std::abs(params[i] - before));
  }
  return report;
}

std::vector<double> eager_mix(std::span<const double> own, std::span<const double> prev_own,
                              std::span<const double> prev_avg, int workers) {
  if (own.size() != prev_own.size() || own.size() != prev_avg.size()) {
    throw ShapeError("eager_mix: operand sizes differ");
  }
  if (workers < 1) throw std::invalid_argument("eager_mix: worker count must be >= 1");
  const double inv_m = 1.0 / static_cast<double>(workers);
  std::vector<double> out(own.size());
  for (std::size_t i = 0; i < own.size(); ++i) {
    out[i] = inv_m * (own[i] - prev_own[i]) + prev_avg[i];
  }
  return out;
}

void inner_adamw_step(std::span<double> params, std::span<const double> grad, AdamMoments& state,
                      const InnerConfig& cfg) {
  check_shapes(params, grad, state.m.size());
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (cfg.weight_decay != 0.0) params[i] -= cfg.lr * cfg.weight_decay * params[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
  }
}

namespace {

OuterConfig normalized(OuterConfig cfg) {
  switch (cfg.method) {
    case Method::adam:
      cfg.gate = StalenessGate::identity();
      break;
    case Method::adam_decay:
    case Method::sdm:
      cfg.gate.tau_cut = kNoCutoff;
      break;
    default:
      break;
  }
  return cfg;
}

}  // namespace

OuterOptimizer::OuterOptimizer(const OuterConfig& cfg, std::size_t dim)
    : cfg_(normalized(cfg)), dim_(dim) {
  if (const auto errors = cfg_.validate(); !errors.empty()) {
    throw std::invalid_argument("invalid outer config: " + errors.front());
  }
  if (uses_adam_kernel(cfg_.method)) {
    state_ = AdamMoments(dim);
  } else if (cfg_.method == Method::delayed_nesterov) {
    state_ = DelayedState{DelayBuffer(dim), NesterovVelocity(dim)};
  } else {
    state_ = NesterovVelocity(dim);
  }
}

StepReport OuterOptimizer::step(std::span<double> params, std::span<const double> grad,
                                double tau) {
  switch (cfg_.method) {
    case Method::cgad:
    case Method::pa_cgad:
    case Method::adam:
    case Method::adam_decay:
      return cgad_step(params, grad, tau, std::get<AdamMoments>(state_), cfg_);
    case Method::nesterov:
    case Method::eager:
      return nesterov_step(params, grad, std::get<NesterovVelocity>(state_), cfg_);
    case Method::sdm:
      return sdm_step(params, grad, tau, std::get<NesterovVelocity>(state_), cfg_);
    case Method::poly_decay:
      return poly_decay_step(params, grad, tau, std::get<NesterovVelocity>(state_), cfg_);
    case Method::mla:
      return mla_step(params, grad, tau, std::get<NesterovVelocity>(state_), cfg_);
    case Method::delayed_nesterov: {
      auto& s = std::get<DelayedState>(state_);
      return delayed_nesterov_step(params, grad, s.buffer, s.velocity, cfg_);
    }
  }
  throw std::logic_error("unhandled method");
}

const NesterovVelocity* OuterOptimizer::velocity() const {
  if (const auto* v = std::get_if<NesterovVelocity>(&state_)) return v;
  if (const auto* d = std::get_if<DelayedState>(&state_)) return &d->velocity;
  return nullptr;
}

const DelayBuffer* OuterOptimizer::delay_buffer() const {
  if (const auto* d = std::get_if<DelayedState>(&state_)) return &d->buffer;
  return nullptr;
}

}  // namespace stale_lab
