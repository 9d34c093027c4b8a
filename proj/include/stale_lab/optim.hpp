#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "stale_lab/gate.hpp"

namespace stale_lab {

enum class Method {
  cgad,
  pa_cgad,
  adam,
  adam_decay,
  nesterov,
  sdm,
  delayed_nesterov,
  poly_decay,
  eager,
  mla,
};

std::string_view to_string(Method m);
/// Throws std::invalid_argument for unknown names.
Method parse_method(std::string_view name);
const std::vector<Method>& all_methods();

/// True for the methods that run the gated Adam kernel.
bool uses_adam_kernel(Method m);

enum class GatePlacement { before, after };

std::string_view to_string(GatePlacement p);
GatePlacement parse_gate_placement(std::string_view name);

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct OuterConfig {
  Method method = Method::cgad;
  double eta = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double epsilon = 1e-8;
  double mu = 0.9;
  StalenessGate gate{};
  GatePlacement gate_placement = GatePlacement::before;
  int buffer_period = 4;

  /// Recommended settings for a method: the CGAD defaults for the Adam
  /// family, (eta, mu) = (0.7, 0.9) for the Nesterov family. The gate is
  /// normalized to the method: identity for adam, exponential-only for
  /// adam_decay and sdm.
  static OuterConfig defaults(Method method);

  /// Field-level problems, empty when valid. Names are relative ("beta1").
  std::vector<std::string> validate() const;
};

struct InnerConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double epsilon = 1e-8;
  double weight_decay = 0.0;

  std::vector<std::string> validate() const;
};

/// Adam state. Bias-corrected moments are derived on the fly; t counts
/// applied updates only.
struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t t = 0;

  AdamMoments() = default;
  explicit AdamMoments(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

  bool operator==(const AdamMoments&) const = default;
};

struct NesterovVelocity {
  std::vector<double> v;

  NesterovVelocity() = default;
  explicit NesterovVelocity(std::size_t n) : v(n, 0.0) {}

  bool operator==(const NesterovVelocity&) const = default;
};

struct DelayBuffer {
  std::vector<double> accumulated;
  int count = 0;
  int rounds_since_burst = 0;

  DelayBuffer() = default;
  explicit DelayBuffer(std::size_t n) : accumulated(n, 0.0) {}

  bool operator==(const DelayBuffer&) const = default;
};

/// What one outer step did.
struct StepReport {
  bool applied = true;
  /// Multiplier applied to the incoming pseudo-gradient (sigma for the gated
  /// Adam family, the damping factor for Nesterov variants, 1 otherwise).
  double scale = 1.0;
  /// max_i |m_hat_i| / (sqrt(v_hat_i) + eps); NaN for non-Adam methods.
  double ratio_max = 0.0;
  /// ||params_after - params_before||_inf.
  double step_inf_norm = 0.0;
  /// ||params_before||_inf, the scale of the rounding in step_inf_norm.
  double param_inf_norm = 0.0;
};

// Every step below treats `grad` as a pseudo-gradient: a descent direction
// when negated, so updates subtract it.

/// Gated Adam step shared by cgad, pa_cgad, adam and adam_decay. A zero gate
/// weight returns without touching params or state.
StepReport cgad_step(std::span<double> params, std::span<const double> grad, double tau,
                     AdamMoments& state, const OuterConfig& cfg);

/// v <- mu v + g; params <- params - eta (g + mu v).
StepReport nesterov_step(std::span<double> params, std::span<const double> grad,
                         NesterovVelocity& state, const OuterConfig& cfg);

/// Nesterov on exp(-alpha tau) g.
StepReport sdm_step(std::span<double> params, std::span<const double> grad, double tau,
                    NesterovVelocity& state, const OuterConfig& cfg);

/// Nesterov on (1 + tau)^(-1/2) g.
StepReport poly_decay_step(std::span<double> params, std::span<const double> grad, double tau,
                           NesterovVelocity& state, const OuterConfig& cfg);

/// Plain -eta g every call; every buffer_period-th call the buffered mean
/// feeds the velocity and a -eta mu v burst follows.
StepReport delayed_nesterov_step(std::span<double> params, std::span<const double> grad,
                                 DelayBuffer& buffer, NesterovVelocity& velocity,
                                 const OuterConfig& cfg);

/// Nesterov step plus a tau * mu velocity extrapolation.
StepReport mla_step(std::span<double> params, std::span<const double> grad, double tau,
                    NesterovVelocity& state, const OuterConfig& cfg);

/// (1/M)(own - prev_own) + prev_avg.
std::vector<double> eager_mix(std::span<const double> own, std::span<const double> prev_own,
                              std::span<const double> prev_avg, int workers);

/// AdamW with decoupled weight decay; reduces to Adam when weight_decay = 0.
/// `grad` is the loss gradient here, not a pseudo-gradient.
void inner_adamw_step(std::span<double> params, std::span<const double> grad, AdamMoments& state,
                      const InnerConfig& cfg);

/// Uniform front for every outer method over one parameter slice.
class OuterOptimizer {
 public:
  OuterOptimizer(const OuterConfig& cfg, std::size_t dim);

  StepReport step(std::span<double> params, std::span<const double> grad, double tau);

  const OuterConfig& config() const { return cfg_; }
  std::size_t dim() const { return dim_; }

  const AdamMoments* adam_state() const { return std::get_if<AdamMoments>(&state_); }
  const NesterovVelocity* velocity() const;
  const DelayBuffer* delay_buffer() const;

 private:
  struct DelayedState {
    DelayBuffer buffer;
    NesterovVelocity velocity;
  };

  OuterConfig cfg_;
  std::size_t dim_;
  std::variant<AdamMoments, NesterovVelocity, DelayedState> state_;
};

}  // namespace stale_lab
