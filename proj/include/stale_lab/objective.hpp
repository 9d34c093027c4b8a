#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stale_lab/seeding.hpp"

namespace stale_lab {

enum class ObjectiveKind { quadratic, rosenbrock_sum, mlp_regression };

std::string_view to_string(ObjectiveKind k);
ObjectiveKind parse_objective_kind(std::string_view name);

struct ObjectiveSpec {
  ObjectiveKind kind = ObjectiveKind::quadratic;
  /// Parameter dimension for quadratic and rosenbrock_sum.
  std::size_t dim = 16;
  /// Quadratic spectrum bounds; eigenvalues are log-spaced between them.
  double lambda_min = 0.1;
  double lambda_max = 10.0;
  /// Per-sample gradient noise for quadratic and rosenbrock_sum: each sample
  /// adds -xi^T theta with xi ~ N(0, noise_std^2 I).
  double noise_std = 0.0;
  /// mlp layer widths, input first, output last. tanh on hidden layers.
  std::vector<std::size_t> layers{8, 32, 1};
  /// Multiplier on the teacher's output layer.
  double teacher_scale = 1.0;
  /// Gaussian noise added to teacher targets; sets the loss floor at
  /// label_noise^2 / 2 per output.
  double label_noise = 0.0;
  /// Scale of the random initialization relative to 1/sqrt(fan_in).
  double init_scale = 1.0;
  std::size_t batch_size = 16;
  /// Fixes the problem instance (rotation, minimizer, teacher).
  std::uint64_t seed = 0;

  std::vector<std::string> validate() const;
};

/// A set of samples. For mlp_regression each sample is an (input, target)
/// pair; for the analytic objectives each sample is a noise vector and
/// `targets` is empty.
struct Batch {
  std::size_t count = 0;
  std::size_t input_width = 0;
  std::size_t target_width = 0;
  std::vector<double> inputs;
  std::vector<double> targets;

  std::span<const double> input(std::size_t i) const {
    return {inputs.data() + i * input_width, input_width};
  }
  std::span<const double> target(std::size_t i) const {
    return {targets.data() + i * target_width, target_width};
  }
  Batch slice(std::size_t i) const;

  bool operator==(const Batch&) const = default;
};

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Smooth training objective with hand-written analytic gradients. Immutable
/// after construction; all queries are pure.
class Objective {
 public:
  explicit Objective(const ObjectiveSpec& spec);

  const ObjectiveSpec& spec() const { return spec_; }
  std::size_t dim() const { return dim_; }

  /// Mean per-sample loss over the batch and its exact gradient. Non-finite
  /// params give a non-finite loss rather than an exception.
  LossAndGrad loss_and_grad(std::span<const double> params, const Batch& batch) const;
  double loss(std::span<const double> params, const Batch& batch) const;

  /// Draws `count` i.i.d. samples.
  Batch sample(Rng& rng, std::size_t count) const;
  /// A single noise-free sample: the population objective for quadratic and
  /// rosenbrock_sum. Not available for mlp_regression.
  Batch exact_batch() const;
  bool has_exact_batch() const { return spec_.kind != ObjectiveKind::mlp_regression; }

  std::vector<double> initial_params(std::uint64_t seed) const;

  /// Smoothness constant when known analytically (quadratic: lambda_max).
  std::optional<double> smoothness() const;
  /// Quadratic only.
  std::optional<std::vector<double>> minimizer() const;
  /// Infimum of the population loss when known.
  std::optional<double> optimal_loss() const;

  /// Quadratic matrix, row-major d x d. Empty for other kinds.
  const std::vector<double>& hessian() const { return hessian_; }
  /// Flattened teacher parameters (mlp only).
  const std::vector<double>& teacher() const { return teacher_; }

 private:
  LossAndGrad quadratic(std::span<const double> params, const Batch& batch) const;
  LossAndGrad rosenbrock(std::span<const double> params, const Batch& batch) const;
  LossAndGrad mlp(std::span<const double> params, const Batch& batch) const;

  ObjectiveSpec spec_;
  std::size_t dim_ = 0;
  std::vector<double> hessian_;
  std::vector<double> optimum_;
  std::vector<double> teacher_;
};

/// Forward pass of the tanh mlp used by mlp_regression (exposed for tests).
std::vector<double> mlp_forward(std::span<const std::size_t> layers, std::span<const double> params,
                                std::span<const double> input);
std::size_t mlp_param_count(std::span<const std::size_t> layers);

/// A worker's data stream. Batches are a pure function of (seed, round,
/// inner step).
struct Shard {
  int worker = 0;
  std::uint64_t seed = 0;
  std::size_t batch_size = 16;

  static Shard for_worker(std::uint64_t master_seed, int worker, std::size_t batch_size);
};

Batch sample_batch(const Objective& obj, const Shard& shard, std::int64_t round,
                   std::int64_t inner_step);

struct FiniteDiffReport {
  bool passed = false;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

/// Relative central-difference step, about cbrt(machine epsilon).
inline constexpr double kFiniteDiffStep = 6e-6;

/// Central differences with step kFiniteDiffStep (1 + |theta_i|) against
/// `analytic`.
/// Error per coordinate is |a - n| / max(1, |a|, |n|).
FiniteDiffReport finite_diff_compare(const Objective& obj, std::span<const double> params,
                                     const Batch& batch, std::span<const double> analytic,
                                     double tolerance);
FiniteDiffReport finite_diff_check(const Objective& obj, std::span<const double> params,
                                   const Batch& batch, double tolerance);

}  // namespace stale_lab
