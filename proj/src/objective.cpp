#include "stale_lab/objective.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace stale_lab {

std::string_view to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::quadratic:
      return "quadratic";
    case ObjectiveKind::rosenbrock_sum:
      return "rosenbrock_sum";
    case ObjectiveKind::mlp_regression:
      return "mlp_regression";
  }
  return "unknown";
}

ObjectiveKind parse_objective_kind(std::string_view name) {
  if (name == "quadratic") return ObjectiveKind::quadratic;
  if (name == "rosenbrock_sum") return ObjectiveKind::rosenbrock_sum;
  if (name == "mlp_regression") return ObjectiveKind::mlp_regression;
  throw std::invalid_argument("unknown objective kind '" + std::string(name) + "'");
}

std::vector<std::string> ObjectiveSpec::validate() const {
  std::vector<std::string> errors;
  if (kind != ObjectiveKind::mlp_regression && dim < 1) errors.push_back("dim: must be >= 1");
  if (kind == ObjectiveKind::rosenbrock_sum && dim < 2) errors.push_back("dim: must be >= 2");
  if (kind == ObjectiveKind::quadratic) {
    if (!(lambda_min > 0.0)) errors.push_back("lambda_min: must be > 0");
    if (!(lambda_max >= lambda_min) || !std::isfinite(lambda_max)) {
      errors.push_back("lambda_max: must be finite and >= lambda_min");
    }
  }
  if (kind == ObjectiveKind::mlp_regression) {
    if (layers.size() < 2) errors.push_back("layers: need at least input and output widths");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i] < 1) errors.push_back("layers[" + std::to_string(i) + "]: must be >= 1");
    }
    if (!(teacher_scale > 0.0) || !std::isfinite(teacher_scale)) {
      errors.push_back("teacher_scale: must be > 0");
    }
    if (!(label_noise >= 0.0) || !std::isfinite(label_noise)) {
      errors.push_back("label_noise: must be >= 0");
    }
  }
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) errors.push_back("noise_std: must be >= 0");
  if (!(init_scale > 0.0) || !std::isfinite(init_scale)) errors.push_back("init_scale: must be > 0");
  if (batch_size < 1) errors.push_back("batch_size: must be >= 1");
  return errors;
}

Batch Batch::slice(std::size_t i) const {
  Batch out;
  out.count = 1;
  out.input_width = input_width;
  out.target_width = target_width;
  out.inputs.assign(inputs.begin() + static_cast<std::ptrdiff_t>(i * input_width),
                    inputs.begin() + static_cast<std::ptrdiff_t>((i + 1) * input_width));
  if (target_width > 0) {
    out.targets.assign(targets.begin() + static_cast<std::ptrdiff_t>(i * target_width),
                       targets.begin() + static_cast<std::ptrdiff_t>((i + 1) * target_width));
  }
  return out;
}

std::size_t mlp_param_count(std::span<const std::size_t> layers) {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) n += layers[l + 1] * (layers[l] + 1);
  return n;
}

namespace {

// Per-layer activations of one sample; acts[0] is the input.
void mlp_activations(std::span<const std::size_t> layers, std::span<const double> params,
                     std::span<const double> input, std::vector<std::vector<double>>& acts) {
  acts.resize(layers.size());
  acts[0].assign(input.begin(), input.end());
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
    const std::size_t fan_in = layers[l];
    const std::size_t fan_out = layers[l + 1];
    const double* w = params.data() + offset;
    const double* b = w + fan_out * fan_in;
    auto& out = acts[l + 1];
    out.assign(fan_out, 0.0);
    const bool hidden = l + 2 < layers.size();
    for (std::size_t j = 0; j < fan_out; ++j) {
      double z = b[j];
      for (std::size_t k = 0; k < fan_in; ++k) z += w[j * fan_in + k] * acts[l][k];
      out[j] = hidden ? std::tanh(z) : z;
    }
    offset += fan_out * (fan_in + 1);
  }
}

void init_layers(std::span<const std::size_t> layers, double scale, Rng& rng,
                 std::vector<double>& params) {
  params.assign(mlp_param_count(layers), 0.0);
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
    const std::size_t fan_in = layers[l];
    const std::size_t fan_out = layers[l + 1];
    const double stddev = scale / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < fan_out * fan_in; ++i) params[offset + i] = stddev * rng.normal();
    offset += fan_out * (fan_in + 1);
  }
}

bool all_finite(std::span<const double> xs) {
  return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

LossAndGrad non_finite(std::size_t dim) {
  return {std::numeric_limits<double>::quiet_NaN(),
          std::vector<double>(dim, std::numeric_limits<double>::quiet_NaN())};
}

}  // namespace

std::vector<double> mlp_forward(std::span<const std::size_t> layers, std::span<const double> params,
                                std::span<const double> input) {
  std::vector<std::vector<double>> acts;
  mlp_activations(layers, params, input, acts);
  return acts.back();
}

Objective::Objective(const ObjectiveSpec& spec) : spec_(spec) {
  if (const auto errors = spec_.validate(); !errors.empty()) {
    throw std::invalid_argument("invalid objective: " + errors.front());
  }
  Rng rng(derive_seed(spec_.seed, "objective"));
  switch (spec_.kind) {
    case ObjectiveKind::quadratic: {
      const auto d = static_cast<Eigen::Index>(spec_.dim);
      dim_ = spec_.dim;
      Eigen::MatrixXd gaussian(d, d);
      for (Eigen::Index i = 0; i < d; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) gaussian(i, j) = rng.normal();
      }
      const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(gaussian).householderQ();
      Eigen::VectorXd eig(d);
      const double log_hi = std::log(spec_.lambda_max);
      const double log_lo = std::log(spec_.lambda_min);
      for (Eigen::Index i = 0; i < d; ++i) {
        const double frac = d == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(d - 1);
        eig(i) = std::exp(log_hi + frac * (log_lo - log_hi));
      }
      eig(0) = spec_.lambda_max;
      if (d > 1) eig(d - 1) = spec_.lambda_min;
      Eigen::MatrixXd a = q * eig.asDiagonal() * q.transpose();
      a = 0.5 * (a + a.transpose()).eval();
      hessian_.resize(spec_.dim * spec_.dim);
      for (Eigen::Index i = 0; i < d; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) hessian_[i * d + j] = a(i, j);
      }
      optimum_.resize(spec_.dim);
      for (auto& x : optimum_) x = rng.normal();
      break;
    }
    case ObjectiveKind::rosenbrock_sum:
      dim_ = spec_.dim;
      break;
    case ObjectiveKind::mlp_regression: {
      dim_ = mlp_param_count(spec_.layers);
      init_layers(spec_.layers, 1.0, rng, teacher_);
      // Teacher biases are nonzero so the target function is not odd.
      std::size_t offset = 0;
      for (std::size_t l = 0; l + 1 < spec_.layers.size(); ++l) {
        const std::size_t fan_in = spec_.layers[l];
        const std::size_t fan_out = spec_.layers[l + 1];
        for (std::size_t j = 0; j < fan_out; ++j) {
          teacher_[offset + fan_out * fan_in + j] = 0.5 * rng.normal();
        }
        if (l + 2 == spec_.layers.size()) {
          for (std::size_t i = 0; i < fan_out * (fan_in + 1); ++i) {
            teacher_[offset + i] *= spec_.teacher_scale;
          }
        }
        offset += fan_out * (fan_in + 1);
      }
      break;
    }
  }
}

LossAndGrad Objective::loss_and_grad(std::span<const double> params, const Batch& batch) const {
  if (params.size() != dim_) {
    throw std::invalid_argument("params have size " + std::to_string(params.size()) +
                                ", objective expects " + std::to_string(dim_));
  }
  if (batch.count == 0) throw std::invalid_argument("empty batch");
  if (!all_finite(params)) return non_finite(dim_);
  switch (spec_.kind) {
    case ObjectiveKind::quadratic:
      return quadratic(params, batch);
    case ObjectiveKind::rosenbrock_sum:
      return rosenbrock(params, batch);
    case ObjectiveKind::mlp_regression:
      return mlp(params, batch);
  }
  throw std::logic_error("unhandled objective kind");
}

double Objective::loss(std::span<const double> params, const Batch& batch) const {
  return loss_and_grad(params, batch).loss;
}

// f_i(theta) = 1/2 (theta - theta*)^T A (theta - theta*) - xi_i^T theta
LossAndGrad Objective::quadratic(std::span<const double> params, const Batch& batch) const {
  const std::size_t d = dim_;
  std::vector<double> delta(d);
  for (std::size_t i = 0; i < d; ++i) delta[i] = params[i] - optimum_[i];

  std::vector<double> mean_noise(d, 0.0);
  for (std::size_t s = 0; s < batch.count; ++s) {
    const auto xi = batch.input(s);
    for (std::size_t i = 0; i < d; ++i) mean_noise[i] += xi[i];
  }
  const double inv_n = 1.0 / static_cast<double>(batch.count);
  for (auto& x : mean_noise) x *= inv_n;

  LossAndGrad out;
  out.grad.assign(d, 0.0);
  double curvature = 0.0;
  double linear = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    double a_delta = 0.0;
    for (std::size_t j = 0; j < d; ++j) a_delta += hessian_[i * d + j] * delta[j];
    curvature += delta[i] * a_delta;
    linear += mean_noise[i] * params[i];
    out.grad[i] = a_delta - mean_noise[i];
  }
  out.loss = 0.5 * curvature - linear;
  return out;
}

// sum_i 100 (theta_{i+1} - theta_i^2)^2 + (1 - theta_i)^2, plus the same
// linear noise term as the quadratic.
LossAndGrad Objective::rosenbrock(std::span<const double> params, const Batch& batch) const {
  const std::size_t d = dim_;
  LossAndGrad out;
  out.grad.assign(d, 0.0);
  double f = 0.0;
  for (std::size_t i = 0; i + 1 < d; ++i) {
    const double a = params[i + 1] - params[i] * params[i];
    const double b = 1.0 - params[i];
    f += 100.0 * a * a + b * b;
    out.grad[i] += -400.0 * params[i] * a - 2.0 * b;
    out.grad[i + 1] += 200.0 * a;
  }
  const double inv_n = 1.0 / static_cast<double>(batch.count);
  for (std::size_t i = 0; i < d; ++i) {
    double xi = 0.0;
    for (std::size_t s = 0; s < batch.count; ++s) xi += batch.input(s)[i];
    xi *= inv_n;
    f -= xi * params[i];
    out.grad[i] -= xi;
  }
  out.loss = f;
  return out;
}

// 1/2 ||mlp(x) - y||^2 averaged over samples, backprop by hand.
LossAndGrad Objective::mlp(std::span<const double> params, const Batch& batch) const {
  const auto& layers = spec_.layers;
  LossAndGrad out;
  out.grad.assign(dim_, 0.0);
  std::vector<std::vector<double>> acts;
  std::vector<double> delta;
  std::vector<double> delta_prev;
  std::vector<std::size_t> offsets(layers.size() - 1);
  for (std::size_t l = 0, off = 0; l + 1 < layers.size(); ++l) {
    offsets[l] = off;
    off += layers[l + 1] * (layers[l] + 1);
  }

  double total = 0.0;
  for (std::size_t s = 0; s < batch.count; ++s) {
    mlp_activations(layers, params, batch.input(s), acts);
    const auto y = batch.target(s);
    const auto& pred = acts.back();
    delta.assign(pred.size(), 0.0);
    for (std::size_t j = 0; j < pred.size(); ++j) {
      const double r = pred[j] - y[j];
      total += 0.5 * r * r;
      delta[j] = r;
    }
    for (std::size_t l = layers.size() - 1; l-- > 0;) {
      const std::size_t fan_in = layers[l];
      const std::size_t fan_out = layers[l + 1];
      const double* w = params.data() + offsets[l];
      double* gw = out.grad.data() + offsets[l];
      double* gb = gw + fan_out * fan_in;
      for (std::size_t j = 0; j < fan_out; ++j) {
        gb[j] += delta[j];
        for (std::size_t k = 0; k < fan_in; ++k) gw[j * fan_in + k] += delta[j] * acts[l][k];
      }
      if (l == 0) break;
      delta_prev.assign(fan_in, 0.0);
      for (std::size_t k = 0; k < fan_in; ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < fan_out; ++j) acc += w[j * fan_in + k] * delta[j];
        const double a = acts[l][k];
        delta_prev[k] = acc * (1.0 - a * a);
      }
      delta.swap(delta_prev);
    }
  }
  const double inv_n = 1.0 / static_cast<double>(batch.count);
  out.loss = total * inv_n;
  for (auto& g : out.grad) g *= inv_n;
  return out;
}

Batch Objective::sample(Rng& rng, std::size_t count) const {
  Batch b;
  b.count = count;
  if (spec_.kind == ObjectiveKind::mlp_regression) {
    const std::size_t in = spec_.layers.front();
    const std::size_t out = spec_.layers.back();
    b.input_width = in;
    b.target_width = out;
    b.inputs.resize(count * in);
    b.targets.resize(count * out);
    for (std::size_t s = 0; s < count; ++s) {
      for (std::size_t k = 0; k < in; ++k) b.inputs[s * in + k] = rng.normal();
      const auto y = mlp_forward(spec_.layers, teacher_, b.input(s));
      for (std::size_t j = 0; j < out; ++j) {
        b.targets[s * out + j] = y[j] + spec_.label_noise * rng.normal();
      }
    }
  } else {
    b.input_width = dim_;
    b.inputs.resize(count * dim_);
    for (auto& x : b.inputs) x = spec_.noise_std * rng.normal();
  }
  return b;
}

Batch Objective::exact_batch() const {
  if (!has_exact_batch()) throw std::logic_error("mlp_regression has no exact population batch");
  Batch b;
  b.count = 1;
  b.input_width = dim_;
  b.inputs.assign(dim_, 0.0);
  return b;
}

std::vector<double> Objective::initial_params(std::uint64_t seed) const {
  Rng rng(derive_seed(seed, "init"));
  std::vector<double> params;
  if (spec_.kind == ObjectiveKind::mlp_regression) {
    init_layers(spec_.layers, spec_.init_scale, rng, params);
  } else {
    params.resize(dim_);
    for (auto& x : params) x = spec_.init_scale * rng.normal();
  }
  return params;
}

std::optional<double> Objective::smoothness() const {
  if (spec_.kind == ObjectiveKind::quadratic) return spec_.lambda_max;
  return std::nullopt;
}

std::optional<std::vector<double>> Objective::minimizer() const {
  if (spec_.kind == ObjectiveKind::quadratic) return optimum_;
  if (spec_.kind == ObjectiveKind::rosenbrock_sum) return std::vector<double>(dim_, 1.0);
  return std::nullopt;
}

std::optional<double> Objective::optimal_loss() const {
  if (spec_.kind == ObjectiveKind::mlp_regression) {
    return 0.5 * spec_.label_noise * spec_.label_noise * static_cast<double>(spec_.layers.back());
  }
  return 0.0;
}

Shard Shard::for_worker(std::uint64_t master_seed, int worker, std::size_t batch_size) {
  return {worker, derive_seed(master_seed, "shard", static_cast<std::uint64_t>(worker)),
          batch_size};
}

Batch sample_batch(const Objective& obj, const Shard& shard, std::int64_t round,
                   std::int64_t inner_step) {
  Rng rng(derive_seed(shard.seed, "batch", static_cast<std::uint64_t>(round),
                      static_cast<std::uint64_t>(inner_step)));
  return obj.sample(rng, shard.batch_size);
}

FiniteDiffReport finite_diff_compare(const Objective& obj, std::span<const double> params,
                                     const Batch& batch, std::span<const double> analytic,
                                     double tolerance) {
  if (!(tolerance > 0.0)) throw std::invalid_argument("tolerance must be > 0");
  if (analytic.size() != params.size()) throw std::invalid_argument("gradient size mismatch");
  FiniteDiffReport report;
  std::vector<double> probe(params.begin(), params.end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double x = probe[i];
    // cbrt(eps) balances the O(h^2) truncation against O(eps / h) rounding.
    const double h = kFiniteDiffStep * (1.0 + std::abs(x));
    probe[i] = x + h;
    const double up = obj.loss(probe, batch);
    probe[i] = x - h;
    const double down = obj.loss(probe, batch);
    probe[i] = x;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    const double err = std::abs(analytic[i] - numeric) / denom;
    if (!(err <= report.max_rel_error)) {
      report.max_rel_error = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
      report.worst_index = i;
    }
  }
  report.passed = report.max_rel_error <= tolerance;
  return report;
}

FiniteDiffReport finite_diff_check(const Objective& obj, std::span<const double> params,
                                   const Batch& batch, double tolerance) {
  const auto lg = obj.loss_and_grad(params, batch);
  return finite_diff_compare(obj, params, batch, lg.grad, tolerance);
}

}  // namespace stale_lab
