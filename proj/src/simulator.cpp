#include "stale_lab/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "stale_lab/seeding.hpp"

namespace stale_lab {

namespace {

bool all_finite(std::span<const double> xs) {
  return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

double squared_norm(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x * x;
  return s;
}

}  // namespace

int exponential_delay_from_uniform(double u, double rate) {
  const double x = -std::log1p(-u) / rate;
  return static_cast<int>(std::round(x));
}

int sample_delay(const DelaySchedule& schedule, int worker, std::int64_t round) {
  switch (schedule.kind) {
    case DelayKind::fixed:
      return schedule.tau;
    case DelayKind::uniform_int: {
      Rng rng(derive_seed(schedule.seed, "delay", static_cast<std::uint64_t>(worker),
                          static_cast<std::uint64_t>(round)));
      return static_cast<int>(rng.uniform_int(schedule.lo, schedule.hi));
    }
    case DelayKind::exponential: {
      Rng rng(derive_seed(schedule.seed, "delay", static_cast<std::uint64_t>(worker),
                          static_cast<std::uint64_t>(round)));
      const int tau = exponential_delay_from_uniform(rng.uniform(), schedule.rate);
      return std::clamp(tau, 0, schedule.tau_max);
    }
  }
  return 0;
}

FragmentPartition FragmentPartition::even(std::size_t dim, std::size_t count) {
  if (count < 1 || count > dim) {
    throw std::invalid_argument("fragment count must be in [1, dim]");
  }
  FragmentPartition p;
  const std::size_t base = dim / count;
  const std::size_t extra = dim % count;
  std::size_t start = 0;
  for (std::size_t f = 0; f < count; ++f) {
    const std::size_t len = base + (f < extra ? 1 : 0);
    p.ranges.emplace_back(start, start + len);
    start += len;
  }
  p.ages.assign(count, 0);
  return p;
}

std::vector<std::size_t> select_fragments(const FragmentPartition& partition, std::size_t budget,
                                          std::int64_t /*round*/) {
  const std::size_t n = partition.size();
  if (budget < 1 || budget > n) throw std::invalid_argument("fragment budget must be in [1, |F|]");
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) {
    return partition.ages[a] > partition.ages[b];
  });
  ids.resize(budget);
  std::sort(ids.begin(), ids.end());
  return ids;
}

void advance_ages(FragmentPartition& partition, std::span<const std::size_t> selected) {
  for (auto& a : partition.ages) ++a;
  for (std::size_t f : selected) partition.ages[f] = 0;
}

QuantizedPayload quantize_payload(std::span<const double> values,
                                  const FragmentPartition& partition) {
  QuantizedPayload q;
  q.codes.resize(values.size());
  q.max_abs.resize(partition.size());
  for (std::size_t f = 0; f < partition.size(); ++f) {
    const auto [start, end] = partition.ranges[f];
    double m = 0.0;
    for (std::size_t i = start; i < end; ++i) m = std::max(m, std::abs(values[i]));
    q.max_abs[f] = m;
    for (std::size_t i = start; i < end; ++i) {
      if (m == 0.0) {
        q.codes[i] = 0;
        continue;
      }
      // std::round is half away from zero.
      const double c = std::clamp(std::round(values[i] / m * 127.0), -127.0, 127.0);
      q.codes[i] = static_cast<std::int8_t>(c);
    }
  }
  return q;
}

std::vector<double> dequantize_payload(const QuantizedPayload& payload,
                                       const FragmentPartition& partition) {
  std::vector<double> out(payload.codes.size());
  for (std::size_t f = 0; f < partition.size(); ++f) {
    const auto [start, end] = partition.ranges[f];
    const double m = payload.max_abs[f];
    for (std::size_t i = start; i < end; ++i) {
      out[i] = (static_cast<double>(payload.codes[i]) / 127.0) * m;
    }
  }
  return out;
}

std::vector<double> QueueEntry::payload(const FragmentPartition& partition) const {
  if (quantized) return dequantize_payload(*quantized, partition);
  return raw;
}

void DelayQueue::push(QueueEntry entry) {
  auto key = std::make_tuple(entry.available_round, entry.worker, entry.produced_round);
  entries_.insert_or_assign(key, std::move(entry));
}

std::vector<QueueEntry> DelayQueue::pop_available(std::int64_t round) {
  std::vector<QueueEntry> out;
  auto it = entries_.begin();
  while (it != entries_.end() && std::get<0>(it->first) <= round) {
    out.push_back(std::move(it->second));
    it = entries_.erase(it);
  }
  return out;
}

InnerPhaseResult run_inner_phase(const Objective& obj, WorkerState& worker,
                                 std::span<const double> global_snapshot, int inner_steps,
                                 std::int64_t round, const InnerConfig& inner) {
  if (inner_steps < 1) throw std::invalid_argument("inner phase needs at least one step");
  worker.params.assign(global_snapshot.begin(), global_snapshot.end());
  worker.inner = AdamMoments(worker.params.size());

  InnerPhaseResult result;
  for (int h = 0; h < inner_steps; ++h) {
    const Batch batch = sample_batch(obj, worker.shard, round, h);
    const auto lg = obj.loss_and_grad(worker.params, batch);
    if (!std::isfinite(lg.loss) || !all_finite(lg.grad)) {
      result.finite = false;
      break;
    }
    inner_adamw_step(worker.params, lg.grad, worker.inner, inner);
  }
  result.delta.resize(global_snapshot.size());
  for (std::size_t i = 0; i < global_snapshot.size(); ++i) {
    result.delta[i] = global_snapshot[i] - worker.params[i];
  }
  if (result.finite) result.finite = all_finite(result.delta);
  return result;
}

Batch evaluation_batch(const Objective& obj, std::uint64_t seed, std::size_t size) {
  if (obj.has_exact_batch()) return obj.exact_batch();
  Rng rng(derive_seed(seed, "eval"));
  return obj.sample(rng, size);
}

double reference_loss(const Objective& obj, const Batch& eval, std::uint64_t seed) {
  double total = 0.0;
  for (int k = 0; k < kReferenceSeeds; ++k) {
    const auto params = obj.initial_params(derive_seed(seed, "reference", static_cast<std::uint64_t>(k)));
    total += obj.loss(params, eval);
  }
  return total / kReferenceSeeds;
}

Simulation::Simulation(const RunConfig& cfg, SimulationOptions options)
    : cfg_(cfg), options_(std::move(options)), objective_([&] {
        if (auto errors = cfg.validate(); !errors.empty()) throw ConfigError(std::move(errors));
        return Objective(cfg.objective);
      }()) {
  cfg_.delay.seed = derive_seed(cfg_.seed, "delay");
  eval_batch_ = evaluation_batch(objective_, cfg_.seed, cfg_.eval_batch_size);
  reference_loss_ = reference_loss(objective_, eval_batch_, cfg_.seed);
  global_ = objective_.initial_params(cfg_.seed);
  initial_loss_ = objective_.loss(global_, eval_batch_);

  workers_.resize(static_cast<std::size_t>(cfg_.workers));
  for (int w = 0; w < cfg_.workers; ++w) {
    workers_[w].shard = Shard::for_worker(cfg_.seed, w, cfg_.objective.batch_size);
  }
  partition_ = FragmentPartition::even(global_.size(), cfg_.fragments);
  for (std::size_t f = 0; f < partition_.size(); ++f) {
    optimizers_.emplace_back(cfg_.outer, partition_.length(f));
  }
  if (options_.worker_order.empty()) {
    options_.worker_order.resize(workers_.size());
    std::iota(options_.worker_order.begin(), options_.worker_order.end(), 0);
  }
  std::vector<int> sorted = options_.worker_order;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted.size() != workers_.size() || sorted[i] != static_cast<int>(i)) {
      throw std::invalid_argument("worker_order must be a permutation of worker ids");
    }
  }
  eager_prev_own_.resize(workers_.size());
}

bool Simulation::run_outer_round() {
  if (!finite_) return false;
  const std::int64_t r = round_;
  const auto selected = select_fragments(partition_, cfg_.effective_budget(), r);
  for (std::size_t f : selected) {
    wait_sum_ += partition_.ages[f];
    ++wait_count_;
  }

  // Workers all start from the same global snapshot, so their order only
  // matters for the push order, which the queue keys make irrelevant.
  for (int w : options_.worker_order) {
    auto phase = run_inner_phase(objective_, workers_[w], global_, cfg_.inner_steps, r, cfg_.inner);
    if (!phase.finite) {
      finite_ = false;
      return false;
    }
    QueueEntry entry;
    entry.worker = w;
    entry.produced_round = r;
    entry.tau = sample_delay(cfg_.delay, w, r);
    entry.available_round = r + entry.tau;
    if (cfg_.quantize_queue) {
      entry.quantized = quantize_payload(phase.delta, partition_);
    } else {
      entry.raw = std::move(phase.delta);
    }
    queue_.push(std::move(entry));
  }

  std::vector<double> round_sum(global_.size(), 0.0);
  std::size_t round_count = 0;
  std::size_t dropped_before = dropped_;
  const auto due = queue_.pop_available(r);
  for (const auto& entry : due) apply_entry(entry, selected, round_sum, round_count);
  if (cfg_.outer.method == Method::eager && round_count > 0) {
    for (auto& x : round_sum) x /= static_cast<double>(round_count);
    eager_prev_avg_ = std::move(round_sum);
  }

  advance_ages(partition_, selected);

  const double loss = objective_.loss(global_, eval_batch_);
  losses_.push_back(loss);
  trace_.rounds.push_back({r, loss, due.size(), dropped_ - dropped_before});
  ++round_;
  if (!std::isfinite(loss) || !all_finite(global_)) finite_ = false;
  return finite_;
}

void Simulation::apply_entry(const QueueEntry& entry, std::span<const std::size_t> selected,
                             std::vector<double>& round_sum, std::size_t& round_count) {
  std::vector<double> grad = entry.payload(partition_);
  const Method method = cfg_.outer.method;

  if (method == Method::eager) {
    auto& prev_own = eager_prev_own_[static_cast<std::size_t>(entry.worker)];
    std::vector<double> own = grad;
    if (prev_own && eager_prev_avg_) grad = eager_mix(own, *prev_own, *eager_prev_avg_, cfg_.workers);
    for (std::size_t i = 0; i < own.size(); ++i) round_sum[i] += own[i];
    ++round_count;
    prev_own = std::move(own);
  }
  ++consumed_;

  double grad_norm_sq = std::numeric_limits<double>::quiet_NaN();
  if (options_.record_trace && objective_.has_exact_batch()) {
    grad_norm_sq = squared_norm(objective_.loss_and_grad(global_, objective_.exact_batch()).grad);
  }

  const bool adam = uses_adam_kernel(method);
  for (std::size_t f : selected) {
    const auto [start, end] = partition_.ranges[f];
    const std::size_t len = end - start;
    const double age = method == Method::pa_cgad
                           ? effective_age(entry.tau, partition_.ages[f])
                           : static_cast<double>(entry.tau);
    std::span<double> params(global_.data() + start, len);
    std::span<const double> g(grad.data() + start, len);
    const StepReport report = optimizers_[f].step(params, g, age);

    ++sigma_count_;
    sigma_mean_ += (report.scale - sigma_mean_) / static_cast<double>(sigma_count_);
    if (report.applied) {
      ++applied_;
    } else {
      ++dropped_;
    }
    if (adam && report.applied) {
      rho_max_ = std::max(rho_max_, report.ratio_max);
      if (report.ratio_max <= 1.0) ++rho_le_1_;
      ++rho_count_;
    }
    if (options_.record_trace) {
      StepRecord rec;
      rec.round = round_;
      rec.worker = entry.worker;
      rec.fragment = f;
      rec.tau = entry.tau;
      rec.age = age;
      rec.sigma = report.scale;
      rec.applied = report.applied;
      rec.eta = optimizers_[f].config().eta;
      rec.adam_kernel = adam;
      rec.step_inf_norm = report.step_inf_norm;
      rec.param_inf_norm = report.param_inf_norm;
      rec.ratio_max = report.ratio_max;
      rec.grad_norm_sq = grad_norm_sq;
      rec.pseudo_grad_norm_sq = squared_norm(g);
      trace_.steps.push_back(rec);
    }
  }
}

RunResult Simulation::result() const {
  RunResult res;
  res.config_hash = config_hash(cfg_);
  res.seed = cfg_.seed;
  res.losses = losses_;
  res.initial_loss = initial_loss_;
  res.reference_loss = reference_loss_;
  res.rounds_completed = static_cast<std::int64_t>(losses_.size());
  res.consumed_entries = consumed_;
  res.applied_updates = applied_;
  res.dropped_updates = dropped_;
  res.in_flight_at_end = queue_.size();
  res.sigma_bar = sigma_count_ ? sigma_mean_ : 1.0;
  res.rho_max = rho_max_;
  res.rho_le_1_fraction = rho_count_ ? static_cast<double>(rho_le_1_) / static_cast<double>(rho_count_) : 1.0;
  res.mean_fragment_wait = wait_count_ ? wait_sum_ / static_cast<double>(wait_count_) : 0.0;
  res.final_params = global_;
  res.trace = trace_;

  const bool any_non_finite =
      !finite_ || std::any_of(losses_.begin(), losses_.end(), [](double x) { return !std::isfinite(x); });
  if (any_non_finite) {
    res.diverged = true;
    res.final_loss = std::numeric_limits<double>::quiet_NaN();
    for (auto it = losses_.rbegin(); it != losses_.rend(); ++it) {
      if (std::isfinite(*it)) {
        res.final_loss = *it;
        break;
      }
    }
    return res;
  }
  const std::size_t window = std::min(kFinalLossWindow, losses_.size());
  double tail = 0.0;
  for (std::size_t i = losses_.size() - window; i < losses_.size(); ++i) tail += losses_[i];
  res.final_loss = window ? tail / static_cast<double>(window) : initial_loss_;
  res.diverged = res.final_loss > kDivergenceFactor * reference_loss_;
  return res;
}

RunResult run_experiment(const RunConfig& cfg, const SimulationOptions& options) {
  Simulation sim(cfg, options);
  for (int r = 0; r < cfg.rounds; ++r) {
    if (!sim.run_outer_round()) break;
  }
  return sim.result();
}

}  // namespace stale_lab
