#include "stale_lab/harness.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace stale_lab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json finite_or_null(double x) {
  if (std::isfinite(x)) return x;
  return nullptr;
}

json optional_number(const std::optional<double>& x) {
  if (x && std::isfinite(*x)) return *x;
  return nullptr;
}

}  // namespace

RunOutcome execute_run(const RunConfig& cfg) {
  RunOutcome out;
  out.config = cfg;
  out.result = run_experiment(cfg);
  std::optional<StalenessGate> gate;
  if (uses_adam_kernel(cfg.outer.method)) gate = OuterOptimizer(cfg.outer, 1).config().gate;
  out.audit = audit_run(out.result.trace.steps, gate);
  if (gate && gate->alpha > 0.0) {
    out.rate_bound = rate_bound_check(out.audit, Objective(cfg.objective), out.result.initial_loss,
                                      cfg.outer.eta, gate->alpha);
  }
  out.document = result_document(cfg, out.result, out.audit, out.rate_bound);
  return out;
}

json theory_to_json(const AuditReport& audit, const std::optional<RateBoundCheck>& rate) {
  json j{
      {"steps", audit.steps},
      {"step_bound_checked", audit.step_bound_checked},
      {"step_bound_violations", audit.step_bound_violations},
      {"step_bound_worst_excess", finite_or_null(audit.step_bound_worst_excess)},
      {"rho_le_1_fraction", finite_or_null(audit.rho_le_1_fraction)},
      {"rho_max", finite_or_null(audit.rho_max)},
      {"sigma_bar", finite_or_null(audit.sigma_bar)},
      {"weighted_grad_norm_avg", optional_number(audit.weighted_grad_norm_avg)},
      {"grad_bound_estimate", optional_number(audit.grad_bound_estimate)},
      {"noise_bound_estimate", finite_or_null(audit.noise_bound_estimate)},
      {"sigma_mismatches", audit.sigma_mismatches},
  };
  if (rate) {
    j["rate_bound"] = json{
        {"lhs", finite_or_null(rate->lhs)},
        {"optimization_term", finite_or_null(rate->terms.optimization)},
        {"noise_term", finite_or_null(rate->terms.noise)},
        {"staleness_term", finite_or_null(rate->terms.staleness)},
        {"rhs", finite_or_null(rate->terms.total())},
        {"holds", rate->holds},
        {"smoothness", rate->inputs.smoothness},
        {"step_constant", rate->inputs.step_constant},
        {"horizon", rate->inputs.horizon},
        {"initial_gap", rate->inputs.initial_gap},
    };
  } else {
    j["rate_bound"] = nullptr;
  }
  return j;
}

json result_document(const RunConfig& cfg, const RunResult& r, const AuditReport& audit,
                     const std::optional<RateBoundCheck>& rate) {
  json losses = json::array();
  for (double x : r.losses) losses.push_back(finite_or_null(x));
  return json{
      {"schema_version", kResultSchemaVersion},
      {"config_hash", r.config_hash},
      {"seed", r.seed},
      {"config", to_json(cfg)},
      {"losses", std::move(losses)},
      {"initial_loss", finite_or_null(r.initial_loss)},
      {"reference_loss", finite_or_null(r.reference_loss)},
      {"final_loss", finite_or_null(r.final_loss)},
      {"diverged", r.diverged},
      {"rounds_completed", r.rounds_completed},
      {"consumed_entries", r.consumed_entries},
      {"applied_updates", r.applied_updates},
      {"dropped_updates", r.dropped_updates},
      {"in_flight_at_end", r.in_flight_at_end},
      {"sigma_bar", finite_or_null(r.sigma_bar)},
      {"rho", {{"max", finite_or_null(r.rho_max)}, {"le_1_fraction", finite_or_null(r.rho_le_1_fraction)}}},
      {"mean_fragment_wait", r.mean_fragment_wait},
      {"theory", theory_to_json(audit, rate)},
  };
}

std::string result_filename(const RunConfig& cfg) {
  return config_hash(cfg) + "_s" + std::to_string(cfg.seed) + ".json";
}

std::string serialize_document(const json& document) { return document.dump(2) + "\n"; }

fs::path write_result(const RunOutcome& outcome, const fs::path& dir) {
  fs::create_directories(dir);
  const fs::path path = dir / result_filename(outcome.config);
  const fs::path tmp = fs::path(path).concat(".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << serialize_document(outcome.document);
  }
  fs::rename(tmp, path);
  return path;
}

// ---------------------------------------------------------------------------

namespace {

std::string format_number(double x) {
  std::ostringstream os;
  os << x;
  return os.str();
}

template <typename T, typename Fn>
std::vector<T> read_array(const json& j, const std::string& path, std::vector<std::string>& errors,
                          Fn&& convert) {
  std::vector<T> out;
  if (!j.is_array()) {
    errors.push_back(path + ": expected array");
    return out;
  }
  for (std::size_t i = 0; i < j.size(); ++i) {
    try {
      out.push_back(convert(j[i]));
    } catch (const std::exception& e) {
      errors.push_back(path + "[" + std::to_string(i) + "]: " + e.what());
    }
  }
  return out;
}

double as_number(const json& v) {
  if (v.is_string() && v.get<std::string>() == "inf") return kNoCutoff;
  if (!v.is_number()) throw std::invalid_argument("expected number");
  return v.get<double>();
}

}  // namespace

SweepSpec sweep_spec_from_json(const json& j) {
  std::vector<std::string> errors;
  SweepSpec spec;
  if (!j.is_object()) throw ConfigError({"<root>: expected object"});

  static const std::vector<std::string> known{"version", "name",  "base", "methods", "method_overrides",
                                              "delays",  "seeds", "grid", "jobs"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) errors.push_back(key + ": unknown key");
  }
  if (!j.contains("version") || j.at("version") != kConfigVersion) {
    errors.push_back("version: expected " + std::to_string(kConfigVersion));
  }
  if (j.contains("name")) {
    if (j.at("name").is_string()) {
      spec.name = j.at("name").get<std::string>();
    } else {
      errors.push_back("name: expected string");
    }
  }
  if (j.contains("jobs")) {
    if (j.at("jobs").is_number_integer() && j.at("jobs").get<int>() >= 1) {
      spec.jobs = j.at("jobs").get<int>();
    } else {
      errors.push_back("jobs: expected integer >= 1");
    }
  }

  json base = j.value("base", json::object());
  if (!base.is_object()) {
    errors.push_back("base: expected object");
    base = json::object();
  }
  for (const char* per_cell : {"method", "seed", "delay"}) {
    if (base.contains(per_cell)) errors.push_back(std::string("base.") + per_cell + ": set per cell by the sweep");
  }
  if (base.contains("outer")) {
    spec.base_outer = base.at("outer");
    base.erase("outer");
  }
  base["version"] = kConfigVersion;
  try {
    spec.base = run_config_from_json(base);
  } catch (const ConfigError& e) {
    for (const auto& msg : e.errors()) errors.push_back("base." + msg);
  }

  if (j.contains("method_overrides")) {
    spec.method_overrides = j.at("method_overrides");
    if (!spec.method_overrides.is_object()) errors.push_back("method_overrides: expected object");
  }

  if (!j.contains("methods")) errors.push_back("methods: missing");
  else {
    spec.methods = read_array<Method>(j.at("methods"), "methods", errors, [](const json& v) {
      if (!v.is_string()) throw std::invalid_argument("expected method name");
      return parse_method(v.get<std::string>());
    });
  }
  if (!j.contains("delays")) errors.push_back("delays: missing");
  else if (!j.at("delays").is_array()) errors.push_back("delays: expected array");
  else {
    for (std::size_t i = 0; i < j.at("delays").size(); ++i) {
      spec.delays.push_back(delay_from_json(j.at("delays")[i], errors, "delays[" + std::to_string(i) + "]"));
    }
  }
  if (!j.contains("seeds")) errors.push_back("seeds: missing");
  else {
    spec.seeds = read_array<std::uint64_t>(j.at("seeds"), "seeds", errors, [](const json& v) {
      if (!v.is_number_unsigned()) throw std::invalid_argument("expected nonnegative integer");
      return v.get<std::uint64_t>();
    });
  }

  if (j.contains("grid")) {
    const json& g = j.at("grid");
    if (!g.is_object()) {
      errors.push_back("grid: expected object");
    } else {
      for (const auto& [key, value] : g.items()) {
        const std::string path = "grid." + key;
        if (key == "alpha") spec.grid.alpha = read_array<double>(value, path, errors, as_number);
        else if (key == "tau_cut") spec.grid.tau_cut = read_array<double>(value, path, errors, as_number);
        else if (key == "eta") spec.grid.eta = read_array<double>(value, path, errors, as_number);
        else if (key == "mu") spec.grid.mu = read_array<double>(value, path, errors, as_number);
        else if (key == "gate_placement") {
          spec.grid.gate_placement = read_array<GatePlacement>(value, path, errors, [](const json& v) {
            if (!v.is_string()) throw std::invalid_argument("expected \"before\" or \"after\"");
            return parse_gate_placement(v.get<std::string>());
          });
        } else if (key == "fragment_budget") {
          spec.grid.fragment_budget = read_array<std::size_t>(value, path, errors, [](const json& v) {
            if (!v.is_number_unsigned()) throw std::invalid_argument("expected nonnegative integer");
            return v.get<std::size_t>();
          });
        } else {
          errors.push_back(path + ": unknown grid axis");
        }
      }
    }
  }

  if (!errors.empty()) throw ConfigError(std::move(errors));
  return spec;
}

SweepSpec load_sweep_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({path + ": cannot open sweep file"});
  try {
    return sweep_spec_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError({path + ": " + e.what()});
  }
}

std::vector<SweepCell> expand_sweep(const SweepSpec& spec) {
  std::vector<std::string> errors;
  if (spec.methods.empty()) errors.push_back("methods: empty");
  if (spec.delays.empty()) errors.push_back("delays: empty");
  if (spec.seeds.empty()) errors.push_back("seeds: empty");
  if (!errors.empty()) throw ConfigError(std::move(errors));

  // Empty axes contribute a single "unset" coordinate.
  auto axis = [](const auto& values) {
    using T = typename std::decay_t<decltype(values)>::value_type;
    std::vector<std::optional<T>> out;
    if (values.empty()) out.push_back(std::nullopt);
    for (const auto& v : values) out.push_back(v);
    return out;
  };
  const auto alphas = axis(spec.grid.alpha);
  const auto cuts = axis(spec.grid.tau_cut);
  const auto etas = axis(spec.grid.eta);
  const auto mus = axis(spec.grid.mu);
  const auto placements = axis(spec.grid.gate_placement);
  const auto budgets = axis(spec.grid.fragment_budget);

  std::vector<SweepCell> cells;
  for (Method method : spec.methods) {
    json outer = spec.base_outer.is_object() ? spec.base_outer : json::object();
    const std::string name(to_string(method));
    if (spec.method_overrides.contains(name)) {
      for (const auto& [k, v] : spec.method_overrides.at(name).items()) outer[k] = v;
    }
    std::vector<std::string> outer_errors;
    const OuterConfig method_outer = outer_config_from_json(outer, method, outer_errors, "outer[" + name + "]");
    errors.insert(errors.end(), outer_errors.begin(), outer_errors.end());

    for (const auto& delay : spec.delays) {
      for (const auto& alpha : alphas)
        for (const auto& cut : cuts)
          for (const auto& eta : etas)
            for (const auto& mu : mus)
              for (const auto& placement : placements)
                for (const auto& budget : budgets) {
                  std::ostringstream variant;
                  auto tag = [&variant](const std::string& s) {
                    if (variant.tellp() > 0) variant << ' ';
                    variant << s;
                  };
                  RunConfig base = spec.base;
                  base.outer = method_outer;
                  base.delay = delay;
                  if (alpha) {
                    base.outer.gate.alpha = *alpha;
                    tag("alpha=" + format_number(*alpha));
                  }
                  if (cut) {
                    base.outer.gate.tau_cut = *cut;
                    tag("tau_cut=" + (std::isinf(*cut) ? std::string("inf") : format_number(*cut)));
                  }
                  if (eta) {
                    base.outer.eta = *eta;
                    tag("eta=" + format_number(*eta));
                  }
                  if (mu) {
                    base.outer.mu = *mu;
                    tag("mu=" + format_number(*mu));
                  }
                  if (placement) {
                    base.outer.gate_placement = *placement;
                    tag("placement=" + std::string(to_string(*placement)));
                  }
                  if (budget) {
                    base.fragment_budget = *budget;
                    tag("K_f=" + std::to_string(*budget));
                  }
                  for (std::uint64_t seed : spec.seeds) {
                    SweepCell cell;
                    cell.index = cells.size();
                    cell.config = base;
                    cell.config.seed = seed;
                    cell.method = name;
                    cell.schedule = delay.label();
                    cell.variant = variant.str();
                    for (const auto& e : cell.config.validate()) {
                      errors.push_back("cell " + std::to_string(cell.index) + ": " + e);
                    }
                    cells.push_back(std::move(cell));
                  }
                }
    }
  }
  if (!errors.empty()) throw ConfigError(std::move(errors));
  return cells;
}

std::pair<double, double> mean_and_std(const std::vector<double>& xs) {
  if (xs.empty()) return {std::nan(""), std::nan("")};
  double sum = 0.0;
  for (double x : xs) sum += x;
  const double mean = sum / static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

std::vector<SummaryRow> summarize(const std::vector<SweepCell>& cells, const fs::path& dir) {
  using Key = std::tuple<std::string, std::string, std::string>;
  std::vector<Key> order;
  std::map<Key, SummaryRow> rows;
  std::map<Key, std::vector<double>> finals;
  for (const auto& cell : cells) {
    Key key{cell.method, cell.schedule, cell.variant};
    auto [it, inserted] = rows.try_emplace(key);
    if (inserted) {
      order.push_back(key);
      it->second.method = cell.method;
      it->second.schedule = cell.schedule;
      it->second.variant = cell.variant;
    }
    SummaryRow& row = it->second;
    ++row.expected;
    const fs::path path = dir / result_filename(cell.config);
    std::ifstream in(path);
    if (!in) continue;
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::parse_error&) {
      continue;
    }
    ++row.completed;
    if (doc.value("diverged", false)) ++row.diverged;
    const json& fl = doc["final_loss"];
    if (fl.is_number()) finals[key].push_back(fl.get<double>());
  }
  std::vector<SummaryRow> out;
  for (const auto& key : order) {
    SummaryRow row = rows.at(key);
    const auto& xs = finals[key];
    row.finite = xs.size();
    std::tie(row.mean, row.stddev) = mean_and_std(xs);
    out.push_back(row);
  }
  return out;
}

void write_summary_csv(const std::vector<SummaryRow>& rows, std::ostream& out) {
  out << "method,schedule,variant,expected,completed,diverged,n_finite,mean_final_loss,std_final_loss\n";
  out << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.method << ',' << r.schedule << ',' << '"' << r.variant << '"' << ',' << r.expected << ','
        << r.completed << ',' << r.diverged << ',' << r.finite << ',';
    if (std::isfinite(r.mean)) out << r.mean;
    out << ',';
    if (std::isfinite(r.stddev)) out << r.stddev;
    out << '\n';
  }
}

void write_summary_table(const std::vector<SummaryRow>& rows, std::ostream& out) {
  std::vector<std::array<std::string, 5>> cells;
  cells.push_back({"method", "schedule", "variant", "final loss (mean ± std)", "notes"});
  for (const auto& r : rows) {
    std::ostringstream value;
    if (r.finite > 0) {
      value << std::fixed << std::setprecision(4) << r.mean << " ± " << r.stddev;
    } else {
      value << "-";
    }
    std::ostringstream notes;
    if (r.diverged > 0) notes << "DIVERGED " << r.diverged << "/" << r.completed;
    if (r.completed < r.expected) {
      if (notes.tellp() > 0) notes << "; ";
      notes << "missing " << (r.expected - r.completed) << "/" << r.expected;
    }
    cells.push_back({r.method, r.schedule, r.variant.empty() ? "-" : r.variant, value.str(), notes.str()});
  }
  std::array<std::size_t, 5> width{};
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::size_t c = 0; c < 5; ++c) {
      out << std::left << std::setw(static_cast<int>(width[c] + 2)) << cells[i][c];
    }
    out << '\n';
    if (i == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      out << std::string(total, '-') << '\n';
    }
  }
}

int jobs_from_env(int fallback) {
  const char* env = std::getenv("STALE_LAB_JOBS");
  if (env == nullptr) return fallback;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1) return fallback;
  return static_cast<int>(v);
}

SweepReport run_sweep(const SweepSpec& spec, const fs::path& dir, int jobs) {
  const auto cells = expand_sweep(spec);
  fs::create_directories(dir);
  SweepReport report;
  report.cells = cells.size();

  std::vector<const SweepCell*> pending;
  for (const auto& cell : cells) {
    if (fs::exists(dir / result_filename(cell.config))) {
      ++report.skipped;
    } else {
      pending.push_back(&cell);
    }
  }

  std::atomic<std::size_t> next{0};
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < pending.size(); i = next++) {
      const SweepCell& cell = *pending[i];
      try {
        write_result(execute_run(cell.config), dir);
        std::lock_guard lock(mu);
        ++report.ran;
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        report.failures.push_back("cell " + std::to_string(cell.index) + ": " + e.what());
      }
    }
  };
  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(pending.size())));
  {
    std::vector<std::jthread> threads;
    for (int t = 1; t < n; ++t) threads.emplace_back(worker);
    worker();
  }
  std::sort(report.failures.begin(), report.failures.end());

  report.rows = summarize(cells, dir);
  {
    std::ofstream csv(dir / "summary.csv", std::ios::trunc);
    write_summary_csv(report.rows, csv);
  }
  {
    std::ofstream txt(dir / "summary.txt", std::ios::trunc);
    txt << spec.name << "\n\n";
    write_summary_table(report.rows, txt);
  }
  return report;
}

// ---------------------------------------------------------------------------

std::vector<GateRow> gate_table(const StalenessGate& gate, int tau_lo, int tau_hi) {
  gate.validate();
  if (tau_lo < 0 || tau_hi < tau_lo) throw std::invalid_argument("tau range must satisfy 0 <= lo <= hi");
  std::vector<GateRow> rows;
  double running = 0.0;
  for (int t = tau_lo; t <= tau_hi; ++t) {
    GateRow row;
    const double tau = t;
    row.tau = t;
    row.gamma = cosine_gate(tau, gate.tau_cut);
    row.decay = exponential_decay(tau, gate.alpha);
    row.sigma = staleness_weight(tau, gate);
    row.tau_sigma = tau * row.sigma;
    running = std::max(running, row.tau_sigma);
    row.running_max = running;
    rows.push_back(row);
  }
  return rows;
}

void write_gate_table(const std::vector<GateRow>& rows, const StalenessGate& gate, std::ostream& out) {
  out << "alpha = " << gate.alpha << ", tau_cut = "
      << (gate.has_cutoff() ? format_number(gate.tau_cut) : std::string("inf"));
  if (gate.alpha > 0.0) {
    out << ", 1/(e*alpha) = " << std::setprecision(10) << tau_decay_peak(gate.alpha);
  }
  out << "\n";
  out << std::right << std::setw(6) << "tau" << std::setw(16) << "gamma" << std::setw(16) << "exp(-a*tau)"
      << std::setw(16) << "sigma" << std::setw(16) << "tau*sigma" << std::setw(16) << "running max" << "\n";
  for (const auto& r : rows) {
    out << std::setw(6) << r.tau << std::scientific << std::setprecision(6);
    out << std::setw(16) << r.gamma << std::setw(16) << r.decay << std::setw(16) << r.sigma << std::setw(16)
        << r.tau_sigma << std::setw(16) << r.running_max << "\n";
    out << std::defaultfloat;
  }
}

void write_gate_csv(const std::vector<GateRow>& rows, const StalenessGate& gate, std::ostream& out) {
  out << "tau,gamma,decay,sigma,tau_sigma,running_max,peak_reference\n";
  out << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.tau << ',' << r.gamma << ',' << r.decay << ',' << r.sigma << ',' << r.tau_sigma << ','
        << r.running_max << ',';
    if (gate.alpha > 0.0) out << tau_decay_peak(gate.alpha);
    out << '\n';
  }
}

}  // namespace stale_lab
