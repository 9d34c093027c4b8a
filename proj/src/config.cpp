#include "stale_lab/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "stale_lab/seeding.hpp"

namespace stale_lab {

using nlohmann::json;

std::string_view to_string(DelayKind k) {
  switch (k) {
    case DelayKind::fixed:
      return "fixed";
    case DelayKind::uniform_int:
      return "uniform_int";
    case DelayKind::exponential:
      return "exponential";
  }
  return "unknown";
}

DelayKind parse_delay_kind(std::string_view name) {
  if (name == "fixed") return DelayKind::fixed;
  if (name == "uniform_int" || name == "uniform") return DelayKind::uniform_int;
  if (name == "exponential") return DelayKind::exponential;
  throw std::invalid_argument("unknown delay kind '" + std::string(name) + "'");
}

DelaySchedule DelaySchedule::uniform(int lo, int hi) {
  DelaySchedule d;
  d.kind = DelayKind::uniform_int;
  d.lo = lo;
  d.hi = hi;
  return d;
}

DelaySchedule DelaySchedule::exponential(double rate, int tau_max) {
  DelaySchedule d;
  d.kind = DelayKind::exponential;
  d.rate = rate;
  d.tau_max = tau_max;
  return d;
}

std::vector<std::string> DelaySchedule::validate() const {
  std::vector<std::string> errors;
  switch (kind) {
    case DelayKind::fixed:
      if (tau < 0) errors.push_back("tau: must be >= 0");
      break;
    case DelayKind::uniform_int:
      if (lo < 0) errors.push_back("lo: must be >= 0");
      if (hi < lo) errors.push_back("hi: must be >= lo");
      break;
    case DelayKind::exponential:
      if (!(rate > 0.0) || !std::isfinite(rate)) errors.push_back("rate: must be > 0");
      if (tau_max < 0) errors.push_back("tau_max: must be >= 0");
      break;
  }
  return errors;
}

std::string DelaySchedule::label() const {
  std::ostringstream os;
  switch (kind) {
    case DelayKind::fixed:
      os << "tau=" << tau;
      break;
    case DelayKind::uniform_int:
      os << "uniform[" << lo << "," << hi << "]";
      break;
    case DelayKind::exponential:
      os << "exp(" << rate << ")";
      break;
  }
  return os.str();
}

ConfigError::ConfigError(std::vector<std::string> errors)
    : std::runtime_error([&] {
        std::string msg = "invalid configuration:";
        for (const auto& e : errors) msg += "\n  " + e;
        return msg;
      }()),
      errors_(std::move(errors)) {}

namespace {

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

void prefix_all(const std::vector<std::string>& src, const std::string& path,
                std::vector<std::string>& dst) {
  for (const auto& e : src) dst.push_back(join(path, e));
}

// Reads typed fields out of one JSON object and reports unknown keys.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path, std::vector<std::string>& errors)
      : j_(j), path_(std::move(path)), errors_(errors) {
    if (!j_.is_object()) errors_.push_back((path_.empty() ? "<root>" : path_) + ": expected object");
  }

  ~ObjectReader() {
    if (!j_.is_object()) return;
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.contains(key)) errors_.push_back(join(path_, key) + ": unknown key");
    }
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.is_object() && j_.contains(key);
  }

  const json* sub(const std::string& key) {
    if (!has(key)) return nullptr;
    return &j_.at(key);
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw std::invalid_argument("expected boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw std::invalid_argument("expected integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
            throw std::invalid_argument("expected nonnegative integer");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw std::invalid_argument("expected number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw std::invalid_argument("expected string");
      }
      out = v.get<T>();
    } catch (const std::exception& e) {
      errors_.push_back(join(path_, key) + ": " + e.what());
    }
  }

  // Number, or the string "inf".
  void read_extended(const std::string& key, double& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (v.is_string() && (v.get<std::string>() == "inf" || v.get<std::string>() == "infinity")) {
      out = kNoCutoff;
    } else if (v.is_number()) {
      out = v.get<double>();
    } else {
      errors_.push_back(join(path_, key) + ": expected number or \"inf\"");
    }
  }

  const std::string& path() const { return path_; }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

json extended(double x) {
  if (std::isinf(x)) return "inf";
  return x;
}

ObjectiveSpec objective_from_json(const json& j, std::vector<std::string>& errors,
                                  const std::string& path) {
  ObjectiveSpec spec;
  ObjectReader r(j, path, errors);
  std::string kind = std::string(to_string(spec.kind));
  r.read("kind", kind);
  try {
    spec.kind = parse_objective_kind(kind);
  } catch (const std::exception& e) {
    errors.push_back(join(path, "kind") + ": " + e.what());
  }
  r.read("dim", spec.dim);
  r.read("lambda_min", spec.lambda_min);
  r.read("lambda_max", spec.lambda_max);
  r.read("noise_std", spec.noise_std);
  if (const json* layers = r.sub("layers")) {
    if (!layers->is_array()) {
      errors.push_back(join(path, "layers") + ": expected array of widths");
    } else {
      spec.layers.clear();
      for (std::size_t i = 0; i < layers->size(); ++i) {
        const json& w = (*layers)[i];
        if (!w.is_number_unsigned()) {
          errors.push_back(join(path, "layers[" + std::to_string(i) + "]") +
                           ": expected positive integer");
        } else {
          spec.layers.push_back(w.get<std::size_t>());
        }
      }
    }
  }
  r.read("teacher_scale", spec.teacher_scale);
  r.read("label_noise", spec.label_noise);
  r.read("init_scale", spec.init_scale);
  r.read("batch_size", spec.batch_size);
  r.read("seed", spec.seed);
  return spec;
}

InnerConfig inner_from_json(const json& j, std::vector<std::string>& errors,
                            const std::string& path) {
  InnerConfig cfg;
  ObjectReader r(j, path, errors);
  r.read("lr", cfg.lr);
  r.read("beta1", cfg.beta1);
  r.read("beta2", cfg.beta2);
  r.read("epsilon", cfg.epsilon);
  r.read("weight_decay", cfg.weight_decay);
  return cfg;
}

}  // namespace

OuterConfig outer_config_from_json(const json& j, Method method, std::vector<std::string>& errors,
                                   const std::string& path) {
  OuterConfig cfg = OuterConfig::defaults(method);
  ObjectReader r(j, path, errors);
  r.read("eta", cfg.eta);
  r.read("beta1", cfg.beta1);
  r.read("beta2", cfg.beta2);
  r.read("epsilon", cfg.epsilon);
  r.read("mu", cfg.mu);
  r.read("alpha", cfg.gate.alpha);
  r.read_extended("tau_cut", cfg.gate.tau_cut);
  std::string placement(to_string(cfg.gate_placement));
  r.read("gate_placement", placement);
  try {
    cfg.gate_placement = parse_gate_placement(placement);
  } catch (const std::exception& e) {
    errors.push_back(join(path, "gate_placement") + ": " + e.what());
  }
  r.read("buffer_period", cfg.buffer_period);
  return cfg;
}

DelaySchedule delay_from_json(const json& j, std::vector<std::string>& errors,
                              const std::string& path) {
  DelaySchedule d;
  ObjectReader r(j, path, errors);
  std::string kind(to_string(d.kind));
  r.read("kind", kind);
  try {
    d.kind = parse_delay_kind(kind);
  } catch (const std::exception& e) {
    errors.push_back(join(path, "kind") + ": " + e.what());
  }
  r.read("tau", d.tau);
  r.read("lo", d.lo);
  r.read("hi", d.hi);
  r.read("rate", d.rate);
  r.read("tau_max", d.tau_max);
  return d;
}

std::vector<std::string> RunConfig::validate() const {
  std::vector<std::string> errors;
  prefix_all(objective.validate(), "objective", errors);
  if (workers < 1) errors.push_back("workers: must be >= 1");
  if (inner_steps < 1) errors.push_back("inner_steps: must be >= 1");
  if (rounds < 1) errors.push_back("rounds: must be >= 1");
  prefix_all(outer.validate(), "outer", errors);
  prefix_all(inner.validate(), "inner", errors);
  prefix_all(delay.validate(), "delay", errors);
  if (fragments < 1) errors.push_back("fragments.count: must be >= 1");
  if (fragment_budget > fragments) errors.push_back("fragments.budget: must be <= count");
  if (objective.validate().empty()) {
    const std::size_t d = Objective(objective).dim();
    if (fragments > d) errors.push_back("fragments.count: exceeds parameter dimension");
  }
  if (fragment_budget != 0 && fragment_budget < fragments && outer.method == Method::eager) {
    // Eager mixing keeps whole-vector history; partial sync is not defined for it.
    errors.push_back("fragments.budget: partial sync is not supported for method eager");
  }
  if (eval_batch_size < 1) errors.push_back("eval_batch_size: must be >= 1");
  return errors;
}

RunConfig run_config_from_json(const json& j) {
  std::vector<std::string> errors;
  RunConfig cfg;
  {
    ObjectReader r(j, "", errors);
    int version = -1;
    r.read("version", version);
    if (!r.has("version")) {
      errors.push_back("version: missing (expected " + std::to_string(kConfigVersion) + ")");
    } else if (version != kConfigVersion) {
      errors.push_back("version: unsupported " + std::to_string(version));
    }

    std::string method(to_string(cfg.outer.method));
    r.read("method", method);
    Method m = Method::cgad;
    try {
      m = parse_method(method);
    } catch (const std::exception& e) {
      errors.push_back(std::string("method: ") + e.what());
    }
    if (const json* outer = r.sub("outer")) {
      cfg.outer = outer_config_from_json(*outer, m, errors, "outer");
    } else {
      cfg.outer = OuterConfig::defaults(m);
    }
    if (const json* obj = r.sub("objective")) cfg.objective = objective_from_json(*obj, errors, "objective");
    if (const json* inner = r.sub("inner")) cfg.inner = inner_from_json(*inner, errors, "inner");
    if (const json* delay = r.sub("delay")) cfg.delay = delay_from_json(*delay, errors, "delay");
    if (const json* frags = r.sub("fragments")) {
      ObjectReader fr(*frags, "fragments", errors);
      fr.read("count", cfg.fragments);
      fr.read("budget", cfg.fragment_budget);
    }
    r.read("workers", cfg.workers);
    r.read("inner_steps", cfg.inner_steps);
    r.read("rounds", cfg.rounds);
    r.read("quantize_queue", cfg.quantize_queue);
    r.read("seed", cfg.seed);
    r.read("eval_batch_size", cfg.eval_batch_size);
  }
  if (errors.empty()) errors = cfg.validate();
  if (!errors.empty()) throw ConfigError(std::move(errors));
  return cfg;
}

json to_json(const ObjectiveSpec& spec) {
  return json{
      {"kind", to_string(spec.kind)},   {"dim", spec.dim},
      {"lambda_min", spec.lambda_min},  {"lambda_max", spec.lambda_max},
      {"noise_std", spec.noise_std},    {"layers", spec.layers},
      {"teacher_scale", spec.teacher_scale}, {"label_noise", spec.label_noise},
      {"init_scale", spec.init_scale},  {"batch_size", spec.batch_size},
      {"seed", spec.seed},
  };
}

json to_json(const OuterConfig& cfg) {
  return json{
      {"eta", cfg.eta},
      {"beta1", cfg.beta1},
      {"beta2", cfg.beta2},
      {"epsilon", cfg.epsilon},
      {"mu", cfg.mu},
      {"alpha", cfg.gate.alpha},
      {"tau_cut", extended(cfg.gate.tau_cut)},
      {"gate_placement", to_string(cfg.gate_placement)},
      {"buffer_period", cfg.buffer_period},
  };
}

json to_json(const DelaySchedule& d) {
  json j{{"kind", to_string(d.kind)}};
  switch (d.kind) {
    case DelayKind::fixed:
      j["tau"] = d.tau;
      break;
    case DelayKind::uniform_int:
      j["lo"] = d.lo;
      j["hi"] = d.hi;
      break;
    case DelayKind::exponential:
      j["rate"] = d.rate;
      j["tau_max"] = d.tau_max;
      break;
  }
  return j;
}

json to_json(const RunConfig& cfg) {
  return json{
      {"version", kConfigVersion},
      {"objective", to_json(cfg.objective)},
      {"workers", cfg.workers},
      {"inner_steps", cfg.inner_steps},
      {"rounds", cfg.rounds},
      {"method", to_string(cfg.outer.method)},
      {"outer", to_json(cfg.outer)},
      {"inner",
       {{"lr", cfg.inner.lr},
        {"beta1", cfg.inner.beta1},
        {"beta2", cfg.inner.beta2},
        {"epsilon", cfg.inner.epsilon},
        {"weight_decay", cfg.inner.weight_decay}}},
      {"delay", to_json(cfg.delay)},
      {"fragments", {{"count", cfg.fragments}, {"budget", cfg.fragment_budget}}},
      {"quantize_queue", cfg.quantize_queue},
      {"seed", cfg.seed},
      {"eval_batch_size", cfg.eval_batch_size},
  };
}

std::string canonical_json(const RunConfig& cfg) { return to_json(cfg).dump(); }

std::string config_hash(const RunConfig& cfg) { return to_hex(fnv1a64(canonical_json(cfg))); }

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({path + ": cannot open config file"});
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError({path + ": " + e.what()});
  }
  return run_config_from_json(j);
}

}  // namespace stale_lab
