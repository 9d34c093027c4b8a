#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "stale_lab/objective.hpp"
#include "stale_lab/optim.hpp"

namespace stale_lab {

inline constexpr int kConfigVersion = 1;

enum class DelayKind { fixed, uniform_int, exponential };

std::string_view to_string(DelayKind k);
DelayKind parse_delay_kind(std::string_view name);

/// Integer delay per (worker, round). The seed is not part of the config
/// file; runs derive it from their master seed.
struct DelaySchedule {
  DelayKind kind = DelayKind::fixed;
  int tau = 0;
  int lo = 0;
  int hi = 16;
  double rate = 0.25;
  int tau_max = 16;
  std::uint64_t seed = 0;

  static DelaySchedule fixed(int tau) { return {DelayKind::fixed, tau}; }
  static DelaySchedule uniform(int lo, int hi);
  static DelaySchedule exponential(double rate, int tau_max);

  std::vector<std::string> validate() const;
  /// Short human label, e.g. "tau=8", "uniform[0,16]", "exp(0.25)".
  std::string label() const;
};

struct RunConfig {
  ObjectiveSpec objective{};
  int workers = 4;
  int inner_steps = 8;
  int rounds = 200;
  OuterConfig outer = OuterConfig::defaults(Method::cgad);
  InnerConfig inner{};
  DelaySchedule delay{};
  std::size_t fragments = 1;
  /// Fragments synchronized per round; 0 means all.
  std::size_t fragment_budget = 0;
  bool quantize_queue = false;
  std::uint64_t seed = 0;
  std::size_t eval_batch_size = 256;

  std::size_t effective_budget() const { return fragment_budget == 0 ? fragments : fragment_budget; }

  /// Field-path messages ("outer.beta1: must be in [0, 1)"); empty if valid.
  std::vector<std::string> validate() const;
};

/// Raised for unparseable or invalid configuration. Carries one message per
/// offending field path.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> errors);
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  std::vector<std::string> errors_;
};

/// Parses a versioned run config. Omitted fields take defaults (outer fields
/// take the method's defaults); unknown keys are errors.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& cfg);
nlohmann::json to_json(const ObjectiveSpec& spec);
nlohmann::json to_json(const OuterConfig& cfg);
nlohmann::json to_json(const DelaySchedule& d);

/// Parses outer/delay/objective sections on their own, with `path` used as
/// the prefix of error messages.
OuterConfig outer_config_from_json(const nlohmann::json& j, Method method,
                                   std::vector<std::string>& errors, const std::string& path);
DelaySchedule delay_from_json(const nlohmann::json& j, std::vector<std::string>& errors,
                              const std::string& path);

/// Compact, key-sorted serialization of the resolved config.
std::string canonical_json(const RunConfig& cfg);
/// Hex FNV-1a digest of canonical_json.
std::string config_hash(const RunConfig& cfg);

RunConfig load_run_config(const std::string& path);

}  // namespace stale_lab
