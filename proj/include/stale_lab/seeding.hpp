#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace stale_lab {

/// 64-bit FNV-1a. Stable across platforms and builds; used for config
/// digests and seed derivation.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

/// Derives an independent stream seed from a parent seed and a purpose tag,
/// optionally refined by integer coordinates (worker id, round, ...).
std::uint64_t derive_seed(std::uint64_t parent, std::string_view stream);
std::uint64_t derive_seed(std::uint64_t parent, std::string_view stream, std::uint64_t a);
std::uint64_t derive_seed(std::uint64_t parent, std::string_view stream, std::uint64_t a,
                          std::uint64_t b);

std::string to_hex(std::uint64_t v);

/// Engine plus portable transforms. std:: distributions are implementation
/// defined, so draws go through these instead.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t bits() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  double normal();

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace stale_lab
