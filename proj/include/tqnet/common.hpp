#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace tqnet {

// Error taxonomy shared across modules. Mapped to CLI exit codes by tools/.
struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_str(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Deterministic per-sample rng streams: seed mixed from
// (global seed, sample id, role tag). Independent of thread scheduling.
inline std::mt19937_64 derived_rng(std::uint64_t global_seed, std::string_view id,
                                   std::uint64_t role) {
  std::uint64_t s = splitmix64(global_seed ^ splitmix64(hash_str(id)) ^
                               splitmix64(role * 0x9e3779b97f4a7c15ULL + 1));
  return std::mt19937_64(s);
}

inline double uniform(std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  // fixed-width mapping so streams are reproducible across stdlib versions
  const double u = double(rng() >> 11) * 0x1.0p-53;
  return lo + u * (hi - lo);
}

inline std::int64_t uniform_int(std::mt19937_64& rng, std::int64_t lo, std::int64_t hi) {
  // inclusive bounds
  const std::uint64_t span = std::uint64_t(hi - lo) + 1;
  return lo + std::int64_t(rng() % span);
}

inline double normal(std::mt19937_64& rng) {
  // Box-Muller, polar-free form; two uniforms per draw keeps the stream simple
  double u1 = uniform(rng);
  double u2 = uniform(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace tqnet
