#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace thermalign {

// Base for every error this library throws. Subsystems define narrow
// subclasses so callers can catch what they can actually handle.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration, wherever it is detected.
struct ConfigError : Error {
  using Error::Error;
};

// 64-bit FNV-1a. Content digest for weight tensors and stable id hashing;
// not cryptographic, just cheap and well-distributed.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

std::string to_hex(std::uint64_t v);

// splitmix64 finalizer. Derives decorrelated sub-seeds from a master seed so
// each stage/scene draws from an independent stream.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return mix64(seed ^ mix64(stream));
}

// Runs fn(i) for i in [0,n) on up to `threads` workers. fn must not touch
// shared mutable state except through its own index. The first exception, if
// any, is rethrown on the calling thread after all workers join.
void parallel_for(std::size_t n, int threads,
                  const std::function<void(std::size_t)>& fn);

// 24832 -> "24,832"
std::string format_thousands(std::uint64_t v);

// snprintf-style helper (gcc 11 has no std::format).
std::string format_double(const char* fmt, double v);

}  // namespace thermalign
