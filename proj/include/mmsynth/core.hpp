#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mmsynth {

inline constexpr std::string_view kVersionTag = "mmsynth-0.1.0";

// Error taxonomy. Everything user-correctable derives from ValidationError
// (CLI exit code 2); IoError and plain Error map to runtime failures (exit 3).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ValidationError : Error {
  using Error::Error;
};

struct VocabularyError : ValidationError {
  using ValidationError::ValidationError;
};
struct ConfigError : ValidationError {
  using ValidationError::ValidationError;
};
struct ShapeError : ValidationError {
  using ValidationError::ValidationError;
};
struct TaskError : ValidationError {
  using ValidationError::ValidationError;
};
struct ConditioningError : ValidationError {
  using ValidationError::ValidationError;
};
struct ScheduleError : ValidationError {
  using ValidationError::ValidationError;
};
struct ConstraintError : ValidationError {
  using ValidationError::ValidationError;
};
struct UntrainableSampleError : ValidationError {
  using ValidationError::ValidationError;
};

struct IoError : Error {
  using Error::Error;
};

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t hash_mix(uint64_t a, uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

inline std::string hex64(uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

}  // namespace mmsynth
