#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace metadvfs {

/// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define METADVFS_ERROR(Name)                 \
  class Name : public Error {                \
   public:                                   \
    explicit Name(const std::string& what)   \
        : Error(#Name ": " + what) {}        \
  }

METADVFS_ERROR(UnknownAttribute);
METADVFS_ERROR(MalformedValue);
METADVFS_ERROR(ParseError);
METADVFS_ERROR(SchemaViolation);
METADVFS_ERROR(InvalidMetadata);
METADVFS_ERROR(NumericalBlowup);
METADVFS_ERROR(TraceMismatch);
METADVFS_ERROR(ArityMismatch);
METADVFS_ERROR(MissingArtifact);
METADVFS_ERROR(MissingStage);
METADVFS_ERROR(InvalidConfig);

#undef METADVFS_ERROR

using Rng = std::mt19937_64;

/// FNV-1a, 64 bit.
constexpr std::uint64_t fnv1a(std::string_view s,
                              std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Named substream of a root seed, e.g. derive_seed(7, "collect.pixel4__tiktok").
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name) {
  return splitmix64(root ^ splitmix64(fnv1a(name)));
}

inline std::uint64_t derive_seed_index(std::uint64_t root, std::uint64_t index) {
  return splitmix64(root ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

/// Hex digest of a byte string (FNV-1a based, not cryptographic).
std::string content_hash(std::string_view bytes);

/// Exact text form of a double ("%a") and its inverse.
std::string hexfloat(double v);
double parse_hexfloat(const std::string& s);

std::string read_text_file(const std::filesystem::path& path);
/// Writes atomically (temp file + rename), creating parent directories.
void write_text_file(const std::filesystem::path& path, const std::string& text);

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Results must be
/// written by index so output never depends on scheduling.
template <class Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn);

}  // namespace metadvfs

#include "metadvfs/detail/parallel.hpp"
