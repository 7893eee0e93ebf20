#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>
#include <openssl/evp.h>

namespace corona {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

using UserId = std::uint32_t;
using ItemId = std::uint32_t;

enum class Stage { Preference, Intent };

inline const char* to_string(Stage s) { return s == Stage::Preference ? "preference" : "intent"; }

// Failure classes; the CLI maps each to a distinct exit code.
enum class ErrorKind { Validation, Lookup, Format, Backend, MissingArtifact, Training };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ValidationError : Error {
  explicit ValidationError(const std::string& w) : Error(ErrorKind::Validation, w) {}
};

struct LookupError : Error {
  explicit LookupError(const std::string& w) : Error(ErrorKind::Lookup, w) {}
};

struct MissingArtifactError : Error {
  explicit MissingArtifactError(const std::string& w) : Error(ErrorKind::MissingArtifact, w) {}
};

struct TrainingError : Error {
  explicit TrainingError(const std::string& w) : Error(ErrorKind::Training, w) {}
};

class BackendError : public Error {
 public:
  BackendError(const std::string& w, bool retryable) : Error(ErrorKind::Backend, w), retryable_(retryable) {}
  bool retryable() const noexcept { return retryable_; }

 private:
  bool retryable_;
};

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Backend:
      return 3;
    case ErrorKind::MissingArtifact:
      return 4;
    default:
      return 2;
  }
}

inline std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, data.data(), data.size()) != 1 || EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha256 failed");
  }
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

// FNV-1a, used where a cheap stable 64-bit hash of a string is needed (seeding).
constexpr std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

inline double softplus(double x) {
  // log(1 + e^x) without overflow for large |x|.
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace corona
