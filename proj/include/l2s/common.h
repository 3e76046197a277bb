// Shared error type and deterministic random source used across the toolkit.

#ifndef L2S_COMMON_H_
#define L2S_COMMON_H_

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace l2s {

enum class ErrorKind {
  kFormat,         // malformed container bytes
  kTruncated,      // payload shorter than the header declares
  kSchema,         // missing or unexpected columns / keys
  kValidation,     // value out of its allowed domain
  kConfig,         // inconsistent configuration
  kCapacity,       // not enough data for the request
  kShape,          // dimension mismatch
  kNumeric,        // non-finite intermediate or result
  kInfeasible,     // CTC target cannot be aligned
  kIncompatible,   // checkpoint/config hash mismatch
  kInsufficient,   // signal too short for a metric
  kIo,
};

std::string_view ErrorKindName(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(ErrorKindName(kind)) + " error: " + what),
        kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

// Seeded generator whose draws are identical on every platform. The standard
// distributions are implementation-defined, so uniform and normal variates are
// derived from the raw mt19937_64 stream here.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t NextU64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double Uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double Uniform(double lo, double hi) { return lo + (hi - lo) * Uniform(); }

  // Uniform integer in [0, n); rejection sampling removes modulo bias.
  uint64_t Below(uint64_t n) {
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  // Standard normal via Box-Muller; the second variate is cached.
  double Normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = Uniform();
    } while (u1 <= 0.0);
    const double u2 = Uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    constexpr double kTwoPi = 6.283185307179586476925286766559;
    spare_ = r * std::sin(kTwoPi * u2);
    has_spare_ = true;
    return r * std::cos(kTwoPi * u2);
  }

  template <typename Vec>
  void Shuffle(Vec& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(Below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Mixes several integers into one seed (splitmix64 finalizer).
uint64_t MixSeed(uint64_t a, uint64_t b, uint64_t c = 0);

// FNV-1a over bytes, used for config fingerprints.
uint64_t Fnv1a64(std::string_view bytes);

}  // namespace l2s

#endif  // L2S_COMMON_H_
