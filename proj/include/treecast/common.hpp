#pragma once
// Shared infrastructure: error taxonomy, deterministic randomness, numeric
// formatting helpers used across the library.

#include <cstdint>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>

namespace treecast {

// Base class for every library error; subclasses name the failed contract.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

#define TREECAST_ERROR(Name)                                              \
  struct Name : Error {                                                   \
    explicit Name(const std::string& what) : Error(#Name ": " + what) {}  \
  }

// Chains and spectra.
TREECAST_ERROR(NotErgodic);
TREECAST_ERROR(AboveThreshold);
TREECAST_ERROR(DegeneratePi);

// Partition chains.
TREECAST_ERROR(EmptyInputSet);
TREECAST_ERROR(NotCompatible);
TREECAST_ERROR(NotIrreducible);
TREECAST_ERROR(NonTermination);
TREECAST_ERROR(MeasurabilityViolation);

// Trees.
TREECAST_ERROR(TooLarge);
TREECAST_ERROR(Extinct);
TREECAST_ERROR(HeightOutOfRange);
TREECAST_ERROR(EmptySet);

// Expectation engine.
TREECAST_ERROR(BadDistribution);
TREECAST_ERROR(NodeNotInTree);
TREECAST_ERROR(OverlappingU);

// Polynomial decompositions.
TREECAST_ERROR(TooSmall);
TREECAST_ERROR(NotCentered);
TREECAST_ERROR(BadSupport);
TREECAST_ERROR(NotDegreeOne);

// Analysis.
TREECAST_ERROR(ZeroVariance);
TREECAST_ERROR(ZeroLikelihood);
TREECAST_ERROR(NotClosed);

#undef TREECAST_ERROR

// Deterministic random source.  Every random draw in the library goes
// through this wrapper: doubles are derived from raw mt19937 words rather
// than <random> distribution adaptors (whose output is implementation
// defined), so seeded runs reproduce bit-for-bit on any platform.
class Rng {
 public:
  explicit Rng(std::uint32_t seed) : mt_(seed) {}

  // Next raw 32-bit word.
  std::uint32_t word() { return mt_(); }

  // Uniform double in [0, 1).
  double u01() { return word() * (1.0 / 4294967296.0); }

  // Uniform double in [a, b).
  double uniform(double a, double b) { return a + (b - a) * u01(); }

  // Uniform integer in {0, ..., n-1}.
  int index(int n) {
    int k = static_cast<int>(u01() * n);
    return k < n ? k : n - 1;
  }

 private:
  std::mt19937 mt_;
};

// Renders a double with 17 significant digits (enough to round-trip).
inline std::string fmt17(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

namespace tol {
// Structural validation.
inline constexpr double kRowSum = 1e-12;
// Residual for stationary-distribution solves.
inline constexpr double kStationary = 1e-12;
// Moment identities of the site basis.
inline constexpr double kMoment = 1e-10;
// Default tolerance of the exact-expectation engine.
inline constexpr double kEngine = 1e-9;
// Pointwise identities between polynomial decompositions.
inline constexpr double kPointwise = 1e-10;
// Identities that hold to machine precision.
inline constexpr double kExact = 1e-12;
}  // namespace tol

}  // namespace treecast
