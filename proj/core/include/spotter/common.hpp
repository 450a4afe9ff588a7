#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace spotter {

// Training/inference arithmetic type. The float build is the production
// path; the double build exists so finite-difference checks can run at
// tighter tolerances.
#ifdef SPOTTER_SCALAR_F64
using scalar = double;
#else
using scalar = float;
#endif

inline constexpr bool kScalarIsDouble = sizeof(scalar) == sizeof(double);

enum class Mode { Train, Infer };

// Shape/dimension disagreement between tensors or layers.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// A precondition stated by an operation's contract was violated.
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Configuration file / override problems.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dataset and file-system problems (missing images, malformed label lines).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// CTC target cannot be aligned within the available timesteps.
struct CtcInfeasibleError : ContractError {
  explicit CtcInfeasibleError(const std::string& msg) : ContractError(msg) {}
};

// Training diverged (NaN loss) and the retry policy was exhausted.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace spotter
