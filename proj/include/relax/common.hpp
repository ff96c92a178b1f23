#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace relax {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Rng = std::mt19937_64;

// Error taxonomy. The CLI maps these onto exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed input file (CSV, schema, parameter file, snapshot).
struct ParseError : Error {
  using Error::Error;
};

/// Invalid configuration or mismatched components.
struct ConfigError : Error {
  using Error::Error;
};

/// Remote predictor unreachable, timed out, or spoke the protocol wrongly.
struct TransportError : Error {
  using Error::Error;
};

/// Non-finite values during training or inference.
struct NumericError : Error {
  using Error::Error;
};

/// Nearest-CT found no training row with a different predicted class.
struct NoCounterfactual : Error {
  using Error::Error;
};

/// Caller broke an operation's precondition (e.g. reused a feature in an episode).
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

enum class Task { Classification, Regression };

inline const char* to_string(Task t) {
  return t == Task::Classification ? "classification" : "regression";
}

}  // namespace relax
