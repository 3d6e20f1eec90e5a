// SPDX-License-Identifier: Apache-2.0
//
// Exception hierarchy shared by all dsa modules. Every error carries a short
// machine-readable kind so the CLI can report it as JSON.

#pragma once

#include <stdexcept>
#include <string>

namespace dsa {

class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct GraphError : Error {
  explicit GraphError(const std::string& m) : Error("graph_error", m) {}
};

struct BudgetError : Error {
  explicit BudgetError(const std::string& m) : Error("budget_error", m) {}
};

struct SolverError : Error {
  explicit SolverError(const std::string& m) : Error("solver_error", m) {}
};

// Raised when every keep probability of a group is pinned at 0 or 1, which
// makes the implicit gradient denominator vanish.
struct SaturationError : Error {
  explicit SaturationError(const std::string& m) : Error("saturation", m) {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error("shape_error", m) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("numeric_error", m) {}
};

struct DataError : Error {
  explicit DataError(const std::string& m) : Error("data_error", m) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config_error", m) {}
};

struct FlowError : Error {
  explicit FlowError(const std::string& m) : Error("flow_error", m) {}
};

}  // namespace dsa
