#pragma once

#include <stdexcept>
#include <string>

namespace tsclab {

/// Invalid user-supplied configuration (dimensions, limits, mismatched options).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Network or flow document that fails validation.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RoutingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition (bad action index, stale trajectory, ...).
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Replay buffer holds fewer episodes than the requested batch.
class NotReadyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Output files or directories that cannot be created or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tsclab
