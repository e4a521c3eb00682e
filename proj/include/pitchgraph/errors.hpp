#pragma once

#include <stdexcept>
#include <string>

namespace pitchgraph {

/// Invalid or infeasible configuration value.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Tensor dimension mismatch.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Out-of-range index (e.g. a class label outside [0, C)).
struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Misuse of the reverse-mode tape (backward on a stale graph, non-scalar loss).
struct TapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed input text (file format violations, bad lines).
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Structurally valid text that violates the data schema.
struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Caller broke a documented precondition (e.g. unnormalized probability rows).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Feature tensor and clip disagree about which (tracklet, frame) pairs exist.
struct AlignmentError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Filesystem failure (unreadable/unwritable path).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace pitchgraph
