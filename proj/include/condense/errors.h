#pragma once

#include <stdexcept>
#include <string>

namespace condense {

// Invalid or inconsistent user configuration. CLI exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dataset ingestion failure (missing classes, unreadable images).
class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// On-disk artifact disagrees with its manifest.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Truncated, malformed or version-mismatched binary file.
class CorruptionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mismatched layer counts or channel widths between two structures.
class StructuralError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Loss or parameter became non-finite during optimization.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Argument outside the mathematical domain of a function.
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace condense
