#pragma once

#include <stdexcept>
#include <string>

namespace canary_audit {

/// Raised when an input violates an operation's precondition.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an internal value is unusable (e.g. a non-finite gradient).
class InvalidState : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A metric whose denominator vanished (WERR against zero, precision with no positives).
class UndefinedMetric : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, long last_good_step)
      : std::runtime_error(what), last_good_step_(last_good_step) {}

  long last_good_step() const noexcept { return last_good_step_; }

 private:
  long last_good_step_;
};

/// The membership classifier is not at chance on a model that saw neither set.
class CalibrationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace canary_audit
