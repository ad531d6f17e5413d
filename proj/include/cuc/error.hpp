#pragma once

#include <stdexcept>
#include <string>

namespace cuc {

// Bad dynamics parameters (out of declared bounds, unknown name).
class ParameterDomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Malformed inputs: wrong dimensions, values outside their domain.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Operation called in the wrong lifecycle state (step after terminal,
// mutating a frozen ensemble, ...).
class LifecycleError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid perturbation or condition specification.
class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Calibration could not produce a usable noise floor or threshold pair.
class CalibrationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Configuration or file-format problems.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <class E>
inline void require(bool ok, const std::string& what) {
  if (!ok) throw E(what);
}

}  // namespace detail
}  // namespace cuc
