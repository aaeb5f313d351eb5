#pragma once

#include <stdexcept>
#include <string>

namespace headsplat {

// Raised when an avatar is paired with a template it was not built from.
class TemplateMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when an operation needs state that was never recorded (e.g. a
// backward pass on a frame rendered without intermediates).
class InvalidStateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed or corrupted file contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An optimizer produced or consumed a non-finite value.
class DivergedError : public std::runtime_error {
 public:
  DivergedError(const std::string& array_name, long step)
      : std::runtime_error("optimization diverged: non-finite values in '" + array_name +
                           "' at step " + std::to_string(step)),
        array_name_(array_name),
        step_(step) {}

  const std::string& array_name() const noexcept { return array_name_; }
  long step() const noexcept { return step_; }

 private:
  std::string array_name_;
  long step_;
};

}  // namespace headsplat
