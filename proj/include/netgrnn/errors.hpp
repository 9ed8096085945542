#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace netgrnn {

/// Bad shapes, out-of-range parameters, malformed files.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Divergence, non-convergence, or a failed retry budget.
class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A node tried to use data from outside its one-hop neighbourhood.
class LocalityViolation : public std::runtime_error {
 public:
  LocalityViolation(std::size_t reader, std::size_t target, std::string phase)
      : std::runtime_error("locality violation: node " + std::to_string(reader) +
                           " read node " + std::to_string(target) + " during " + phase),
        reader_(reader),
        target_(target),
        phase_(std::move(phase)) {}

  std::size_t reader() const noexcept { return reader_; }
  std::size_t target() const noexcept { return target_; }
  const std::string& phase() const noexcept { return phase_; }

 private:
  std::size_t reader_;
  std::size_t target_;
  std::string phase_;
};

}  // namespace netgrnn
