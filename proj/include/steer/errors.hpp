#ifndef STEER_ERRORS_HPP_
#define STEER_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace steer {

// Shape disagreement between operands.
class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid architecture or training configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A precondition of an operation was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Softmax row with every entry masked out.
class InvalidMaskError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& msg, int line)
      : std::runtime_error("line " + std::to_string(line) + ": " + msg),
        line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

// Game document parsed but is semantically incomplete or inconsistent.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace steer

#endif  // STEER_ERRORS_HPP_
