#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace coopuq {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using ParamVector = Eigen::VectorXd;

// Training left the finite-number regime; carries the epoch/step where it happened.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, long step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// Invalid experiment configuration; message names the offending field path.
class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed input file; message carries row/column context.
class ParseError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace coopuq
