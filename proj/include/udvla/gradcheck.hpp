#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "udvla/tensor.hpp"

namespace udvla {

struct GradCheckFailure {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  bool pass = false;
  std::size_t checked = 0;
  double max_rel_err = 0.0;
  std::string worst_name;
  std::size_t worst_index = 0;
  std::vector<GradCheckFailure> failures;
};

// Central-difference check of analytic gradients for a deterministic scalar
// loss. `f` must rebuild the loss from the current parameter values on every
// call; it is evaluated twice up front and an oracle-invalid error is thrown
// if the two values differ. Relative error per entry is
// |analytic - fd| / max(1, |fd|).
GradCheckReport finite_diff_check(
    const std::function<Tensor()>& f,
    const std::vector<std::pair<std::string, Tensor>>& params, double eps,
    double tol);

}  // namespace udvla
