#include "udvla/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace udvla {

GradCheckReport finite_diff_check(
    const std::function<Tensor()>& f,
    const std::vector<std::pair<std::string, Tensor>>& params, double eps,
    double tol) {
  {
    NoGradScope ng;
    const double v1 = f().item();
    const double v2 = f().item();
    if (v1 != v2)
      throw std::runtime_error(
          "finite_diff_check: oracle invalid, loss is non-deterministic (" +
          std::to_string(v1) + " vs " + std::to_string(v2) + ")");
  }

  std::vector<std::vector<double>> analytic;
  {
    for (const auto& [name, p] : params) {
      (void)name;
      const_cast<Tensor&>(p).zero_grad();
    }
    Tape tape;
    Tensor loss = f();
    tape.backward(loss);
    for (const auto& [name, p] : params) {
      (void)name;
      Tensor& t = const_cast<Tensor&>(p);
      t.ensure_grad();
      analytic.push_back(t.grad());
    }
  }

  GradCheckReport report;
  NoGradScope ng;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = const_cast<Tensor&>(params[pi].second);
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double saved = p.data()[i];
      p.data()[i] = saved + eps;
      const double fp = f().item();
      p.data()[i] = saved - eps;
      const double fm = f().item();
      p.data()[i] = saved;
      const double fd = (fp - fm) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double rel = std::abs(a - fd) / std::max(1.0, std::abs(fd));
      ++report.checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_name = params[pi].first;
        report.worst_index = i;
      }
      if (rel > tol)
        report.failures.push_back({params[pi].first, i, a, fd, rel});
    }
  }
  report.pass = report.failures.empty();
  return report;
}

}  // namespace udvla
