#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "udvla/gradcheck.hpp"
#include "udvla/ops.hpp"
#include "udvla/tensor.hpp"

using namespace udvla;

namespace {

// Elementwise square with a deliberately broken backward (gradient scaled x2).
Tensor square_buggy(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i)
    out.data()[i] = a.data()[i] * a.data()[i];
  if (Tape::active() && a.requires_grad()) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape::active()->record([ai, oi]() {
      if (oi->grad.size() != oi->data.size()) oi->grad.assign(oi->data.size(), 0.0);
      if (ai->grad.size() != ai->data.size()) ai->grad.assign(ai->data.size(), 0.0);
      for (std::size_t i = 0; i < ai->data.size(); ++i)
        ai->grad[i] += oi->grad[i] * 4.0 * ai->data[i];  // should be 2x
    });
  }
  return out;
}

}  // namespace

TEST_CASE("quadratic analytic vs fd agree to 1e-9") {
  Tensor w = Tensor::from({1}, {3.0}, true);
  auto f = [&]() { return mul(w, w); };
  auto rep = finite_diff_check(f, {{"w", w}}, 1e-5, 1e-9);
  CHECK(rep.pass);
  CHECK(rep.checked == 1);
  // analytic 6 vs central difference 6, exact for quadratics up to rounding
  CHECK(rep.max_rel_err <= 1e-9);
}

TEST_CASE("injected scale-x2 gradient bug fails the check") {
  Tensor w = Tensor::from({3}, {0.5, -1.25, 2.0}, true);
  auto f = [&]() { return sum(square_buggy(w)); };
  auto rep = finite_diff_check(f, {{"w", w}}, 1e-5, 1e-4);
  CHECK_FALSE(rep.pass);
  CHECK(rep.failures.size() == 3);
  CHECK(rep.worst_name == "w");
}

TEST_CASE("report covers every parameter entry") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  Tensor b = Tensor::from({2}, {0.5, -0.5}, true);
  auto f = [&]() { return add(sum(mul(a, a)), sum(mul(b, b))); };
  auto rep = finite_diff_check(f, {{"a", a}, {"b", b}}, 1e-5, 1e-6);
  CHECK(rep.pass);
  CHECK(rep.checked == 6);
}
