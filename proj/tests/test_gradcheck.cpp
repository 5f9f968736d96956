#include "doctest.h"
#include "rdc/gradcheck.hpp"
#include "rdc/ops.hpp"

using namespace rdc;

TEST_CASE("every standard op passes the finite-difference oracle") {
  for (std::uint64_t seed : {0ULL, 1ULL, 42ULL}) {
    for (const GradCase& c : standard_grad_cases(seed)) {
      for (const Tensor& t : c.inputs) CHECK(t.size() <= 64);
      const GradCheckResult r = check_gradients(c, {.seed = seed});
      INFO(c.op << " seed " << seed << " error " << r.max_relative_error);
      CHECK(r.passed);
      CHECK(r.checked > 0);
    }
  }
}

TEST_CASE("gradient check results are reproducible for a seed") {
  const auto a = standard_grad_cases(7);
  const auto b = standard_grad_cases(7);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(check_gradients(a[i], {.seed = 7}).max_relative_error ==
          check_gradients(b[i], {.seed = 7}).max_relative_error);
}

TEST_CASE("a wrong backward rule is detected") {
  // relu whose backward rule doubles the upstream gradient
  const auto broken = [](std::span<const Var> in) {
    Tensor y = in[0].value();
    for (auto& v : y.data()) v = v > 0 ? v : real(0);
    return in[0].tape->record("broken_relu", std::move(y), {in[0]}, [](BackwardPass& pass) {
      for (std::int64_t i = 0; i < pass.grad_output().size(); ++i)
        if (pass.input(0)[i] > 0) (*pass.input_grad(0))[i] += 2 * pass.grad_output()[i];
    });
  };
  Tensor x = Tensor::create({4, 4}, UniformFill{3, 0.2f, 1});
  x.set_requires_grad(true);
  const auto r = check_gradients({"broken_relu", {x}, broken}, {});
  CHECK_FALSE(r.passed);
  CHECK(r.max_relative_error > 0.1);
}

TEST_CASE("gradient_error is relative above one and absolute below") {
  CHECK(gradient_error(100, 101) == doctest::Approx(1.0 / 101));
  CHECK(gradient_error(0.001, 0.002) == doctest::Approx(0.001));
  CHECK(gradient_error(0, 0) == 0);
}
