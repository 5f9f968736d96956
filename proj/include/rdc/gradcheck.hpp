#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rdc/tape.hpp"

namespace rdc {

// One op under test. Inputs flagged requires_grad are perturbed; the others
// are held fixed (e.g. labels baked into the forward closure).
struct GradCase {
  std::string op;
  std::vector<Tensor> inputs;
  std::function<Var(std::span<const Var>)> forward;
};

struct GradCheckOptions {
#ifdef RDC_REAL_DOUBLE
  double step = 1e-6;
#else
  double step = 1e-3;
#endif
  double tolerance = 1e-3;
  // Denominator floor of gradient_error. At float32 a central difference
  // carries ~1e-5 absolute noise, so near-zero gradients are compared
  // absolutely; the 64-bit build can afford a much smaller floor.
  double error_floor = 1.0;
  std::uint64_t seed = 0;  // drives the output projection
};

struct GradCheckResult {
  std::string op;
  double max_relative_error = 0;
  std::int64_t checked = 0;
  bool passed = false;
};

// |analytic - numeric| / max(|analytic|, |numeric|, floor): relative above
// the floor, scaled absolute below it.
double gradient_error(double analytic, double numeric, double floor = 1.0);

// Compares tape gradients of sum(forward(inputs) * R), R a fixed random
// projection, against central differences of the same scalar evaluated in
// double precision from forward passes alone.
GradCheckResult check_gradients(const GradCase& c, const GradCheckOptions& options);

// Cases for every differentiable op, with inputs of at most 64 elements and
// kink/tie-free values where the op has them.
std::vector<GradCase> standard_grad_cases(std::uint64_t seed);

}  // namespace rdc
