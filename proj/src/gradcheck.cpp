#include "rdc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "rdc/error.hpp"
#include "rdc/ops.hpp"

namespace rdc {
namespace {

std::vector<Var> bind_inputs(Tape& tape, const std::vector<Tensor>& inputs) {
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.leaf(inputs[i], "input" + std::to_string(i)));
  return vars;
}

double projected(const Tensor& out, const Tensor& projection) {
  double total = 0;
  for (std::int64_t i = 0; i < out.size(); ++i) total += static_cast<double>(out[i]) * projection[i];
  return total;
}

double forward_projected(const GradCase& c, const std::vector<Tensor>& inputs, const Tensor& projection) {
  Tape tape(false);
  const auto vars = bind_inputs(tape, inputs);
  return projected(c.forward(vars).value(), projection);
}

Tensor checked(Tensor t) { return std::move(t.set_requires_grad(true)); }

Tensor uniform(Shape shape, std::mt19937_64& rng, real low = -1, real high = 1) {
  return Tensor::create(std::move(shape), UniformFill{rng(), low, high});
}

// Values bounded away from zero, so a +/-step perturbation never crosses the
// relu kink.
Tensor away_from_zero(Shape shape, std::mt19937_64& rng) {
  Tensor t = uniform(std::move(shape), rng, real(0.1), real(1));
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.data())
    if (sign(rng)) v = -v;
  return t;
}

// Distinct values spaced 0.05 apart in random order: no ties within a pooling
// window and no argmax switch under perturbation.
Tensor spaced_permutation(Shape shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::vector<std::int64_t> order(static_cast<std::size_t>(t.size()));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::int64_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<real>(order[static_cast<std::size_t>(i)]) * real(0.05) - real(1);
  return t;
}

}  // namespace

double gradient_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

GradCheckResult check_gradients(const GradCase& c, const GradCheckOptions& options) {
  GradCheckResult result;
  result.op = c.op;

  Tape tape;
  const auto vars = bind_inputs(tape, c.inputs);
  const Var out = c.forward(vars);
  Tensor projection = Tensor::create(out.shape(), UniformFill{options.seed, -1, 1});
  const Var loss = sum(mul(out, tape.constant(projection)));
  const GradMap grads = tape.backward(loss);

  std::vector<Tensor> probe = c.inputs;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    if (!c.inputs[i].requires_grad()) continue;
    const Tensor& analytic = grads.at("input" + std::to_string(i));
    for (std::int64_t e = 0; e < probe[i].size(); ++e) {
      const real original = probe[i][e];
      probe[i][e] = static_cast<real>(original + options.step);
      const double plus = forward_projected(c, probe, projection);
      probe[i][e] = static_cast<real>(original - options.step);
      const double minus = forward_projected(c, probe, projection);
      probe[i][e] = original;
      // Difference of the actually represented perturbation, not the nominal one.
      const double width = static_cast<double>(static_cast<real>(original + options.step)) -
                           static_cast<double>(static_cast<real>(original - options.step));
      const double numeric = (plus - minus) / width;
      result.max_relative_error = std::max(result.max_relative_error, gradient_error(analytic[e], numeric, options.error_floor));
      ++result.checked;
    }
  }
  result.passed = result.max_relative_error <= options.tolerance;
  return result;
}

std::vector<GradCase> standard_grad_cases(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradCase> cases;

  const Conv2dSpec conv{2, 3, 3, 1, 1};
  cases.push_back({"conv2d",
                   {checked(uniform({1, 2, 4, 4}, rng)), checked(uniform(conv.weight_shape(), rng)),
                    checked(uniform(conv.bias_shape(), rng))},
                   [conv](std::span<const Var> in) { return conv2d(in[0], in[1], in[2], conv); }});

  cases.push_back({"maxpool2d", {checked(spaced_permutation({1, 2, 4, 4}, rng))},
                   [](std::span<const Var> in) { return maxpool2d(in[0]); }});

  cases.push_back({"relu", {checked(away_from_zero({2, 3, 4}, rng))},
                   [](std::span<const Var> in) { return relu(in[0]); }});

  const LinearSpec fc{5, 3};
  cases.push_back({"linear",
                   {checked(uniform({2, 5}, rng)), checked(uniform(fc.weight_shape(), rng)),
                    checked(uniform(fc.bias_shape(), rng))},
                   [fc](std::span<const Var> in) { return linear(in[0], in[1], in[2], fc); }});

  std::vector<int> labels(4);
  std::uniform_int_distribution<int> label(0, 9);
  for (auto& l : labels) l = label(rng);
  cases.push_back({"softmax_cross_entropy", {checked(uniform({4, 10}, rng, -2, 2))},
                   [labels](std::span<const Var> in) { return softmax_cross_entropy(in[0], labels); }});

  cases.push_back({"residual_add", {checked(uniform({1, 3, 4, 4}, rng)), checked(uniform({1, 3, 4, 4}, rng))},
                   [](std::span<const Var> in) { return residual_add(in[0], in[1]); }});

  cases.push_back({"flatten", {checked(uniform({2, 2, 3, 3}, rng))},
                   [](std::span<const Var> in) { return flatten(in[0]); }});

  cases.push_back({"add", {checked(uniform({2, 3}, rng)), checked(uniform({2, 3}, rng))},
                   [](std::span<const Var> in) { return add(in[0], in[1]); }});
  cases.push_back({"mul", {checked(uniform({2, 3}, rng)), checked(uniform({2, 3}, rng))},
                   [](std::span<const Var> in) { return mul(in[0], in[1]); }});
  cases.push_back({"scale", {checked(uniform({2, 3}, rng))},
                   [](std::span<const Var> in) { return scale(in[0], real(-1.75)); }});
  cases.push_back({"sum", {checked(uniform({2, 3}, rng))}, [](std::span<const Var> in) { return sum(in[0]); }});
  return cases;
}

}  // namespace rdc
