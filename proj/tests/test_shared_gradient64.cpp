// Built against the 64-bit library so finite differences resolve the
// gradient of the whole two-pipeline model to well below 1e-3.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "rdc/trainer.hpp"
#include "rdc/seed.hpp"
#include "support/synthetic_cifar.hpp"

using namespace rdc;

namespace {

struct Fixture {
  Dataset data = rdc::testing::synthetic_dataset(4);
  PipelineSet set = assemble_pipelines(build_toy_backbone(32, 10, 21), build_shallow_head(21), {1, 1});

  double loss() {
    Tape tape(false);
    return joint_loss(set, tape, data.images, data.labels).total.value().item();
  }
  GradMap grads() {
    Tape tape;
    return tape.backward(joint_loss(set, tape, data.images, data.labels).total);
  }
};

constexpr double kStep = 1e-6;

}  // namespace

TEST_CASE("shared backbone gradient matches finite differences of the joint loss") {
  static_assert(sizeof(real) == 8);
  Fixture f;
  const GradMap g = f.grads();

  for (const std::string name : {"backbone.conv1.weight", "backbone.conv4.weight", "backbone.fc1.weight",
                           "backbone.fc2.bias", "head.conv1.weight"}) {
    CAPTURE(name);
    Tensor& p = f.set.store().at(name);
    const Tensor& grad = g.at(name);

    // Directional derivative along a random unit-scale direction.
    std::mt19937_64 rng(fnv1a(name));
    std::normal_distribution<double> normal;
    std::vector<double> dir(static_cast<std::size_t>(p.size()));
    double norm = 0;
    for (double& d : dir) norm += (d = normal(rng)) * d;
    for (double& d : dir) d /= std::sqrt(norm);
    const Tensor saved = p;
    auto shifted = [&](double t) {
      for (std::int64_t i = 0; i < p.size(); ++i) p[i] = saved[i] + t * dir[static_cast<std::size_t>(i)];
      const double l = f.loss();
      p = saved;
      return l;
    };
    const double numeric = (shifted(kStep) - shifted(-kStep)) / (2 * kStep);
    double analytic = 0;
    for (std::int64_t i = 0; i < p.size(); ++i) analytic += grad[i] * dir[static_cast<std::size_t>(i)];
    CHECK(std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric)) <= 1e-3);

    // The three largest single entries.
    std::vector<std::int64_t> order(static_cast<std::size_t>(p.size()));
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + 3, order.end(),
                      [&](auto a, auto b) { return std::abs(grad[a]) > std::abs(grad[b]); });
    for (int k = 0; k < 3; ++k) {
      const std::int64_t i = order[static_cast<std::size_t>(k)];
      const real original = p[i];
      p[i] = original + kStep;
      const double plus = f.loss();
      p[i] = original - kStep;
      const double minus = f.loss();
      p[i] = original;
      const double n = (plus - minus) / (2 * kStep);
      CHECK(std::abs(grad[i] - n) / std::max(std::abs(grad[i]), std::abs(n)) <= 1e-3);
    }
  }
}

TEST_CASE("shared gradient is the weighted sum of per-pipeline gradients") {
  Fixture f;
  f.set.set_weights({1, 0});
  const GradMap shallow = f.grads();
  f.set.set_weights({0, 1});
  const GradMap deep = f.grads();
  f.set.set_weights({2, 3});
  const GradMap both = f.grads();
  CHECK(shallow.count("head.conv1.weight") == 0);
  for (const auto& [name, g] : both) {
    if (name.rfind("backbone.", 0) != 0) continue;
    const Tensor& a = shallow.at(name);
    const Tensor& b = deep.at(name);
    for (std::int64_t i = 0; i < g.size(); ++i) REQUIRE(std::abs(g[i] - (2 * a[i] + 3 * b[i])) <= 1e-9 * (1 + std::abs(g[i])));
  }
}
