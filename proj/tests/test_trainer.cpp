#include <cmath>
#include <limits>

#include "doctest.h"
#include "rdc/error.hpp"
#include "rdc/trainer.hpp"
#include "support/synthetic_cifar.hpp"

using namespace rdc;
using rdc::testing::synthetic_dataset;

namespace {

PipelineSet two_pipelines(std::vector<double> weights = {}, std::uint64_t seed = 7) {
  return assemble_pipelines(build_toy_backbone(32, 10, seed), build_shallow_head(seed), std::move(weights));
}

Batch first_batch(const Dataset& d, std::int64_t size, std::uint64_t seed = 0) {
  return *batches(d, {size, seed, 0}, 32).next();
}

bool same_parameters(const ParameterStore& a, const ParameterStore& b, const std::string& prefix = "") {
  for (const auto& name : a.names()) {
    if (name.rfind(prefix, 0) != 0) continue;
    if (!b.contains(name) || !bit_equal(a.at(name), b.at(name))) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("lr_at") {
  CHECK(lr_at(Schedule::step, 0.001, 0, 50) == 0.001);
  CHECK(lr_at(Schedule::step, 0.001, 9, 50) == 0.001);
  CHECK(lr_at(Schedule::step, 0.001, 10, 50) == doctest::Approx(0.0001).epsilon(1e-12));
  CHECK(lr_at(Schedule::step, 0.001, 25, 50) == doctest::Approx(0.00001).epsilon(1e-12));
  CHECK(lr_at(Schedule::cosine, 1e-4, 0, 100) == 1e-4);
  CHECK(lr_at(Schedule::cosine, 1e-4, 50, 100) == doctest::Approx(5e-5).epsilon(1e-12));
  CHECK(lr_at(Schedule::cosine, 1e-4, 99, 100) < 1e-7);
  CHECK_THROWS_AS(lr_at(Schedule::cosine, 1e-4, 100, 100), ContractError);
}

TEST_CASE("config validation names the field") {
  TrainConfig c;
  c.pipeline_weights = {0, 0};
  CHECK_THROWS_WITH_AS(validate(c, 2), doctest::Contains("pipeline_weights"), ConfigError);
  c.pipeline_weights = {1};
  CHECK_THROWS_AS(validate(c, 2), ConfigError);
  c.pipeline_weights = {1, -1};
  CHECK_THROWS_AS(validate(c, 2), ConfigError);
  c.pipeline_weights = {};
  c.batch_size = 0;
  CHECK_THROWS_WITH_AS(validate(c, 2), doctest::Contains("batch_size"), ConfigError);
  CHECK_THROWS_AS(parse_schedule("linear"), ConfigError);
}

TEST_CASE("joint loss degenerates to single-pipeline losses") {
  const Dataset data = synthetic_dataset(80);
  PipelineSet set = two_pipelines();
  for (std::uint64_t b = 0; b < 5; ++b) {
    const Batch batch = first_batch(data, 8, b);
    Tape lone(false);
    const real alone = softmax_cross_entropy(set.forward(0, lone.constant(batch.images)), batch.labels).value().item();

    set.set_weights({1, 0});
    Tape t1;
    const JointLoss one = joint_loss(set, t1, batch.images, batch.labels);
    CHECK(one.total.value().item() == alone);

    set.set_weights({2, 0});
    Tape t2;
    CHECK(joint_loss(set, t2, batch.images, batch.labels).total.value().item() == 2 * alone);

    set.set_weights({0.3, 1.7});
    Tape t3;
    const JointLoss mixed = joint_loss(set, t3, batch.images, batch.labels);
    CHECK(std::abs(mixed.total.value().item() - (0.3 * mixed.per_pipeline[0] + 1.7 * mixed.per_pipeline[1])) <= 1e-6);
    CHECK(mixed.per_pipeline[0] == alone);
  }
}

TEST_CASE("joint loss of untrained two-pipeline model is near 2 ln K") {
  const Dataset data = synthetic_dataset(64);
  PipelineSet set = two_pipelines({1, 1});
  Tape tape;
  const Batch batch = first_batch(data, 64);
  const real total = joint_loss(set, tape, batch.images, batch.labels).total.value().item();
  CHECK(std::abs(total - 2 * std::log(10.0)) <= 0.3);
}

TEST_CASE("a step with every weight zero leaves parameters untouched") {
  const Dataset data = synthetic_dataset(16);
  PipelineSet set = two_pipelines({0, 0});
  const PipelineSet before = set.clone();
  Optimizer adam(OptimizerKind::adam);
  const StepMetrics m = train_step(set, adam, first_batch(data, 8), 1e-3);
  CHECK(m.joint_loss == 0);
  CHECK(m.per_pipeline_loss.size() == 2);
  CHECK(same_parameters(before.store(), set.store()));
}

TEST_CASE("a zero-weight pipeline does not perturb the trajectory") {
  const Dataset data = synthetic_dataset(24);
  TrainConfig config;
  config.epochs = 2;
  config.batch_size = 8;
  config.base_lr = 1e-3;
  config.seed = 11;

  PipelineSet with_head = two_pipelines();
  config.pipeline_weights = {1, 0};
  const TrainLog a = train(with_head, data, config);

  PipelineSet alone = assemble_pipelines(build_toy_backbone(32, 10, 7), std::nullopt);
  config.pipeline_weights = {1};
  const TrainLog b = train(alone, data, config);

  CHECK(same_parameters(alone.store(), with_head.store()));
  REQUIRE(a.steps.size() == b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    CHECK(a.steps[i].joint_loss == b.steps[i].joint_loss);
    CHECK(a.steps[i].per_pipeline_loss[0] == b.steps[i].per_pipeline_loss[0]);
  }
  // the untrained head is also untouched
  CHECK(same_parameters(two_pipelines().store(), with_head.store(), "head."));
}

TEST_CASE("training is deterministic and logs a consistent decomposition") {
  const Dataset data = synthetic_dataset(20);
  TrainConfig config;
  config.epochs = 2;
  config.batch_size = 8;
  config.base_lr = 1e-3;
  config.pipeline_weights = {1, 0.5};
  config.seed = 3;
  PipelineSet a = two_pipelines(), b = two_pipelines();
  std::int64_t calls = 0;
  const TrainLog la = train(a, data, config, {[&](const StepMetrics&) { ++calls; }, {}});
  const TrainLog lb = train(b, data, config);
  CHECK(calls == 6);
  CHECK(same_parameters(a.store(), b.store()));
  REQUIRE(la.steps.size() == 6);
  for (std::size_t i = 0; i < la.steps.size(); ++i) {
    const StepMetrics& s = la.steps[i];
    CHECK(s.joint_loss == lb.steps[i].joint_loss);
    CHECK(s.step == static_cast<std::int64_t>(i));
    CHECK(std::abs(s.joint_loss - (s.per_pipeline_loss[0] + 0.5 * s.per_pipeline_loss[1])) <= 1e-6);
  }
  REQUIRE(la.epochs.size() == 2);
  CHECK(la.epochs[1].lr == lr_at(Schedule::cosine, 1e-3, 1, 2));
  CHECK(la.epochs[0].steps == 3);
}

TEST_CASE("epoch hook can stop training") {
  const Dataset data = synthetic_dataset(10);
  TrainConfig config;
  config.epochs = 5;
  config.batch_size = 10;
  PipelineSet set = assemble_pipelines(build_toy_backbone(32, 10, 1), std::nullopt);
  const TrainLog log = train(set, data, config, {{}, [](const EpochMetrics& e) { return e.epoch < 1; }});
  CHECK(log.epochs.size() == 2);
}

TEST_CASE("sgd reduces the loss on a small batch") {
  const Dataset data = synthetic_dataset(16);
  PipelineSet set = assemble_pipelines(build_toy_backbone(32, 10, 5), std::nullopt);
  Optimizer sgd(OptimizerKind::sgd, 0.9);
  const Batch batch = first_batch(data, 16);
  const double first = train_step(set, sgd, batch, 1e-2).joint_loss;
  double last = first;
  for (int i = 0; i < 10; ++i) last = train_step(set, sgd, batch, 1e-2).joint_loss;
  CHECK(last < first);
}

TEST_CASE("a NaN loss aborts with the epoch and step") {
  const Dataset data = synthetic_dataset(16);
  PipelineSet set = assemble_pipelines(build_toy_backbone(32, 10, 5), std::nullopt);
  set.store().at("backbone.fc2.bias")[0] = std::numeric_limits<real>::quiet_NaN();
  TrainConfig config;
  config.epochs = 1;
  config.batch_size = 8;
  try {
    train(set, data, config);
    FAIL("expected divergence");
  } catch (const DivergedError& e) {
    CHECK(e.epoch() == 0);
    CHECK(e.step() == 0);
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
}

TEST_CASE("evaluate") {
  Dataset test = synthetic_dataset(100);

  SUBCASE("constant predictions score the class marginal") {
    PipelineSet set = assemble_pipelines(build_toy_backbone(32, 10, 1), std::nullopt);
    for (const auto& name : set.store().names()) set.store().at(name) = Tensor(set.store().at(name).shape());
    set.store().at("backbone.fc2.bias")[3] = 1;
    CHECK(evaluate(set, test, 0) == 0.1);
    const EvalResult r = evaluate_split(set, test, 0, 30);  // short final batch
    CHECK(r.accuracy == 0.1);
    CHECK(r.loss == doctest::Approx(std::log(9 + std::exp(1.0)) - 0.1).epsilon(1e-6));
  }

  SUBCASE("untrained backbone is near chance") {
    Dataset more = synthetic_dataset(1000, 10, 9);
    PipelineSet set = assemble_pipelines(build_toy_backbone(32, 10, 7), std::nullopt);
    CHECK(std::abs(evaluate(set, more, 0) - 0.1) <= 0.03);
  }

  SUBCASE("bad pipeline index") {
    PipelineSet set = assemble_pipelines(build_toy_backbone(32, 10, 1), std::nullopt);
    CHECK_THROWS_AS(evaluate(set, test, 1), ContractError);
  }
}

TEST_CASE("predictions pick the first maximum") {
  const Tensor logits({2, 3}, std::vector<real>{1, 5, 5, -1, -2, -3});
  CHECK(predictions(logits) == std::vector<int>{1, 0});
}
