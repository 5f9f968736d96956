#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rdc/cifar.hpp"
#include "rdc/model.hpp"

namespace rdc {

enum class Schedule { step, cosine };
enum class OptimizerKind { adam, sgd };

std::string to_string(Schedule schedule);
std::string to_string(OptimizerKind kind);
Schedule parse_schedule(const std::string& text);
OptimizerKind parse_optimizer(const std::string& text);

struct TrainConfig {
  std::int64_t epochs = 100;
  double base_lr = 1e-4;
  Schedule schedule = Schedule::cosine;
  OptimizerKind optimizer = OptimizerKind::adam;
  double momentum = 0.9;  // sgd only
  std::int64_t batch_size = 64;
  std::vector<double> pipeline_weights;  // empty: keep the PipelineSet's weights
  std::uint64_t seed = 0;
};

// Throws ConfigError naming the offending field.
void validate(const TrainConfig& config, std::size_t pipeline_count);

// step: base * 0.1^floor(epoch/10). cosine: base * 0.5 * (1 + cos(pi * epoch/total)).
double lr_at(Schedule schedule, double base_lr, std::int64_t epoch, std::int64_t total_epochs);

struct JointLoss {
  Var total;                       // scalar [1] on the caller's tape
  std::vector<real> per_pipeline;  // unweighted batch-mean cross-entropy
  std::vector<Tensor> logits;
};

// Sum over pipelines of W_j * CE_j. Pipelines with W_j == 0 run on a
// separate gradient-free tape, so they contribute neither nodes nor
// gradients; their losses are still reported.
JointLoss joint_loss(const PipelineSet& pipelines, Tape& tape, const Tensor& batch, std::span<const int> labels);

class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind, double momentum = 0.9);

  // Updates every store entry present in `grads`; others are left untouched.
  void step(ParameterStore& store, const GradMap& grads, double lr);

 private:
  struct Slot {
    std::vector<real> first;
    std::vector<real> second;
    std::int64_t count = 0;
  };

  OptimizerKind kind_;
  double momentum_;
  std::map<std::string, Slot, std::less<>> slots_;
};

struct StepMetrics {
  std::int64_t epoch = 0;
  std::int64_t step = 0;  // global, from 0
  std::vector<double> per_pipeline_loss;
  double joint_loss = 0;
  double lr = 0;
};

struct EpochMetrics {
  std::int64_t epoch = 0;
  std::int64_t steps = 0;
  std::vector<double> mean_loss;
  std::vector<double> train_accuracy;  // running, measured before each update
  double mean_joint_loss = 0;
  double lr = 0;
};

struct TrainLog {
  std::vector<StepMetrics> steps;
  std::vector<EpochMetrics> epochs;
};

struct TrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  // Return false to stop after this epoch.
  std::function<bool(const EpochMetrics&)> on_epoch;
};

// One optimizer step on one batch. Throws DivergedError on a non-finite loss.
StepMetrics train_step(PipelineSet& pipelines, Optimizer& optimizer, const Batch& batch, double lr,
                       std::int64_t epoch = 0, std::int64_t step = 0, JointLoss* detail = nullptr);

// Trains in place; the result depends only on the inputs and config.seed.
TrainLog train(PipelineSet& pipelines, const Dataset& data, const TrainConfig& config, const TrainHooks& hooks = {});

struct EvalResult {
  double accuracy = 0;
  double loss = 0;  // sample-mean cross-entropy
};

// Top-1 over the full split, in dataset order.
EvalResult evaluate_split(const PipelineSet& pipelines, const Dataset& data, std::size_t pipeline,
                          std::int64_t batch_size = 250);
double evaluate(const PipelineSet& pipelines, const Dataset& data, std::size_t pipeline);

// Index of the first maximum of each row of [N,K] logits.
std::vector<int> predictions(const Tensor& logits);

}  // namespace rdc
