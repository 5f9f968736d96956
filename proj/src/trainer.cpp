#include "rdc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "rdc/error.hpp"

namespace rdc {

std::string to_string(Schedule schedule) { return schedule == Schedule::step ? "step" : "cosine"; }
std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

Schedule parse_schedule(const std::string& text) {
  if (text == "step") return Schedule::step;
  if (text == "cosine") return Schedule::cosine;
  throw ConfigError("schedule: expected step or cosine, got '" + text + "'");
}

OptimizerKind parse_optimizer(const std::string& text) {
  if (text == "adam") return OptimizerKind::adam;
  if (text == "sgd") return OptimizerKind::sgd;
  throw ConfigError("optimizer: expected adam or sgd, got '" + text + "'");
}

void validate(const TrainConfig& config, std::size_t pipeline_count) {
  if (config.epochs < 1) throw ConfigError("epochs: must be a positive integer");
  if (!(config.base_lr > 0) || !std::isfinite(config.base_lr)) throw ConfigError("base_lr: must be a positive real");
  if (config.batch_size < 1) throw ConfigError("batch_size: must be a positive integer");
  if (config.optimizer == OptimizerKind::sgd && !(config.momentum >= 0 && config.momentum < 1))
    throw ConfigError("momentum: must lie in [0, 1)");
  if (config.pipeline_weights.empty()) return;
  if (config.pipeline_weights.size() != pipeline_count)
    throw ConfigError("pipeline_weights: " + std::to_string(config.pipeline_weights.size()) + " weights for " +
                      std::to_string(pipeline_count) + " pipelines");
  bool any = false;
  for (double w : config.pipeline_weights) {
    if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("pipeline_weights: weights must be finite and non-negative");
    any = any || w > 0;
  }
  if (!any) throw ConfigError("pipeline_weights: at least one weight must be positive");
}

double lr_at(Schedule schedule, double base_lr, std::int64_t epoch, std::int64_t total_epochs) {
  if (epoch < 0 || epoch >= total_epochs)
    throw ContractError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(total_epochs) + ")");
  if (schedule == Schedule::step) return base_lr * std::pow(0.1, static_cast<double>(epoch / 10));
  return base_lr * 0.5 * (1 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(total_epochs)));
}

JointLoss joint_loss(const PipelineSet& pipelines, Tape& tape, const Tensor& batch, std::span<const int> labels) {
  const auto& weights = pipelines.weights();
  JointLoss out;
  std::vector<Var> terms;
  std::vector<double> coefficients;
  const Var input = tape.constant(batch);
  for (std::size_t j = 0; j < pipelines.pipeline_count(); ++j) {
    if (weights[j] > 0) {
      const Var logits = pipelines.forward(j, input);
      const Var loss = softmax_cross_entropy(logits, labels);
      terms.push_back(loss);
      coefficients.push_back(weights[j]);
      out.per_pipeline.push_back(loss.value().item());
      out.logits.push_back(logits.value());
    } else {
      Tape aside(false);
      const Var logits = pipelines.forward(j, aside.constant(batch));
      out.per_pipeline.push_back(softmax_cross_entropy(logits, labels).value().item());
      out.logits.push_back(logits.value());
    }
  }

  double total = 0;
  for (std::size_t t = 0; t < terms.size(); ++t) total += coefficients[t] * static_cast<double>(terms[t].value().item());
  out.total = tape.record("joint_loss", Tensor({1}, static_cast<real>(total)), std::span<const Var>(terms),
                          [coefficients](BackwardPass& pass) {
                            const double g = pass.grad_output()[0];
                            for (std::size_t t = 0; t < coefficients.size(); ++t)
                              if (Tensor* slot = pass.input_grad(t)) (*slot)[0] += static_cast<real>(coefficients[t] * g);
                          });
  return out;
}

Optimizer::Optimizer(OptimizerKind kind, double momentum) : kind_(kind), momentum_(momentum) {}

void Optimizer::step(ParameterStore& store, const GradMap& grads, double lr) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  for (const auto& [name, grad] : grads) {
    if (!store.contains(name)) continue;
    Tensor& param = store.at(name);
    if (grad.shape() != param.shape()) throw ContractError("gradient shape mismatch for " + name);
    Slot& slot = slots_[name];
    const auto n = static_cast<std::size_t>(param.size());
    if (slot.first.empty()) slot.first.assign(n, 0);
    real* p = param.raw();
    const real* g = grad.raw();
    ++slot.count;
    if (kind_ == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < n; ++i) {
        slot.first[i] = static_cast<real>(momentum_ * slot.first[i] + g[i]);
        p[i] = static_cast<real>(p[i] - lr * slot.first[i]);
      }
      continue;
    }
    if (slot.second.empty()) slot.second.assign(n, 0);
    const double c1 = 1 - std::pow(beta1, static_cast<double>(slot.count));
    const double c2 = 1 - std::pow(beta2, static_cast<double>(slot.count));
    for (std::size_t i = 0; i < n; ++i) {
      const double m = beta1 * slot.first[i] + (1 - beta1) * g[i];
      const double v = beta2 * slot.second[i] + (1 - beta2) * double(g[i]) * g[i];
      slot.first[i] = static_cast<real>(m);
      slot.second[i] = static_cast<real>(v);
      p[i] = static_cast<real>(p[i] - lr * (m / c1) / (std::sqrt(v / c2) + eps));
    }
  }
}

StepMetrics train_step(PipelineSet& pipelines, Optimizer& optimizer, const Batch& batch, double lr,
                       std::int64_t epoch, std::int64_t step, JointLoss* detail) {
  Tape tape;
  JointLoss loss = joint_loss(pipelines, tape, batch.images, batch.labels);
  StepMetrics metrics;
  metrics.epoch = epoch;
  metrics.step = step;
  metrics.lr = lr;
  metrics.joint_loss = loss.total.value().item();
  metrics.per_pipeline_loss.assign(loss.per_pipeline.begin(), loss.per_pipeline.end());
  if (!std::isfinite(metrics.joint_loss))
    throw DivergedError(static_cast<int>(epoch), step,
                        "joint loss is not finite at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
  if (tape.requires_grad(loss.total)) optimizer.step(pipelines.store(), tape.backward(loss.total), lr);
  if (detail) *detail = std::move(loss);
  return metrics;
}

std::vector<int> predictions(const Tensor& logits) {
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const real* row = logits.raw() + i * k;
    out[static_cast<std::size_t>(i)] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

namespace {

std::int64_t correct(const Tensor& logits, std::span<const int> labels) {
  const auto pred = predictions(logits);
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return hits;
}

}  // namespace

TrainLog train(PipelineSet& pipelines, const Dataset& data, const TrainConfig& config, const TrainHooks& hooks) {
  validate(config, pipelines.pipeline_count());
  if (data.size() == 0) throw ContractError("train: empty dataset");
  if (!config.pipeline_weights.empty()) pipelines.set_weights(config.pipeline_weights);

  const std::size_t count = pipelines.pipeline_count();
  const std::int64_t side = pipelines.input_shape(1)[2];
  Optimizer optimizer(config.optimizer, config.momentum);
  TrainLog log;
  std::int64_t step = 0;
  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(config.schedule, config.base_lr, epoch, config.epochs);
    EpochMetrics summary;
    summary.epoch = epoch;
    summary.lr = lr;
    summary.mean_loss.assign(count, 0);
    std::vector<std::int64_t> hits(count, 0);
    std::int64_t seen = 0;
    BatchStream stream = batches(data, {config.batch_size, config.seed, static_cast<std::uint64_t>(epoch)}, side);
    while (auto batch = stream.next()) {
      JointLoss detail;
      StepMetrics m = train_step(pipelines, optimizer, *batch, lr, epoch, step++, &detail);
      const auto b = static_cast<std::int64_t>(batch->labels.size());
      for (std::size_t j = 0; j < count; ++j) {
        summary.mean_loss[j] += m.per_pipeline_loss[j] * static_cast<double>(b);
        hits[j] += correct(detail.logits[j], batch->labels);
      }
      summary.mean_joint_loss += m.joint_loss * static_cast<double>(b);
      seen += b;
      ++summary.steps;
      if (hooks.on_step) hooks.on_step(m);
      log.steps.push_back(std::move(m));
    }
    for (std::size_t j = 0; j < count; ++j) {
      summary.mean_loss[j] /= static_cast<double>(seen);
      summary.train_accuracy.push_back(static_cast<double>(hits[j]) / static_cast<double>(seen));
    }
    summary.mean_joint_loss /= static_cast<double>(seen);
    log.epochs.push_back(summary);
    if (hooks.on_epoch && !hooks.on_epoch(summary)) break;
  }
  return log;
}

EvalResult evaluate_split(const PipelineSet& pipelines, const Dataset& data, std::size_t pipeline,
                          std::int64_t batch_size) {
  if (pipeline >= pipelines.pipeline_count())
    throw ContractError("pipeline index " + std::to_string(pipeline) + " out of range");
  if (data.size() == 0) throw ContractError("evaluate: empty dataset");
  const std::int64_t side = pipelines.input_shape(1)[2];
  BatchStream stream = batches(data, {std::min(batch_size, data.size()), 0, 0, false}, side);
  std::int64_t hits = 0;
  double loss = 0;
  while (auto batch = stream.next()) {
    Tape tape(false);
    const Var logits = pipelines.forward(pipeline, tape.constant(batch->images));
    hits += correct(logits.value(), batch->labels);
    loss += static_cast<double>(softmax_cross_entropy(logits, batch->labels).value().item()) *
            static_cast<double>(batch->labels.size());
  }
  const auto n = static_cast<double>(data.size());
  return {static_cast<double>(hits) / n, loss / n};
}

double evaluate(const PipelineSet& pipelines, const Dataset& data, std::size_t pipeline) {
  return evaluate_split(pipelines, data, pipeline).accuracy;
}

}  // namespace rdc
