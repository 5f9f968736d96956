#include "rdc/model.hpp"

#include <cmath>
#include <random>

#include "rdc/error.hpp"
#include "rdc/seed.hpp"

namespace rdc {
namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

}  // namespace

const std::string& layer_name(const Layer& layer) {
  return std::visit([](const auto& l) -> const std::string& { return l.name; }, layer);
}

Tensor& ParameterStore::insert(const std::string& name, Tensor value) {
  if (contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
  order_.push_back(name);
  return tensors_.emplace(name, std::move(value)).first->second;
}

Tensor& ParameterStore::at(std::string_view name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
  return it->second;
}

const Tensor& ParameterStore::at(std::string_view name) const {
  return const_cast<ParameterStore*>(this)->at(name);
}

std::int64_t ParameterStore::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : tensors_) n += t.size();
  return n;
}

std::string weight_name(const std::string& graph, const std::string& layer) { return graph + "." + layer + ".weight"; }
std::string bias_name(const std::string& graph, const std::string& layer) { return graph + "." + layer + ".bias"; }

ModelGraph::ModelGraph(std::string name, std::vector<Layer> layers, std::optional<Shape> sample_shape)
    : name_(std::move(name)),
      layers_(std::move(layers)),
      sample_shape_(std::move(sample_shape)),
      store_(std::make_shared<ParameterStore>()) {
  if (name_.empty()) throw ContractError("model graph needs a name");
  std::map<std::string, int, std::less<>> seen;
  for (const Layer& layer : layers_) {
    if (++seen[layer_name(layer)] > 1) throw ContractError("duplicate layer name '" + layer_name(layer) + "'");
    std::visit(overloaded{[&](const ConvLayer& l) {
                            l.spec.validate();
                            store_->insert(weight_name(name_, l.name), Tensor(l.spec.weight_shape()));
                            store_->insert(bias_name(name_, l.name), Tensor(l.spec.bias_shape()));
                          },
                          [&](const LinearLayer& l) {
                            l.spec.validate();
                            store_->insert(weight_name(name_, l.name), Tensor(l.spec.weight_shape()));
                            store_->insert(bias_name(name_, l.name), Tensor(l.spec.bias_shape()));
                          },
                          [](const auto&) {}},
               layer);
  }
  if (sample_shape_) {
    Shape batched{1};
    batched.insert(batched.end(), sample_shape_->begin(), sample_shape_->end());
    output_shape(batched);
  }
}

Shape ModelGraph::output_shape(const Shape& input) const {
  element_count(input);
  if (sample_shape_ && Shape(input.begin() + 1, input.end()) != *sample_shape_)
    throw ContractError(name_ + ": expects samples of shape " + to_string(*sample_shape_) + ", got " +
                        to_string(input));
  Shape shape = input;
  for (const Layer& layer : layers_) {
    std::visit(overloaded{[&](const ConvLayer& l) {
                            if (shape.size() != 4 || shape[1] != l.spec.in_channels)
                              throw ContractError(name_ + "." + l.name + ": cannot consume " + to_string(shape));
                            shape = {shape[0], l.spec.out_channels, l.spec.output_extent(shape[2]),
                                     l.spec.output_extent(shape[3])};
                          },
                          [&](const PoolLayer& l) {
                            if (shape.size() != 4 || shape[2] % 2 || shape[3] % 2)
                              throw ContractError(name_ + "." + l.name + ": cannot pool " + to_string(shape));
                            shape = {shape[0], shape[1], shape[2] / 2, shape[3] / 2};
                          },
                          [&](const FlattenLayer&) { shape = {shape[0], element_count(shape) / shape[0]}; },
                          [&](const LinearLayer& l) {
                            if (shape.size() != 2 || shape[1] != l.spec.in_features)
                              throw ContractError(name_ + "." + l.name + ": cannot consume " + to_string(shape));
                            shape = {shape[0], l.spec.out_features};
                          },
                          [&](const AddInputLayer& l) {
                            if (shape != input)
                              throw ContractError(name_ + "." + l.name + ": residual shape " + to_string(shape) +
                                                  " differs from input " + to_string(input));
                          }},
               layer);
  }
  return shape;
}

Var ModelGraph::forward(Var input) const {
  output_shape(input.shape());
  Tape& tape = *input.tape;
  auto param = [&](const std::string& name) { return tape.parameter(name, store_->at(name)); };
  Var x = input;
  for (const Layer& layer : layers_) {
    x = std::visit(overloaded{[&](const ConvLayer& l) {
                                const Var y = conv2d(x, param(weight_name(name_, l.name)),
                                                     param(bias_name(name_, l.name)), l.spec);
                                return l.relu ? relu(y) : y;
                              },
                              [&](const PoolLayer&) { return maxpool2d(x); },
                              [&](const FlattenLayer&) { return flatten(x); },
                              [&](const LinearLayer& l) {
                                const Var y = linear(x, param(weight_name(name_, l.name)),
                                                     param(bias_name(name_, l.name)), l.spec);
                                return l.relu ? relu(y) : y;
                              },
                              [&](const AddInputLayer&) { return residual_add(x, input); }},
                   layer);
  }
  return x;
}

std::vector<std::string> ModelGraph::parameter_names() const {
  std::vector<std::string> names;
  for (const Layer& layer : layers_) {
    if (std::holds_alternative<ConvLayer>(layer) || std::holds_alternative<LinearLayer>(layer)) {
      names.push_back(weight_name(name_, layer_name(layer)));
      names.push_back(bias_name(name_, layer_name(layer)));
    }
  }
  return names;
}

std::int64_t ModelGraph::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& name : parameter_names()) n += store_->at(name).size();
  return n;
}

void ModelGraph::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, fnv1a(name_)));
  auto init = [&](const std::string& layer, std::int64_t fan_in, bool zero, double stddev = 0) {
    Tensor& w = store_->at(weight_name(name_, layer));
    const std::uint64_t stream = rng();  // drawn even for zero init, so later layers do not shift
    if (stddev <= 0) stddev = std::sqrt(2.0 / double(fan_in));
    w = zero ? Tensor(w.shape()) : Tensor::create(w.shape(), NormalFill{stream, 0, static_cast<real>(stddev)});
    Tensor& b = store_->at(bias_name(name_, layer));
    b = Tensor(b.shape());
  };
  for (const Layer& layer : layers_) {
    if (const auto* c = std::get_if<ConvLayer>(&layer))
      init(c->name, c->spec.in_channels * c->spec.kernel_size * c->spec.kernel_size, c->zero_init);
    else if (const auto* l = std::get_if<LinearLayer>(&layer))
      init(l->name, l->spec.in_features, false, l->init_stddev);
  }
}

void ModelGraph::rebind(const std::shared_ptr<ParameterStore>& target) {
  if (!target) throw ContractError("rebind to a null store");
  if (target == store_) return;
  for (const auto& name : parameter_names()) {
    if (target->contains(name)) {
      if (target->at(name).shape() != store_->at(name).shape())
        throw ContractError("rebind: parameter '" + name + "' has a different shape in the target store");
    } else {
      target->insert(name, std::move(store_->at(name)));
    }
  }
  store_ = target;
}

std::vector<std::int64_t> conv_kernels(const ModelGraph& graph) {
  std::vector<std::int64_t> kernels;
  for (const Layer& layer : graph.layers())
    if (const auto* c = std::get_if<ConvLayer>(&layer)) kernels.push_back(c->spec.kernel_size);
  return kernels;
}

ModelGraph build_toy_backbone(std::int64_t input_size, std::int64_t num_classes, std::uint64_t seed) {
  if (input_size < 4 || input_size % 4 != 0)
    throw ContractError("toy backbone: input size " + std::to_string(input_size) + " is not a positive multiple of 4");
  if (num_classes < 1) throw ContractError("toy backbone: class count must be positive");
  const std::int64_t pooled = input_size / 4;
  ModelGraph graph("backbone",
                   {ConvLayer{"conv1", Conv2dSpec::same(3, 32, 3)},
                    ConvLayer{"conv2", Conv2dSpec::same(32, 32, 3)},
                    PoolLayer{"pool1"},
                    ConvLayer{"conv3", Conv2dSpec::same(32, 64, 3)},
                    ConvLayer{"conv4", Conv2dSpec::same(64, 64, 3)},
                    PoolLayer{"pool2"},
                    FlattenLayer{"flatten"},
                    LinearLayer{"fc1", {64 * pooled * pooled, 512}, true},
                    LinearLayer{"fc2", {512, num_classes}, false, 0.01}},
                   Shape{3, input_size, input_size});
  graph.initialize(seed);
  return graph;
}

ModelGraph build_shallow_head(std::uint64_t seed) {
  ModelGraph graph("head",
                   {ConvLayer{"conv1", Conv2dSpec::same(3, 64, 5)},
                    ConvLayer{"conv2", Conv2dSpec::same(64, 12, 1)},
                    ConvLayer{"conv3", Conv2dSpec::same(12, 12, 3)},
                    ConvLayer{"conv4", Conv2dSpec::same(12, 12, 3)},
                    ConvLayer{"conv5", Conv2dSpec::same(12, 12, 3)},
                    ConvLayer{"conv6", Conv2dSpec::same(12, 12, 3)},
                    ConvLayer{"conv7", Conv2dSpec::same(12, 64, 1)},
                    ConvLayer{"conv8", Conv2dSpec::same(64, 3, 9), false}});
  graph.initialize(seed);
  return graph;
}

ModelGraph build_deep_head(std::uint64_t seed) {
  std::vector<Layer> layers{ConvLayer{"conv1", Conv2dSpec::same(3, 128, 3)}};
  for (int i = 2; i <= 7; ++i) layers.push_back(ConvLayer{"conv" + std::to_string(i), Conv2dSpec::same(128, 128, 3)});
  layers.push_back(ConvLayer{"conv8", Conv2dSpec::same(128, 3, 3), false, true});
  layers.push_back(AddInputLayer{"add"});
  ModelGraph graph("head", std::move(layers));
  graph.initialize(seed);
  return graph;
}

std::string to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::none: return "none";
    case HeadKind::shallow: return "shallow";
    case HeadKind::deep: return "deep";
  }
  return "none";
}

HeadKind parse_head_kind(const std::string& text) {
  if (text == "none") return HeadKind::none;
  if (text == "shallow") return HeadKind::shallow;
  if (text == "deep") return HeadKind::deep;
  throw ContractError("unknown head kind '" + text + "' (expected none, shallow or deep)");
}

PipelineSet PipelineSet::clone() const {
  PipelineSet copy;
  copy.store_ = std::make_shared<ParameterStore>();
  for (const auto& name : store_->names()) copy.store_->insert(name, store_->at(name));
  copy.graphs_ = graphs_;
  for (auto& g : copy.graphs_) g.rebind(copy.store_);
  copy.pipelines_ = pipelines_;
  copy.weights_ = weights_;
  copy.head_kind_ = head_kind_;
  return copy;
}

std::string PipelineSet::pipeline_name(std::size_t index) {
  switch (index) {
    case 0: return "shallow";
    case 1: return "deep";
    default: return "pipeline" + std::to_string(index);
  }
}

std::size_t PipelineSet::pipeline_index(const std::string& name) const {
  for (std::size_t j = 0; j < pipeline_count(); ++j)
    if (pipeline_name(j) == name) return j;
  throw ContractError("pipeline '" + name + "' does not exist in this model (" + std::to_string(pipeline_count()) +
                      " pipeline(s))");
}

void PipelineSet::set_weights(std::vector<double> weights) {
  if (weights.empty()) weights.assign(pipeline_count(), 1.0);
  if (weights.size() != pipeline_count())
    throw ContractError(std::to_string(weights.size()) + " pipeline weights for " + std::to_string(pipeline_count()) +
                        " pipeline(s)");
  for (double w : weights)
    if (!(w >= 0) || !std::isfinite(w)) throw ContractError("pipeline weights must be finite and non-negative");
  weights_ = std::move(weights);
}

Shape PipelineSet::input_shape(std::int64_t batch) const {
  Shape shape{batch};
  const auto& sample = *backbone().sample_shape();
  shape.insert(shape.end(), sample.begin(), sample.end());
  return shape;
}

std::int64_t PipelineSet::num_classes() const { return backbone().output_shape(input_shape(1))[1]; }

Var PipelineSet::forward(std::size_t pipeline, Var input) const {
  Var x = input;
  for (auto g : pipelines_.at(pipeline)) x = graphs_[g].forward(x);
  return x;
}

Tensor PipelineSet::logits(std::size_t pipeline, const Tensor& batch) const {
  Tape tape(false);
  return forward(pipeline, tape.constant(batch)).value();
}

ParameterReport PipelineSet::parameter_report() const {
  ParameterReport report;
  report.backbone = backbone().parameter_count();
  if (const ModelGraph* h = head()) report.head = h->parameter_count();
  return report;
}

PipelineSet assemble_pipelines(ModelGraph backbone, std::optional<ModelGraph> head, std::vector<double> weights) {
  if (!backbone.sample_shape()) throw ContractError("backbone must declare its input sample shape");
  PipelineSet set;
  set.store_ = backbone.shared_store();
  set.graphs_.push_back(std::move(backbone));
  set.pipelines_.push_back({0});
  if (head) {
    const Shape in = set.input_shape(1);
    if (head->output_shape(in) != in)
      throw ContractError("head output shape " + to_string(head->output_shape(in)) + " does not match backbone input " +
                          to_string(in));
    if (head->name() == set.graphs_.front().name()) throw ContractError("head and backbone share a graph name");
    head->rebind(set.store_);
    const bool residual = !head->layers().empty() && std::holds_alternative<AddInputLayer>(head->layers().back());
    set.head_kind_ = residual ? HeadKind::deep : HeadKind::shallow;
    set.graphs_.push_back(std::move(*head));
    set.pipelines_.push_back({1, 0});
  }
  set.set_weights(std::move(weights));
  return set;
}

}  // namespace rdc
