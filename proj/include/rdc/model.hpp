#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "rdc/ops.hpp"

namespace rdc {

struct ConvLayer {
  std::string name;
  Conv2dSpec spec;
  bool relu = true;
  bool zero_init = false;  // weights start at zero instead of Kaiming
};

struct PoolLayer {
  std::string name;
};

struct FlattenLayer {
  std::string name;
};

struct LinearLayer {
  std::string name;
  LinearSpec spec;
  bool relu = false;
  double init_stddev = 0;  // > 0 overrides Kaiming
};

// Adds the graph's own input to the running activation (residual shortcut).
struct AddInputLayer {
  std::string name;
};

using Layer = std::variant<ConvLayer, PoolLayer, FlattenLayer, LinearLayer, AddInputLayer>;

const std::string& layer_name(const Layer& layer);

// Named parameter tensors. Entries never move once inserted, so references
// handed out stay valid for the store's lifetime.
class ParameterStore {
 public:
  Tensor& insert(const std::string& name, Tensor value);
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const { return tensors_.find(name) != tensors_.end(); }
  // Insertion order.
  const std::vector<std::string>& names() const noexcept { return order_; }
  std::int64_t parameter_count() const;

 private:
  std::map<std::string, Tensor, std::less<>> tensors_;
  std::vector<std::string> order_;
};

// An ordered stack of layers whose parameters live in a (possibly shared)
// ParameterStore under "<graph>.<layer>.weight|bias". Copies of a graph refer
// to the same store.
class ModelGraph {
 public:
  // Allocates zero-filled parameters in a fresh store.
  ModelGraph(std::string name, std::vector<Layer> layers, std::optional<Shape> sample_shape = std::nullopt);

  const std::string& name() const noexcept { return name_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  // Per-sample [C,H,W] the graph requires, when it is resolution-bound.
  const std::optional<Shape>& sample_shape() const noexcept { return sample_shape_; }

  // Output shape for a batched input shape; throws ContractError when the
  // layers cannot consume it.
  Shape output_shape(const Shape& input) const;
  Var forward(Var input) const;

  std::vector<std::string> parameter_names() const;
  std::int64_t parameter_count() const;

  // Kaiming fan-in normal weights, zero biases, zero weights where a layer
  // asks for it. The random stream depends only on (seed, graph name).
  void initialize(std::uint64_t seed);

  ParameterStore& store() { return *store_; }
  const ParameterStore& store() const { return *store_; }
  const std::shared_ptr<ParameterStore>& shared_store() const noexcept { return store_; }
  // Moves this graph's parameters into `target` and resolves through it from
  // now on.
  void rebind(const std::shared_ptr<ParameterStore>& target);

 private:
  std::string name_;
  std::vector<Layer> layers_;
  std::optional<Shape> sample_shape_;
  std::shared_ptr<ParameterStore> store_;
};

std::string weight_name(const std::string& graph, const std::string& layer);
std::string bias_name(const std::string& graph, const std::string& layer);

// Kernel sizes of the conv layers in order.
std::vector<std::int64_t> conv_kernels(const ModelGraph& graph);

// conv3-32, conv32-32, pool, conv32-64, conv64-64, pool, flatten,
// FC(64*(s/4)^2 -> 512), FC(512 -> classes). The classifier starts at
// N(0, 0.01) so initial logits are near uniform.
ModelGraph build_toy_backbone(std::int64_t input_size, std::int64_t num_classes, std::uint64_t seed = 0);
// conv3-64 k5, conv64-12 k1, 4 x conv12-12 k3, conv12-64 k1, conv64-3 k9.
ModelGraph build_shallow_head(std::uint64_t seed = 0);
// conv3-128, 6 x conv128-128, conv128-3 (zero-initialised), then + input.
ModelGraph build_deep_head(std::uint64_t seed = 0);

enum class HeadKind { none, shallow, deep };

std::string to_string(HeadKind kind);
HeadKind parse_head_kind(const std::string& text);

struct ParameterReport {
  std::int64_t backbone = 0;
  std::int64_t head = 0;
  std::int64_t total() const { return backbone + head; }
};

// Pipeline 0 ("shallow") = backbone(x); pipeline 1 ("deep") =
// backbone(head(x)). The backbone graph object is held once, so both
// pipelines read and train the very same parameter tensors.
class PipelineSet {
 public:
  PipelineSet(const PipelineSet&) = delete;
  PipelineSet& operator=(const PipelineSet&) = delete;
  PipelineSet(PipelineSet&&) = default;
  PipelineSet& operator=(PipelineSet&&) = default;

  // Independent deep copy with its own store.
  PipelineSet clone() const;

  std::size_t pipeline_count() const noexcept { return pipelines_.size(); }
  static std::string pipeline_name(std::size_t index);
  // Throws ContractError for an unknown or absent pipeline name.
  std::size_t pipeline_index(const std::string& name) const;

  const ModelGraph& backbone() const { return graphs_.front(); }
  const ModelGraph* head() const { return graphs_.size() > 1 ? &graphs_[1] : nullptr; }
  HeadKind head_kind() const noexcept { return head_kind_; }
  // Graph indices applied in order by pipeline j.
  const std::vector<std::size_t>& pipeline(std::size_t j) const { return pipelines_.at(j); }
  const std::vector<ModelGraph>& graphs() const noexcept { return graphs_; }

  const std::vector<double>& weights() const noexcept { return weights_; }
  void set_weights(std::vector<double> weights);

  ParameterStore& store() { return *store_; }
  const ParameterStore& store() const { return *store_; }

  // Batched input shape expected by the backbone for `batch` samples.
  Shape input_shape(std::int64_t batch) const;
  std::int64_t num_classes() const;

  Var forward(std::size_t pipeline, Var input) const;
  // Forward on a gradient-free tape.
  Tensor logits(std::size_t pipeline, const Tensor& batch) const;

  ParameterReport parameter_report() const;

 private:
  friend PipelineSet assemble_pipelines(ModelGraph, std::optional<ModelGraph>, std::vector<double>);
  PipelineSet() = default;

  std::shared_ptr<ParameterStore> store_;
  std::vector<ModelGraph> graphs_;
  std::vector<std::vector<std::size_t>> pipelines_;
  std::vector<double> weights_;
  HeadKind head_kind_ = HeadKind::none;
};

// `weights` empty means all ones. A head is recognised as shallow/deep by its
// graph topology only for reporting; any shape-preserving head is accepted.
PipelineSet assemble_pipelines(ModelGraph backbone, std::optional<ModelGraph> head,
                               std::vector<double> weights = {});

}  // namespace rdc
