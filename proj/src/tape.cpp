#include "rdc/tape.hpp"

#include "rdc/error.hpp"

namespace rdc {

const Tensor& Var::value() const {
  if (tape == nullptr) throw ContractError("use of an unbound Var");
  return tape->value(*this);
}

const Tensor& BackwardPass::output() const { return tape_->nodes_[node_].value; }

const Tensor& BackwardPass::input(std::size_t i) const {
  return tape_->nodes_[tape_->nodes_[node_].inputs.at(i)].value;
}

std::size_t BackwardPass::input_count() const { return tape_->nodes_[node_].inputs.size(); }

Tensor* BackwardPass::input_grad(std::size_t i) {
  const auto id = tape_->nodes_[node_].inputs.at(i);
  const auto& node = tape_->nodes_[id];
  if (!node.requires_grad) return nullptr;
  Tensor& slot = (*grads_)[id];
  if (slot.empty()) slot = Tensor::zeros_like(node.value);
  return &slot;
}

std::size_t Tape::check_owned(Var v, const char* what) const {
  if (v.tape != this || v.index >= nodes_.size())
    throw ContractError(std::string(what) + ": value is not recorded on this tape");
  return v.index;
}

Var Tape::leaf(Tensor value, std::string name) {
  if (value.empty()) throw ContractError("tape leaf from a null tensor");
  if (!name.empty() && named_.contains(name)) throw ContractError("duplicate tape leaf name '" + name + "'");
  Node node;
  node.op = "leaf";
  node.requires_grad = grad_enabled_ && value.requires_grad();
  node.value = std::move(value);
  node.name = std::move(name);
  if (!node.name.empty()) named_.emplace(node.name, nodes_.size());
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  value.set_requires_grad(false);
  return leaf(std::move(value));
}

Var Tape::parameter(const std::string& name, const Tensor& value) {
  if (auto it = named_.find(name); it != named_.end()) {
    if (nodes_[it->second].value.shape() != value.shape())
      throw ContractError("parameter '" + name + "' rebound with a different shape");
    return {this, it->second};
  }
  Tensor copy = value;
  copy.set_requires_grad(true);
  return leaf(std::move(copy), name);
}

Var Tape::record(std::string op, Tensor value, std::initializer_list<Var> inputs, BackwardRule rule) {
  return record(std::move(op), std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(rule));
}

Var Tape::record(std::string op, Tensor value, std::span<const Var> inputs, BackwardRule rule) {
  Node node;
  node.op = std::move(op);
  bool inputs_finite = true;
  for (Var in : inputs) {
    const auto id = check_owned(in, node.op.c_str());
    node.inputs.push_back(id);
    node.requires_grad = node.requires_grad || nodes_[id].requires_grad;
    if (debug_checks_) inputs_finite = inputs_finite && nodes_[id].value.all_finite();
  }
  if (debug_checks_ && inputs_finite && !value.all_finite())
    throw ContractError("op '" + node.op + "' produced a non-finite value from finite inputs");
  if (node.requires_grad) node.rule = std::move(rule);
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

bool Tape::requires_grad(Var v) const { return nodes_[check_owned(v, "requires_grad")].requires_grad; }

const Tensor& Tape::value(Var v) const { return nodes_[check_owned(v, "value")].value; }

const std::string& Tape::op(Var v) const { return nodes_[check_owned(v, "op")].op; }

GradMap Tape::backward(Var loss) const {
  const auto root = check_owned(loss, "backward");
  if (nodes_[root].value.size() != 1)
    throw ContractError("backward: loss must be a scalar, got shape " + to_string(nodes_[root].value.shape()));

  std::vector<Tensor> grads(nodes_.size());
  if (nodes_[root].requires_grad) grads[root] = Tensor(nodes_[root].value.shape(), real(1));

  for (std::size_t i = root + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!node.rule || grads[i].empty()) continue;
    // The rule may write into grads of earlier nodes only, so the reference
    // to grads[i] stays valid.
    BackwardPass pass(*this, i, grads[i], grads);
    node.rule(pass);
  }

  GradMap out;
  for (const auto& [name, id] : named_) {
    const Node& node = nodes_[id];
    if (!node.requires_grad) continue;
    out.emplace(name, grads[id].empty() ? Tensor::zeros_like(node.value) : std::move(grads[id]));
  }
  return out;
}

}  // namespace rdc
