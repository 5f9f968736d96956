#pragma once

#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rdc/tensor.hpp"

namespace rdc {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid as long as the
// tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t index = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// View handed to a backward rule while the tape is being unwound.
class BackwardPass {
 public:
  const Tensor& grad_output() const { return *grad_output_; }
  const Tensor& output() const;
  const Tensor& input(std::size_t i) const;
  std::size_t input_count() const;

  // Accumulation slot for the gradient of input i, zero-initialised on first
  // access. Null when that input does not need a gradient.
  Tensor* input_grad(std::size_t i);

 private:
  friend class Tape;
  BackwardPass(const Tape& tape, std::size_t node, const Tensor& grad_output, std::vector<Tensor>& grads)
      : tape_(&tape), node_(node), grad_output_(&grad_output), grads_(&grads) {}

  const Tape* tape_;
  std::size_t node_;
  const Tensor* grad_output_;
  std::vector<Tensor>* grads_;
};

using GradMap = std::map<std::string, Tensor, std::less<>>;

// Reverse-mode autodiff record. Nodes are appended in execution order, so the
// node list is always topologically sorted. Named leaves are the parameters:
// requesting the same name twice returns the same leaf, which is how shared
// weights collect summed gradients from every use.
class Tape {
 public:
  using BackwardRule = std::function<void(BackwardPass&)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf whose requires_grad follows the tensor's flag. A non-empty name must
  // be unique on the tape.
  Var leaf(Tensor value, std::string name = {});
  Var constant(Tensor value);
  // Named trainable leaf, created once per name.
  Var parameter(const std::string& name, const Tensor& value);

  Var record(std::string op, Tensor value, std::initializer_list<Var> inputs, BackwardRule rule);
  Var record(std::string op, Tensor value, std::span<const Var> inputs, BackwardRule rule);

  GradMap backward(Var loss) const;

  bool grad_enabled() const noexcept { return grad_enabled_; }
  bool requires_grad(Var v) const;
  const Tensor& value(Var v) const;
  const std::string& op(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  // When on, every recorded op verifies that finite inputs produced a finite
  // output and throws ContractError otherwise.
  void set_debug_checks(bool on) noexcept { debug_checks_ = on; }

 private:
  friend class BackwardPass;

  struct Node {
    std::string op;
    std::string name;
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardRule rule;
    bool requires_grad = false;
  };

  std::size_t check_owned(Var v, const char* what) const;

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t, std::less<>> named_;
  bool grad_enabled_;
  bool debug_checks_ = false;
};

}  // namespace rdc
