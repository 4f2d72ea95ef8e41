#pragma once

// Reverse-mode automatic differentiation on a single-use tape.
//
// A Tape records every operation in creation order, which is a topological order of the
// computation graph. backward() walks it once in reverse, then the tape is consumed; a
// second backward() without reset() is a ContractError.

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ldkl/tensor.hpp"

namespace ldkl::ad {

/// Which optimizer group a parameter belongs to. Buffers (batch-norm running statistics)
/// are persisted in checkpoints but never optimized.
enum class ParamGroup { Network, GaussianProcess, Buffer };

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool requires_grad = true;
  ParamGroup group = ParamGroup::Network;

  void zero_grad() { grad = Tensor(value.shape(), 0.0); }
};

/// Named parameters in insertion order. References returned by add()/get() stay valid for
/// the lifetime of the store.
class ParameterStore {
 public:
  Parameter& add(std::string name, Tensor value, ParamGroup group, bool requires_grad = true);
  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const { return params_.size(); }
  std::deque<Parameter>& items() { return params_; }
  const std::deque<Parameter>& items() const { return params_; }

  void zero_grad();
  /// Sum of element counts over parameters in `group`.
  std::size_t count(ParamGroup group) const;

 private:
  std::deque<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class OpKind {
  Constant,
  Parameter,
  Add,
  Sub,
  Mul,
  Div,
  Scale,
  AddScalar,
  AddBroadcast,
  MulBroadcast,
  AddRow,
  MatMul,
  Transpose,
  Exp,
  Log,
  Sqrt,
  SqrtFloor,
  Square,
  Elu,
  Sum,
  ColumnSums,
  Reshape,
  Concat,
  Slice,
  Conv2d,
  ConvTranspose2d,
  BatchNorm,
  StopGrad,
  Cholesky,
  TriSolve,
  Diag,
  LowerExpDiag,
  ArdSeCross,
};

const char* op_name(OpKind kind);

class Tape;

/// Handle to a tape node.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
  double item() const { return value().item(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Called during backward with the node's output gradient; must accumulate into inputs
  /// through grad_ref().
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to `p`; repeated calls with the same parameter return the same node.
  Var parameter(Parameter& p);
  Var record(OpKind kind, Tensor value, std::vector<Var> inputs, BackwardFn backward);

  /// Propagates d(root)/d(node) to every node that needs it and adds parameter gradients
  /// into Parameter::grad.
  void backward(Var root);
  void reset();

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  OpKind kind(std::size_t id) const { return nodes_[id].kind; }
  /// Gradient accumulator of a node, zero-initialized on first access.
  Tensor& grad_ref(std::size_t id);
  /// Gradient after backward(); empty tensor when the node received none.
  const Tensor& grad(Var v) const { return nodes_[v.id()].grad; }

 private:
  struct Node {
    OpKind kind = OpKind::Constant;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    bool needs_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  bool consumed_ = false;
};

}  // namespace ldkl::ad
