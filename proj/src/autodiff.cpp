#include "ldkl/autodiff.hpp"

#include "ldkl/error.hpp"

namespace ldkl::ad {

Parameter& ParameterStore::add(std::string name, Tensor value, ParamGroup group, bool requires_grad) {
  if (index_.contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
  index_.emplace(name, params_.size());
  Parameter p;
  p.name = std::move(name);
  p.grad = Tensor(value.shape(), 0.0);
  p.value = std::move(value);
  p.requires_grad = requires_grad && group != ParamGroup::Buffer;
  p.group = group;
  params_.push_back(std::move(p));
  return params_.back();
}

Parameter& ParameterStore::get(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
  return params_[it->second];
}

const Parameter& ParameterStore::get(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
  return params_[it->second];
}

bool ParameterStore::contains(std::string_view name) const { return index_.contains(std::string(name)); }

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::size_t ParameterStore::count(ParamGroup group) const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.group == group) n += p.value.numel();
  return n;
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Constant: return "constant";
    case OpKind::Parameter: return "parameter";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::AddBroadcast: return "add_broadcast";
    case OpKind::MulBroadcast: return "mul_broadcast";
    case OpKind::AddRow: return "add_row";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::SqrtFloor: return "sqrt_floor";
    case OpKind::Square: return "square";
    case OpKind::Elu: return "elu";
    case OpKind::Sum: return "sum";
    case OpKind::ColumnSums: return "column_sums";
    case OpKind::Reshape: return "reshape";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::ConvTranspose2d: return "conv_transpose2d";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::StopGrad: return "stop_grad";
    case OpKind::Cholesky: return "cholesky";
    case OpKind::TriSolve: return "tri_solve";
    case OpKind::Diag: return "diag";
    case OpKind::LowerExpDiag: return "lower_exp_diag";
    case OpKind::ArdSeCross: return "ard_se_cross";
  }
  return "?";
}

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->value(id_);
}

Var Tape::constant(Tensor value) {
  if (consumed_) throw ContractError("tape already consumed by backward(); call reset()");
  Node n;
  n.kind = OpKind::Constant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& p) {
  if (consumed_) throw ContractError("tape already consumed by backward(); call reset()");
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.kind = OpKind::Parameter;
  n.value = p.value;
  n.needs_grad = p.requires_grad;
  n.param = &p;
  nodes_.push_back(std::move(n));
  param_nodes_.emplace(&p, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(OpKind kind, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  if (consumed_) throw ContractError("tape already consumed by backward(); call reset()");
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  for (const Var& v : inputs) {
    if (v.tape() != this) throw ContractError(std::string(op_name(kind)) + ": input belongs to another tape");
    n.inputs.push_back(v.id());
    n.needs_grad = n.needs_grad || nodes_[v.id()].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_ref(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Tape::backward(Var root) {
  if (consumed_) throw ContractError("backward() called twice on the same tape without reset()");
  if (root.tape() != this) throw ContractError("backward root belongs to another tape");
  if (root.numel() != 1)
    throw ContractError("backward root must be scalar, got shape " + shape_string(root.shape()));
  consumed_ = true;
  if (!nodes_[root.id()].needs_grad) return;
  grad_ref(root.id()).fill(1.0);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    // Callbacks only write to input accumulators, so n.grad is stable while they run.
    if (n.backward) n.backward(*this, n.grad);
    if (n.param) {
      auto& pg = n.param->grad;
      if (pg.empty() || pg.shape() != n.grad.shape()) pg = Tensor(n.grad.shape(), 0.0);
      for (std::size_t k = 0; k < pg.numel(); ++k) pg[k] += n.grad[k];
    }
  }
}

void Tape::reset() {
  nodes_.clear();
  param_nodes_.clear();
  consumed_ = false;
}

}  // namespace ldkl::ad
