#include "mcvae/diffmath.hpp"

#include <stdexcept>

namespace mcvae::ad {

const Matrix& Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) {
    throw DimensionMismatch("scalar() on a " + std::to_string(v.rows()) + "x" +
                            std::to_string(v.cols()) + " value");
  }
  return v(0, 0);
}

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), nullptr, false});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), nullptr, true});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape() != this) throw std::logic_error("Var recorded on a different tape");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), Matrix(), needs ? std::move(backward) : nullptr, needs});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Matrix value, const std::vector<Var>& inputs, Backward backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape() != this) throw std::logic_error("Var recorded on a different tape");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), Matrix(), needs ? std::move(backward) : nullptr, needs});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(const Var& v, const Matrix& adjoint) {
  Node& node = nodes_[v.id()];
  if (!node.requires_grad) return;
  if (adjoint.rows() != node.value.rows() || adjoint.cols() != node.value.cols()) {
    throw std::logic_error("adjoint shape does not match value shape");
  }
  if (node.grad.size() == 0) {
    node.grad = adjoint;
  } else {
    node.grad += adjoint;
  }
}

void Tape::backward(const Var& output) {
  if (output.tape() != this) throw std::logic_error("backward on a foreign Var");
  if (nodes_[output.id()].value.size() != 1) {
    throw DimensionMismatch("backward requires a scalar output");
  }
  for (Node& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[output.id()].requires_grad) return;
  nodes_[output.id()].grad = Matrix::Ones(1, 1);
  for (int i = output.id(); i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.backward && n.grad.size() != 0) n.backward(*this, n.grad, n.value);
  }
}

Matrix Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

}  // namespace mcvae::ad
