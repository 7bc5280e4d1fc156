#include <cmath>
#include <stdexcept>

#include "mcvae/diffmath.hpp"

namespace mcvae::ad {

const Matrix& ParameterSet::at(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

Matrix& ParameterSet::at(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParameterSet::entry_count() const {
  std::size_t n = 0;
  for (const auto& [_, v] : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

Var Binding::operator[](const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const Matrix& value = parameters_.at(name);
  Var v = trainable_ ? tape_.variable(value) : tape_.constant(value);
  bound_.emplace(name, v);
  return v;
}

ParameterSet Binding::gradients() const {
  ParameterSet out;
  for (const auto& [name, value] : parameters_.items()) {
    auto it = bound_.find(name);
    out.set(name, it == bound_.end() ? Matrix(Matrix::Zero(value.rows(), value.cols()))
                                     : tape_.grad(it->second));
  }
  return out;
}

double DifferentiableGraph::evaluate() const { return evaluate(parameters_); }

double DifferentiableGraph::evaluate(const ParameterSet& at) const {
  Tape tape;
  Binding binding(tape, at, false);
  return fn_(binding).scalar();
}

std::pair<double, ParameterSet> DifferentiableGraph::value_and_gradient() const {
  Tape tape;
  Binding binding(tape, parameters_, true);
  Var out = fn_(binding);
  const double value = out.scalar();
  tape.backward(out);
  return {value, binding.gradients()};
}

double gradient_check(const DifferentiableGraph& graph, double epsilon) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
    throw std::invalid_argument("gradient_check epsilon must lie in [1e-7, 1e-3]");
  }
  auto [value, analytic] = graph.value_and_gradient();
  if (!std::isfinite(value)) throw NonFiniteOutput("graph output is not finite");

  ParameterSet probe = graph.parameters();
  double worst = 0.0;
  for (auto& [name, matrix] : probe.items()) {
    const Matrix& grad = analytic.at(name);
    if (!grad.allFinite()) throw NonFiniteOutput("gradient of '" + name + "' is not finite");
    for (Index k = 0; k < matrix.size(); ++k) {
      const double original = matrix.data()[k];
      matrix.data()[k] = original + epsilon;
      const double up = graph.evaluate(probe);
      matrix.data()[k] = original - epsilon;
      const double down = graph.evaluate(probe);
      matrix.data()[k] = original;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NonFiniteOutput("graph output is not finite near parameter '" + name + "'");
      }
      const double central = (up - down) / (2.0 * epsilon);
      const double a = grad.data()[k];
      const double err = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace mcvae::ad
