#pragma once

// Reverse-mode differentiation over dense Eigen matrices.
//
// A Tape records every operation applied to Var handles. Calling
// Tape::backward on a 1x1 Var propagates adjoints to every node that
// requires a gradient. Tapes are single-threaded; distinct tapes are
// independent.

#include <Eigen/Dense>

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mcvae/errors.hpp"

namespace mcvae {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;
using Index = Eigen::Index;

namespace ad {

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  // Receives the adjoint and the value of the recorded result.
  using Backward = std::function<void(Tape&, const Matrix&, const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var constant(double value);
  Var variable(Matrix value);

  // Records an operation result. The backward closure receives the adjoint of
  // the result and must accumulate into its inputs. It is dropped when no
  // input requires a gradient.
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Matrix value, const std::vector<Var>& inputs, Backward backward);

  void accumulate(const Var& v, const Matrix& adjoint);

  void backward(const Var& output);
  // Adjoint of v after backward(); zeros when nothing flowed into it.
  Matrix grad(const Var& v) const;

  const Matrix& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Binary ops broadcast a 1x1, 1xC or Rx1 operand
// against the other operand.

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator+(const Var& a, double s);
Var operator+(double s, const Var& a);
Var operator-(const Var& a, double s);
Var operator-(double s, const Var& a);
Var operator*(const Var& a, double s);
Var operator*(double s, const Var& a);
Var operator/(const Var& a, double s);
// Matrix product.
Var operator*(const Var& a, const Var& b);

Var cwise_mul(const Var& a, const Var& b);
Var cwise_div(const Var& a, const Var& b);

Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);
Var relu(const Var& a);
Var tanh(const Var& a);
// Gradient is zero where the input lies outside [lo, hi].
Var clamp(const Var& a, double lo, double hi);

Var sum(const Var& a);
// Rx1: sum of each row.
Var row_sum(const Var& a);
// 1xC: sum of each column.
Var col_sum(const Var& a);
Var transpose(const Var& a);

// Diagonal of a square matrix as a column vector.
Var diag(const Var& a);
// Square matrix with the given column vector on its diagonal.
Var diag_matrix(const Var& v);

Var gather_rows(const Var& a, const std::vector<int>& rows);
Var gather_cols(const Var& a, const std::vector<int>& cols);
Var block(const Var& a, Index row, Index col, Index rows, Index cols);
Var hconcat(const std::vector<Var>& parts);
Var vconcat(const std::vector<Var>& parts);

// Row-wise log-softmax.
Var log_softmax_rows(const Var& a);

// out[k] = sum over (r, c) in entries[k] of a(r, c); Kx1.
Var gather_sum(const Var& a, const std::vector<std::vector<std::pair<int, int>>>& entries);

// Squared-exponential cross covariance between the rows of a (NxQ) and b (MxQ):
// exp(log_variance) * exp(-0.5 * sum_q ((a_iq - b_jq) / exp(log_lengthscale_q))^2).
// log_lengthscale is 1xQ, log_variance 1x1.
Var se_cross(const Var& a, const Var& b, const Var& log_lengthscale, const Var& log_variance);

// Lower-triangular matrix whose strict lower part is taken from raw and whose
// diagonal is exp(diag(raw)).
Var lower_exp_diag(const Var& raw);

// ---------------------------------------------------------------------------
// Linear algebra.

inline constexpr double kDefaultJitter = 1e-6;
inline constexpr double kMaxJitter = 1e-2;

// Cholesky factor of a + jitter*I. On failure the jitter is multiplied by 10
// until it exceeds kMaxJitter, then NotPositiveDefinite is raised. A zero
// starting jitter escalates from kDefaultJitter.
Var cholesky(const Var& a, double jitter = 0.0);
// Solves l * x = b, or l^T * x = b when transpose is set.
Var solve_lower(const Var& l, const Var& b, bool transpose = false);
// 2 * sum(log(diag(l))).
Var logdet_from_factor(const Var& l);

// ---------------------------------------------------------------------------
// Named parameter collections.

class ParameterSet {
 public:
  using Map = std::map<std::string, Matrix>;

  void set(const std::string& name, Matrix value) { values_[name] = std::move(value); }
  bool contains(const std::string& name) const { return values_.count(name) != 0; }
  const Matrix& at(const std::string& name) const;
  Matrix& at(const std::string& name);
  const Map& items() const { return values_; }
  Map& items() { return values_; }
  std::size_t entry_count() const;

 private:
  Map values_;
};

// Binds a ParameterSet onto a tape. Each parameter becomes a leaf the first
// time it is requested; leaves are variables when trainable, constants
// otherwise.
class Binding {
 public:
  Binding(Tape& tape, const ParameterSet& parameters, bool trainable = true)
      : tape_(tape), parameters_(parameters), trainable_(trainable) {}

  Var operator[](const std::string& name);
  Tape& tape() { return tape_; }
  const ParameterSet& parameters() const { return parameters_; }
  bool trainable() const { return trainable_; }

  // Gradients for every parameter after tape().backward(); parameters that
  // were never requested get zero gradients.
  ParameterSet gradients() const;

 private:
  Tape& tape_;
  const ParameterSet& parameters_;
  bool trainable_;
  std::map<std::string, Var> bound_;
};

// A scalar-valued computation over named parameters.
class DifferentiableGraph {
 public:
  using Function = std::function<Var(Binding&)>;

  DifferentiableGraph(ParameterSet parameters, Function fn)
      : parameters_(std::move(parameters)), fn_(std::move(fn)) {}

  const ParameterSet& parameters() const { return parameters_; }
  ParameterSet& parameters() { return parameters_; }

  double evaluate() const;
  double evaluate(const ParameterSet& at) const;
  std::pair<double, ParameterSet> value_and_gradient() const;

 private:
  ParameterSet parameters_;
  Function fn_;
};

// Largest |analytic - central| / (|analytic| + |central| + 1e-12) over every
// parameter entry. epsilon must lie in [1e-7, 1e-3].
double gradient_check(const DifferentiableGraph& graph, double epsilon = 1e-5);

}  // namespace ad
}  // namespace mcvae
