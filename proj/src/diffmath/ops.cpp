#include <cmath>
#include <limits>

#include "mcvae/diffmath.hpp"

namespace mcvae::ad {
namespace {

std::string shape_of(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

Index broadcast_extent(Index a, Index b, const Matrix& x, const Matrix& y) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw DimensionMismatch("cannot broadcast " + shape_of(x) + " against " + shape_of(y));
}

Matrix expand(const Matrix& m, Index rows, Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  return m.replicate(rows / m.rows(), cols / m.cols());
}

// Sums an adjoint of the broadcast shape back onto the operand shape.
Matrix reduce_to(const Matrix& g, Index rows, Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Matrix::Constant(1, 1, g.sum());
  if (rows == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw std::logic_error("operation on an unbound Var");
  return *a.tape();
}

template <class Forward, class GradA, class GradB>
Var binary(const Var& a, const Var& b, Forward forward, GradA grad_a, GradB grad_b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Index r = broadcast_extent(av.rows(), bv.rows(), av, bv);
  const Index c = broadcast_extent(av.cols(), bv.cols(), av, bv);
  Matrix ae = expand(av, r, c);
  Matrix be = expand(bv, r, c);
  Matrix out = forward(ae, be);
  return tape_of(a).record(std::move(out), {a, b},
                           [a, b, r, c, grad_a, grad_b](Tape& t, const Matrix& g, const Matrix& out) {
                             const Matrix ae = expand(a.value(), r, c);
                             const Matrix be = expand(b.value(), r, c);
                             if (a.requires_grad()) {
                               t.accumulate(a, reduce_to(grad_a(g, ae, be, out), a.rows(), a.cols()));
                             }
                             if (b.requires_grad()) {
                               t.accumulate(b, reduce_to(grad_b(g, ae, be, out), b.rows(), b.cols()));
                             }
                           });
}

}  // namespace

Var operator+(const Var& a, const Var& b) {
  return binary(
      a, b, [](const Matrix& x, const Matrix& y) -> Matrix { return x + y; },
      [](const Matrix& g, const Matrix&, const Matrix&, const Matrix&) -> Matrix { return g; },
      [](const Matrix& g, const Matrix&, const Matrix&, const Matrix&) -> Matrix { return g; });
}

Var operator-(const Var& a, const Var& b) {
  return binary(
      a, b, [](const Matrix& x, const Matrix& y) -> Matrix { return x - y; },
      [](const Matrix& g, const Matrix&, const Matrix&, const Matrix&) -> Matrix { return g; },
      [](const Matrix& g, const Matrix&, const Matrix&, const Matrix&) -> Matrix { return -g; });
}

Var cwise_mul(const Var& a, const Var& b) {
  return binary(
      a, b, [](const Matrix& x, const Matrix& y) -> Matrix { return x.cwiseProduct(y); },
      [](const Matrix& g, const Matrix&, const Matrix& y, const Matrix&) -> Matrix {
        return g.cwiseProduct(y);
      },
      [](const Matrix& g, const Matrix& x, const Matrix&, const Matrix&) -> Matrix {
        return g.cwiseProduct(x);
      });
}

Var cwise_div(const Var& a, const Var& b) {
  return binary(
      a, b, [](const Matrix& x, const Matrix& y) -> Matrix { return x.cwiseQuotient(y); },
      [](const Matrix& g, const Matrix&, const Matrix& y, const Matrix&) -> Matrix {
        return g.cwiseQuotient(y);
      },
      [](const Matrix& g, const Matrix&, const Matrix& y, const Matrix& out) -> Matrix {
        return -g.cwiseProduct(out).cwiseQuotient(y);
      });
}

Var operator-(const Var& a) { return a * -1.0; }

Var operator+(const Var& a, double s) {
  Matrix out = a.value().array() + s;
  return tape_of(a).record(std::move(out), {a},
                           [a](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, g); });
}
Var operator+(double s, const Var& a) { return a + s; }
Var operator-(const Var& a, double s) { return a + (-s); }
Var operator-(double s, const Var& a) { return (a * -1.0) + s; }

Var operator*(const Var& a, double s) {
  Matrix out = a.value() * s;
  return tape_of(a).record(std::move(out), {a},
                           [a, s](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, g * s); });
}
Var operator*(double s, const Var& a) { return a * s; }
Var operator/(const Var& a, double s) { return a * (1.0 / s); }

Var operator*(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw DimensionMismatch("matrix product " + shape_of(a.value()) + " * " + shape_of(b.value()));
  }
  Matrix out = a.value() * b.value();
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
  });
}

Var exp(const Var& a) {
  Matrix out = a.value().array().exp();
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix& out) {
    t.accumulate(a, g.cwiseProduct(out));
  });
}

Var log(const Var& a) {
  Matrix out = a.value().array().log();
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g.cwiseQuotient(a.value()));
  });
}

Var square(const Var& a) {
  Matrix out = a.value().array().square();
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, 2.0 * g.cwiseProduct(a.value()));
  });
}

Var sqrt(const Var& a) {
  Matrix out = a.value().array().sqrt();
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix& out) {
    t.accumulate(a, 0.5 * g.cwiseQuotient(out));
  });
}

Var relu(const Var& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, (a.value().array() > 0.0).select(g, 0.0));
  });
}

Var tanh(const Var& a) {
  Matrix out = a.value().array().tanh();
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix& out) {
    t.accumulate(a, g.cwiseProduct((1.0 - out.array().square()).matrix()));
  });
}

Var clamp(const Var& a, double lo, double hi) {
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  return tape_of(a).record(std::move(out), {a}, [a, lo, hi](Tape& t, const Matrix& g, const Matrix&) {
    const auto& x = a.value().array();
    t.accumulate(a, (x >= lo && x <= hi).select(g, 0.0));
  });
}

Var sum(const Var& a) {
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var row_sum(const Var& a) {
  Matrix out = a.value().rowwise().sum();
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g.replicate(1, a.cols()));
  });
}

Var col_sum(const Var& a) {
  Matrix out = a.value().colwise().sum();
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g.replicate(a.rows(), 1));
  });
}

Var transpose(const Var& a) {
  Matrix out = a.value().transpose();
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g.transpose());
  });
}

Var diag(const Var& a) {
  if (a.rows() != a.cols()) throw DimensionMismatch("diag of non-square " + shape_of(a.value()));
  Matrix out = a.value().diagonal();
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    full.diagonal() = g.col(0);
    t.accumulate(a, full);
  });
}

Var diag_matrix(const Var& v) {
  if (v.cols() != 1) throw DimensionMismatch("diag_matrix expects a column vector");
  Matrix out = Matrix::Zero(v.rows(), v.rows());
  out.diagonal() = v.value().col(0);
  return tape_of(v).record(std::move(out), {v}, [v](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(v, Matrix(g.diagonal()));
  });
}

Var gather_rows(const Var& a, const std::vector<int>& rows) {
  const Matrix& av = a.value();
  Matrix out(static_cast<Index>(rows.size()), av.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] < 0 || rows[k] >= av.rows()) throw DimensionMismatch("gather_rows index out of range");
    out.row(static_cast<Index>(k)) = av.row(rows[k]);
  }
  return tape_of(a).record(std::move(out), {a}, [a, rows](Tape& t, const Matrix& g, const Matrix&) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) full.row(rows[k]) += g.row(static_cast<Index>(k));
    t.accumulate(a, full);
  });
}

Var gather_cols(const Var& a, const std::vector<int>& cols) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), static_cast<Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) {
    if (cols[k] < 0 || cols[k] >= av.cols()) throw DimensionMismatch("gather_cols index out of range");
    out.col(static_cast<Index>(k)) = av.col(cols[k]);
  }
  return tape_of(a).record(std::move(out), {a}, [a, cols](Tape& t, const Matrix& g, const Matrix&) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    for (std::size_t k = 0; k < cols.size(); ++k) full.col(cols[k]) += g.col(static_cast<Index>(k));
    t.accumulate(a, full);
  });
}

Var block(const Var& a, Index row, Index col, Index rows, Index cols) {
  if (row < 0 || col < 0 || row + rows > a.rows() || col + cols > a.cols()) {
    throw DimensionMismatch("block out of range of " + shape_of(a.value()));
  }
  Matrix out = a.value().block(row, col, rows, cols);
  return tape_of(a).record(std::move(out), {a},
                           [a, row, col, rows, cols](Tape& t, const Matrix& g, const Matrix&) {
                             Matrix full = Matrix::Zero(a.rows(), a.cols());
                             full.block(row, col, rows, cols) = g;
                             t.accumulate(a, full);
                           });
}

Var hconcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionMismatch("hconcat of nothing");
  const Index r = parts.front().rows();
  Index c = 0;
  for (const Var& p : parts) {
    if (p.rows() != r) throw DimensionMismatch("hconcat row mismatch");
    c += p.cols();
  }
  Matrix out(r, c);
  Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return tape_of(parts.front())
      .record(std::move(out), parts, [parts](Tape& t, const Matrix& g, const Matrix&) {
        Index at = 0;
        for (const Var& p : parts) {
          if (p.requires_grad()) t.accumulate(p, g.middleCols(at, p.cols()));
          at += p.cols();
        }
      });
}

Var vconcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionMismatch("vconcat of nothing");
  const Index c = parts.front().cols();
  Index r = 0;
  for (const Var& p : parts) {
    if (p.cols() != c) throw DimensionMismatch("vconcat column mismatch");
    r += p.rows();
  }
  Matrix out(r, c);
  Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return tape_of(parts.front())
      .record(std::move(out), parts, [parts](Tape& t, const Matrix& g, const Matrix&) {
        Index at = 0;
        for (const Var& p : parts) {
          if (p.requires_grad()) t.accumulate(p, g.middleRows(at, p.rows()));
          at += p.rows();
        }
      });
}

Var log_softmax_rows(const Var& a) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  for (Index i = 0; i < av.rows(); ++i) {
    const double m = av.row(i).maxCoeff();
    const double lse = m + std::log((av.row(i).array() - m).exp().sum());
    out.row(i) = av.row(i).array() - lse;
  }
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix& out) {
    Matrix soft = out.array().exp();
    Matrix adj = g - soft.cwiseProduct(g.rowwise().sum().replicate(1, g.cols()));
    t.accumulate(a, adj);
  });
}

Var gather_sum(const Var& a, const std::vector<std::vector<std::pair<int, int>>>& entries) {
  const Matrix& av = a.value();
  Matrix out = Matrix::Zero(static_cast<Index>(entries.size()), 1);
  for (std::size_t k = 0; k < entries.size(); ++k) {
    for (auto [r, c] : entries[k]) {
      if (r < 0 || c < 0 || r >= av.rows() || c >= av.cols()) {
        throw DimensionMismatch("gather_sum index out of range");
      }
      out(static_cast<Index>(k), 0) += av(r, c);
    }
  }
  return tape_of(a).record(std::move(out), {a}, [a, entries](Tape& t, const Matrix& g, const Matrix&) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    for (std::size_t k = 0; k < entries.size(); ++k) {
      for (auto [r, c] : entries[k]) full(r, c) += g(static_cast<Index>(k), 0);
    }
    t.accumulate(a, full);
  });
}

Var se_cross(const Var& a, const Var& b, const Var& log_lengthscale, const Var& log_variance) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Index q = av.cols();
  if (bv.cols() != q || log_lengthscale.rows() != 1 || log_lengthscale.cols() != q ||
      log_variance.value().size() != 1) {
    throw DimensionMismatch("se_cross: inputs " + shape_of(av) + ", " + shape_of(bv) +
                            ", lengthscales " + shape_of(log_lengthscale.value()));
  }
  const RowVector inv_ell2 = (-2.0 * log_lengthscale.value().array()).exp().matrix();
  const double variance = std::exp(log_variance.value()(0, 0));
  Matrix out(av.rows(), bv.rows());
  for (Index i = 0; i < av.rows(); ++i) {
    for (Index j = 0; j < bv.rows(); ++j) {
      double d2 = 0.0;
      for (Index k = 0; k < q; ++k) {
        const double d = av(i, k) - bv(j, k);
        d2 += d * d * inv_ell2(k);
      }
      out(i, j) = variance * std::exp(-0.5 * d2);
    }
  }
  return tape_of(a).record(
      std::move(out), {a, b, log_lengthscale, log_variance},
      [a, b, log_lengthscale, log_variance, inv_ell2](Tape& t, const Matrix& g, const Matrix& k) {
        const Matrix& av = a.value();
        const Matrix& bv = b.value();
        const Index q = av.cols();
        Matrix ga = Matrix::Zero(av.rows(), q);
        Matrix gb = Matrix::Zero(bv.rows(), q);
        Matrix gl = Matrix::Zero(1, q);
        double gv = 0.0;
        for (Index i = 0; i < av.rows(); ++i) {
          for (Index j = 0; j < bv.rows(); ++j) {
            const double gk = g(i, j) * k(i, j);
            if (gk == 0.0) continue;
            gv += gk;
            for (Index c = 0; c < q; ++c) {
              const double d = av(i, c) - bv(j, c);
              const double s = gk * d * inv_ell2(c);
              ga(i, c) -= s;
              gb(j, c) += s;
              gl(0, c) += s * d;
            }
          }
        }
        if (a.requires_grad()) t.accumulate(a, ga);
        if (b.requires_grad()) t.accumulate(b, gb);
        if (log_lengthscale.requires_grad()) t.accumulate(log_lengthscale, gl);
        if (log_variance.requires_grad()) t.accumulate(log_variance, Matrix::Constant(1, 1, gv));
      });
}

Var lower_exp_diag(const Var& raw) {
  if (raw.rows() != raw.cols()) throw DimensionMismatch("lower_exp_diag of non-square matrix");
  Matrix out = raw.value().triangularView<Eigen::StrictlyLower>();
  out.diagonal() = raw.value().diagonal().array().exp();
  return tape_of(raw).record(std::move(out), {raw}, [raw](Tape& t, const Matrix& g, const Matrix& out) {
    Matrix adj = g.triangularView<Eigen::StrictlyLower>();
    adj.diagonal() = g.diagonal().cwiseProduct(out.diagonal());
    t.accumulate(raw, adj);
  });
}

}  // namespace mcvae::ad
