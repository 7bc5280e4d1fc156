#include <cmath>
#include <sstream>

#include "mcvae/diffmath.hpp"

namespace mcvae::ad {
namespace {

constexpr double kSymmetryTolerance = 1e-10;
constexpr double kSingularDiagonal = 1e-300;

void require_symmetric(const Matrix& a) {
  if (a.rows() != a.cols()) {
    throw DimensionMismatch("cholesky of non-square " + std::to_string(a.rows()) + "x" +
                            std::to_string(a.cols()) + " matrix");
  }
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  const double asym = (a - a.transpose()).cwiseAbs().maxCoeff();
  if (!(asym <= kSymmetryTolerance * scale)) {
    throw NotPositiveDefinite("matrix is not symmetric (max asymmetry " + std::to_string(asym) + ")");
  }
}

bool try_factor(const Matrix& a, double jitter, Matrix& l) {
  Matrix shifted = a;
  shifted.diagonal().array() += jitter;
  Eigen::LLT<Matrix> llt(shifted);
  if (llt.info() != Eigen::Success) return false;
  l = llt.matrixL();
  return l.allFinite() && (l.diagonal().array() > 0.0).all();
}

// Lower-triangular factor of a + jitter*I with the documented escalation.
Matrix factor_with_escalation(const Matrix& a, double jitter) {
  if (jitter < 0.0) throw NotPositiveDefinite("negative jitter");
  Matrix l;
  double j = jitter;
  while (true) {
    if (try_factor(a, j, l)) return l;
    j = (j == 0.0) ? kDefaultJitter : j * 10.0;
    if (j > kMaxJitter * (1.0 + 1e-12)) break;
  }
  std::ostringstream msg;
  msg << "cholesky failed on a " << a.rows() << "x" << a.cols() << " matrix after jitter escalation to "
      << kMaxJitter;
  throw NotPositiveDefinite(msg.str());
}

void require_factor_diagonal(const Matrix& l) {
  for (Index i = 0; i < l.rows(); ++i) {
    if (!(std::abs(l(i, i)) >= kSingularDiagonal)) {
      throw SingularMatrix("triangular factor has a zero diagonal entry at " + std::to_string(i));
    }
  }
}

}  // namespace

Var cholesky(const Var& a, double jitter) {
  require_symmetric(a.value());
  Matrix l = factor_with_escalation(a.value(), jitter);
  return a.tape()->record(std::move(l), {a}, [a](Tape& t, const Matrix& lbar, const Matrix& l) {
    const auto lower = l.triangularView<Eigen::Lower>();
    Matrix p = l.transpose() * Matrix(lbar.triangularView<Eigen::Lower>());
    p = Matrix(p.triangularView<Eigen::Lower>());
    p.diagonal() *= 0.5;
    // s = L^-T p L^-1
    Matrix s = lower.transpose().solve(p);
    s = lower.transpose().solve(Matrix(s.transpose())).transpose();
    t.accumulate(a, 0.5 * (s + s.transpose()));
  });
}

Var solve_lower(const Var& l, const Var& b, bool transpose) {
  const Matrix& lv = l.value();
  if (lv.rows() != lv.cols() || b.rows() != lv.rows()) {
    throw DimensionMismatch("solve_lower: factor " + std::to_string(lv.rows()) + "x" +
                            std::to_string(lv.cols()) + ", right-hand side has " +
                            std::to_string(b.rows()) + " rows");
  }
  require_factor_diagonal(lv);
  const auto lower = lv.triangularView<Eigen::Lower>();
  Matrix x = transpose ? Matrix(lower.transpose().solve(b.value())) : Matrix(lower.solve(b.value()));
  return l.tape()->record(std::move(x), {l, b}, [l, b, transpose](Tape& t, const Matrix& xbar, const Matrix& x) {
    const auto lower = l.value().triangularView<Eigen::Lower>();
    Matrix bbar = transpose ? Matrix(lower.solve(xbar)) : Matrix(lower.transpose().solve(xbar));
    if (l.requires_grad()) {
      Matrix lbar = transpose ? Matrix(-(x * bbar.transpose())) : Matrix(-(bbar * x.transpose()));
      t.accumulate(l, Matrix(lbar.triangularView<Eigen::Lower>()));
    }
    if (b.requires_grad()) t.accumulate(b, bbar);
  });
}

Var logdet_from_factor(const Var& l) {
  const Matrix& lv = l.value();
  if (lv.rows() != lv.cols()) throw DimensionMismatch("logdet_from_factor of non-square matrix");
  for (Index i = 0; i < lv.rows(); ++i) {
    if (!(lv(i, i) > 0.0)) {
      throw SingularMatrix("factor diagonal entry " + std::to_string(i) + " is not positive");
    }
  }
  return 2.0 * sum(log(diag(l)));
}

}  // namespace mcvae::ad
