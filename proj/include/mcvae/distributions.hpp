#pragma once

// Tables, covariate schema, and the probability primitives used by every
// objective: Gaussian and categorical densities and KLs, reparameterised
// draws, and the empirical covariate prior.

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "mcvae/diffmath.hpp"

namespace mcvae {

enum class ColumnKind { continuous, categorical };
enum class ColumnRole { covariate, time, instance };

struct CovariateColumn {
  std::string name;
  ColumnKind kind = ColumnKind::continuous;
  int cardinality = 0;              // categorical only
  std::vector<std::string> levels;  // categorical only; level k has id k
  ColumnRole role = ColumnRole::covariate;

  bool operator==(const CovariateColumn&) const = default;
};

class CovariateSchema {
 public:
  CovariateSchema() = default;
  explicit CovariateSchema(std::vector<CovariateColumn> columns);

  const std::vector<CovariateColumn>& columns() const { return columns_; }
  const CovariateColumn& column(int q) const { return columns_.at(static_cast<std::size_t>(q)); }
  int size() const { return static_cast<int>(columns_.size()); }
  // Throws SchemaMismatch for unknown names.
  int index_of(const std::string& name) const;

  const std::vector<int>& continuous_columns() const { return continuous_; }
  const std::vector<int>& categorical_columns() const { return categorical_; }
  std::optional<int> time_column() const;
  std::optional<int> instance_column() const;

  // Width of the one-hot value encoding (without mask bits).
  int encoded_width() const;

  bool operator==(const CovariateSchema& other) const { return columns_ == other.columns_; }

 private:
  std::vector<CovariateColumn> columns_;
  std::vector<int> continuous_;
  std::vector<int> categorical_;
};

// Values with a per-entry observed flag. Entries whose flag is false are
// missing and their stored value is never read by any computation.
struct MaskedTable {
  Matrix values;
  BoolMatrix observed;

  MaskedTable() = default;
  MaskedTable(Matrix v, BoolMatrix o);
  static MaskedTable fully_observed(Matrix v);

  Index rows() const { return values.rows(); }
  Index cols() const { return values.cols(); }
  Index missing_count() const { return observed.size() - observed.count(); }
  MaskedTable select_rows(const std::vector<int>& rows) const;
};

using CovariateTable = MaskedTable;

// Checks category ids and shape against the schema at observed entries.
void validate_covariates(const CovariateTable& x, const CovariateSchema& schema);

struct ColumnPrior {
  double mean = 0.0;
  double variance = 1.0;
  Vector probs;  // categorical only
};

// p_lambda(x), factorised over columns.
struct CovariatePrior {
  std::vector<ColumnPrior> columns;
};

// q(x^u | ...) for a block of rows. Means and variances are defined for
// continuous columns, probability rows for categorical columns. Only entries
// flagged in `missing` are consumed.
struct CovariatePosterior {
  Matrix mean;
  Matrix variance;
  std::vector<Matrix> probs;  // indexed by column; empty for continuous columns
  BoolMatrix missing;
};

inline constexpr double kLogVarianceMin = -6.0;
inline constexpr double kLogVarianceMax = 4.0;
inline constexpr double kCategoricalPseudoCount = 0.5;
inline constexpr double kPriorVarianceFloor = 1e-6;

// ---------------------------------------------------------------------------
// Scalar-level API.

// sum_d 0.5 * (log(vp/vq) + (vq + (mq - mp)^2) / vp - 1)
template <class A, class B, class C, class D>
double kl_diag_gaussian(const Eigen::MatrixBase<A>& mean_q, const Eigen::MatrixBase<B>& var_q,
                        const Eigen::MatrixBase<C>& mean_p, const Eigen::MatrixBase<D>& var_p) {
  if (mean_q.size() != var_q.size() || mean_q.size() != mean_p.size() || mean_q.size() != var_p.size()) {
    throw DimensionMismatch("kl_diag_gaussian: argument sizes differ");
  }
  if (!((var_q.array() > 0.0).all() && (var_p.array() > 0.0).all())) {
    throw NonPositiveVariance("kl_diag_gaussian: variances must be positive");
  }
  const auto vq = var_q.array();
  const auto vp = var_p.array();
  return 0.5 * ((vp / vq).log() + (vq + (mean_q.array() - mean_p.array()).square()) / vp - 1.0).sum();
}

double kl_full_gaussian(const Vector& mean1, const Matrix& cov1, const Vector& mean0, const Matrix& cov0);

// sum_k q_k log(q_k / p_k) with 0 log 0 = 0.
double kl_categorical(const Vector& q, const Vector& p);

// -0.5 * (log 2 pi + log var + (y - mean)^2 / var), summed over entries.
template <class A, class B, class C>
double gaussian_log_density(const Eigen::MatrixBase<A>& y, const Eigen::MatrixBase<B>& mean,
                            const Eigen::MatrixBase<C>& variance) {
  if (y.size() != mean.size() || y.size() != variance.size()) {
    throw DimensionMismatch("gaussian_log_density: argument sizes differ");
  }
  if (!(variance.array() > 0.0).all()) throw NonPositiveVariance("gaussian_log_density: variance must be positive");
  const double log2pi = std::log(2.0 * std::numbers::pi);
  return (-0.5 * (log2pi + variance.array().log() + (y.array() - mean.array()).square() / variance.array())).sum();
}

double reparam_gaussian(double mean, double variance, double eps);

CovariatePrior fit_covariate_prior(const CovariateTable& x, const CovariateSchema& schema);

// ---------------------------------------------------------------------------
// Differentiable API. Returned Vars are 1x1 unless stated otherwise.

namespace ad_dist {

using ad::Var;

// Entrywise Gaussian KL; returns a matrix of per-entry KLs.
Var kl_diag_gaussian_entries(const Var& mean_q, const Var& var_q, const Var& mean_p, const Var& var_p);

// KL[N(mean1, L1 L1^T) || N(mean0, L0 L0^T)] from lower factors; means are Nx1.
Var kl_gaussian_factors(const Var& mean1, const Var& factor1, const Var& mean0, const Var& factor0);

// KL[N(mean1, diag(var1)) || N(0, L0 L0^T)].
Var kl_diag_to_zero_mean(const Var& mean1, const Var& var1, const Var& factor0);

// Entrywise Gaussian log densities given log-variances.
Var gaussian_log_density_entries(const Var& y, const Var& mean, const Var& log_variance);

Var reparam_gaussian(const Var& mean, const Var& variance, const Matrix& eps);

// Clamps raw log-variances into [kLogVarianceMin, kLogVarianceMax].
Var clamp_log_variance(const Var& raw);

}  // namespace ad_dist

}  // namespace mcvae
