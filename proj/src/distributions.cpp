#include "mcvae/distributions.hpp"

#include <algorithm>

namespace mcvae {

CovariateSchema::CovariateSchema(std::vector<CovariateColumn> columns) : columns_(std::move(columns)) {
  int time = 0;
  int instance = 0;
  for (int q = 0; q < size(); ++q) {
    const CovariateColumn& c = columns_[static_cast<std::size_t>(q)];
    for (int p = 0; p < q; ++p) {
      if (columns_[static_cast<std::size_t>(p)].name == c.name) {
        throw SchemaMismatch("duplicate covariate column '" + c.name + "'");
      }
    }
    if (c.kind == ColumnKind::categorical) {
      if (c.cardinality < 2) {
        throw SchemaMismatch("categorical column '" + c.name + "' needs cardinality >= 2");
      }
      if (!c.levels.empty() && static_cast<int>(c.levels.size()) != c.cardinality) {
        throw SchemaMismatch("categorical column '" + c.name + "' level count differs from cardinality");
      }
      categorical_.push_back(q);
    } else {
      continuous_.push_back(q);
    }
    if (c.role == ColumnRole::time) {
      ++time;
      if (c.kind != ColumnKind::continuous) throw SchemaMismatch("time column '" + c.name + "' must be continuous");
    }
    if (c.role == ColumnRole::instance) {
      ++instance;
      if (c.kind != ColumnKind::categorical) {
        throw SchemaMismatch("instance column '" + c.name + "' must be categorical");
      }
    }
  }
  if (time > 1) throw SchemaMismatch("at most one time column is allowed");
  if (instance > 1) throw SchemaMismatch("at most one instance-id column is allowed");
}

int CovariateSchema::index_of(const std::string& name) const {
  for (int q = 0; q < size(); ++q) {
    if (columns_[static_cast<std::size_t>(q)].name == name) return q;
  }
  throw SchemaMismatch("unknown covariate column '" + name + "'");
}

std::optional<int> CovariateSchema::time_column() const {
  for (int q = 0; q < size(); ++q)
    if (columns_[static_cast<std::size_t>(q)].role == ColumnRole::time) return q;
  return std::nullopt;
}

std::optional<int> CovariateSchema::instance_column() const {
  for (int q = 0; q < size(); ++q)
    if (columns_[static_cast<std::size_t>(q)].role == ColumnRole::instance) return q;
  return std::nullopt;
}

int CovariateSchema::encoded_width() const {
  int w = 0;
  for (const auto& c : columns_) w += c.kind == ColumnKind::categorical ? c.cardinality : 1;
  return w;
}

MaskedTable::MaskedTable(Matrix v, BoolMatrix o) : values(std::move(v)), observed(std::move(o)) {
  if (values.rows() != observed.rows() || values.cols() != observed.cols()) {
    throw DimensionMismatch("values and mask are not congruent");
  }
}

MaskedTable MaskedTable::fully_observed(Matrix v) {
  BoolMatrix o = BoolMatrix::Constant(v.rows(), v.cols(), true);
  return MaskedTable(std::move(v), std::move(o));
}

MaskedTable MaskedTable::select_rows(const std::vector<int>& rows) const {
  MaskedTable out;
  out.values.resize(static_cast<Index>(rows.size()), cols());
  out.observed.resize(static_cast<Index>(rows.size()), cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    out.values.row(static_cast<Index>(k)) = values.row(rows[k]);
    out.observed.row(static_cast<Index>(k)) = observed.row(rows[k]);
  }
  return out;
}

void validate_covariates(const CovariateTable& x, const CovariateSchema& schema) {
  if (x.cols() != schema.size()) {
    throw SchemaMismatch("covariate table has " + std::to_string(x.cols()) + " columns, schema has " +
                         std::to_string(schema.size()));
  }
  for (int q : schema.categorical_columns()) {
    const int card = schema.column(q).cardinality;
    for (Index i = 0; i < x.rows(); ++i) {
      if (!x.observed(i, q)) continue;
      const double v = x.values(i, q);
      if (v != std::floor(v) || v < 0 || v >= card) {
        throw InvalidCategory("column '" + schema.column(q).name + "' row " + std::to_string(i) +
                              " holds invalid category " + std::to_string(v));
      }
    }
  }
}

double kl_full_gaussian(const Vector& mean1, const Matrix& cov1, const Vector& mean0, const Matrix& cov0) {
  const Index n = mean1.size();
  if (cov1.rows() != n || cov1.cols() != n || mean0.size() != n || cov0.rows() != n || cov0.cols() != n) {
    throw DimensionMismatch("kl_full_gaussian: argument sizes differ");
  }
  ad::Tape t;
  ad::Var l1 = ad::cholesky(t.constant(cov1));
  ad::Var l0 = ad::cholesky(t.constant(cov0));
  return ad_dist::kl_gaussian_factors(t.constant(Matrix(mean1)), l1, t.constant(Matrix(mean0)), l0).scalar();
}

double kl_categorical(const Vector& q, const Vector& p) {
  if (q.size() != p.size()) throw DimensionMismatch("kl_categorical: argument sizes differ");
  double kl = 0.0;
  for (Index k = 0; k < q.size(); ++k) {
    if (q(k) < 0.0 || p(k) < 0.0) throw SupportViolation("kl_categorical: negative probability");
    if (q(k) == 0.0) continue;
    if (p(k) == 0.0) throw SupportViolation("kl_categorical: q puts mass where p has none");
    kl += q(k) * std::log(q(k) / p(k));
  }
  return kl;
}

double reparam_gaussian(double mean, double variance, double eps) {
  if (!(variance > 0.0)) throw NonPositiveVariance("reparam_gaussian: variance must be positive");
  return mean + std::sqrt(variance) * eps;
}

CovariatePrior fit_covariate_prior(const CovariateTable& x, const CovariateSchema& schema) {
  if (x.cols() != schema.size()) throw SchemaMismatch("covariate table does not match schema");
  CovariatePrior prior;
  prior.columns.resize(static_cast<std::size_t>(schema.size()));
  for (int q = 0; q < schema.size(); ++q) {
    const CovariateColumn& col = schema.column(q);
    ColumnPrior& out = prior.columns[static_cast<std::size_t>(q)];
    if (col.kind == ColumnKind::continuous) {
      double sum = 0.0;
      Index n = 0;
      for (Index i = 0; i < x.rows(); ++i) {
        if (x.observed(i, q)) {
          sum += x.values(i, q);
          ++n;
        }
      }
      if (n == 0) {
        out.mean = 0.0;
        out.variance = 1.0;
        continue;
      }
      out.mean = sum / static_cast<double>(n);
      if (n == 1) {
        out.variance = 1.0;
        continue;
      }
      double ss = 0.0;
      for (Index i = 0; i < x.rows(); ++i) {
        if (x.observed(i, q)) ss += (x.values(i, q) - out.mean) * (x.values(i, q) - out.mean);
      }
      out.variance = std::max(ss / static_cast<double>(n - 1), kPriorVarianceFloor);
    } else {
      Vector counts = Vector::Constant(col.cardinality, kCategoricalPseudoCount);
      for (Index i = 0; i < x.rows(); ++i) {
        if (!x.observed(i, q)) continue;
        const double v = x.values(i, q);
        if (v != std::floor(v) || v < 0 || v >= col.cardinality) {
          throw InvalidCategory("column '" + col.name + "' holds invalid category " + std::to_string(v));
        }
        counts(static_cast<Index>(v)) += 1.0;
      }
      out.probs = counts / counts.sum();
    }
  }
  return prior;
}

namespace ad_dist {

Var kl_diag_gaussian_entries(const Var& mean_q, const Var& var_q, const Var& mean_p, const Var& var_p) {
  Var ratio = cwise_div(var_q + square(mean_q - mean_p), var_p);
  return 0.5 * (log(var_p) - log(var_q) + ratio - 1.0);
}

Var kl_gaussian_factors(const Var& mean1, const Var& factor1, const Var& mean0, const Var& factor0) {
  const auto n = static_cast<double>(mean1.rows());
  Var trace = sum(square(ad::solve_lower(factor0, factor1)));
  Var quad = sum(square(ad::solve_lower(factor0, mean0 - mean1)));
  return 0.5 * (trace + quad - n + ad::logdet_from_factor(factor0) - ad::logdet_from_factor(factor1));
}

Var kl_diag_to_zero_mean(const Var& mean1, const Var& var1, const Var& factor0) {
  const auto n = static_cast<double>(mean1.rows());
  Var trace = sum(square(ad::solve_lower(factor0, ad::diag_matrix(sqrt(var1)))));
  Var quad = sum(square(ad::solve_lower(factor0, mean1)));
  return 0.5 * (trace + quad - n + ad::logdet_from_factor(factor0) - sum(log(var1)));
}

Var gaussian_log_density_entries(const Var& y, const Var& mean, const Var& log_variance) {
  const double log2pi = std::log(2.0 * std::numbers::pi);
  return -0.5 * ((log_variance + log2pi) + cwise_mul(square(y - mean), exp(-log_variance)));
}

Var reparam_gaussian(const Var& mean, const Var& variance, const Matrix& eps) {
  return mean + cwise_mul(sqrt(variance), mean.tape()->constant(eps));
}

Var clamp_log_variance(const Var& raw) { return ad::clamp(raw, kLogVarianceMin, kLogVarianceMax); }

}  // namespace ad_dist
}  // namespace mcvae
