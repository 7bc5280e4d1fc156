#include "mcvae/elbo.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace mcvae {

std::string to_string(Family f) {
  switch (f) {
    case Family::cvae: return "cvae";
    case Family::regression_gp: return "regression_gp";
    case Family::temporal_gp: return "temporal_gp";
    case Family::longitudinal_gp: return "longitudinal_gp";
  }
  return "cvae";
}

Family family_from_string(const std::string& s) {
  if (s == "cvae") return Family::cvae;
  if (s == "regression_gp") return Family::regression_gp;
  if (s == "temporal_gp") return Family::temporal_gp;
  if (s == "longitudinal_gp") return Family::longitudinal_gp;
  throw ConfigError("unknown model family '" + s + "'");
}

// ---------------------------------------------------------------------------

void InducingState::write(ParameterSet& into) const {
  into.set(s_key(), s);
  for (std::size_t l = 0; l < m.size(); ++l) {
    const Matrix& f = h_factor[l];
    if (!(f.diagonal().array() > 0.0).all()) throw NonPositiveVariance("inducing covariance factor needs a positive diagonal");
    Matrix raw = f.triangularView<Eigen::StrictlyLower>();
    raw.diagonal() = f.diagonal().array().log();
    into.set(m_key(static_cast<int>(l)), Matrix(m[l]));
    into.set(h_key(static_cast<int>(l)), std::move(raw));
  }
}

InducingState InducingState::read(const ParameterSet& from, int latent_dims) {
  InducingState st;
  st.s = from.at(s_key());
  for (int l = 0; l < latent_dims; ++l) {
    st.m.push_back(from.at(m_key(l)).col(0));
    const Matrix& raw = from.at(h_key(l));
    Matrix f = raw.triangularView<Eigen::StrictlyLower>();
    f.diagonal() = raw.diagonal().array().exp();
    st.h_factor.push_back(std::move(f));
  }
  return st;
}

InducingVars bind_inducing(Binding& params, int latent_dims, const Matrix& s_fixed, const CovariateSchema& schema,
                           bool train_locations) {
  ad::Tape& t = params.tape();
  InducingVars iv;
  const Matrix& s_value = params.parameters().at(InducingState::s_key());
  Matrix keep = Matrix::Zero(s_value.rows(), s_value.cols());
  for (int q : schema.continuous_columns()) keep.col(q).setOnes();
  Matrix pinned = Matrix::Zero(s_value.rows(), s_value.cols());
  for (int q : schema.categorical_columns()) pinned.col(q) = s_fixed.col(q);
  if (train_locations) {
    iv.s = cwise_mul(params[InducingState::s_key()], t.constant(keep)) + t.constant(pinned);
  } else {
    iv.s = t.constant(Matrix(s_value.cwiseProduct(keep) + pinned));
  }
  for (int l = 0; l < latent_dims; ++l) {
    iv.m.push_back(params[InducingState::m_key(l)]);
    iv.h_factor.push_back(ad::lower_exp_diag(params[InducingState::h_key(l)]));
  }
  return iv;
}

// ---------------------------------------------------------------------------

double MissingExpectationPlan::joint_size() const {
  double j = 1.0;
  for (const auto& e : categorical) j *= e.cardinality;
  return j;
}

MissingExpectationPlan plan_missing(const CovariateTable& x, const CovariateSchema& schema, int cap, int mc_samples,
                                    bool sample_on_overflow) {
  if (mc_samples < 1) throw ConfigError("Monte-Carlo sample count must be >= 1");
  if (cap < 1) throw ConfigError("enumeration cap must be >= 1");
  MissingExpectationPlan plan;
  plan.cap = cap;
  plan.mc_samples = mc_samples;
  plan.sample_on_overflow = sample_on_overflow;
  for (Index i = 0; i < x.rows(); ++i) {
    for (int q = 0; q < schema.size(); ++q) {
      if (x.observed(i, q)) continue;
      const auto& c = schema.column(q);
      if (c.role == ColumnRole::instance) throw DataError("instance id missing at row " + std::to_string(i));
      if (c.kind == ColumnKind::categorical) {
        plan.categorical.push_back({static_cast<int>(i), q, c.cardinality});
      } else {
        plan.continuous.push_back({static_cast<int>(i), q, 0});
      }
    }
  }
  return plan;
}

namespace {

int draw_category(const Matrix& log_probs, int row, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  const Index k = log_probs.cols();
  for (Index c = 0; c < k; ++c) {
    acc += std::exp(log_probs(row, c));
    if (u < acc) return static_cast<int>(c);
  }
  return static_cast<int>(k - 1);
}

void require_log_probs(const CovariatePosteriorVars& post, int column) {
  if (static_cast<std::size_t>(column) >= post.log_probs.size() || !post.log_probs[static_cast<std::size_t>(column)].valid()) {
    throw DimensionMismatch("covariate posterior has no probabilities for column " + std::to_string(column));
  }
}

// base + mask * (mean + sqrt(var) * eps), with mean/var rows picked by rows_of.
Var instantiate(ad::Tape& t, const Matrix& base, const Matrix& mask, const Matrix& eps,
                const CovariatePosteriorVars& post, const std::vector<int>* rows_of) {
  if (mask.isZero(0)) return t.constant(base);
  Var mean = rows_of ? ad::gather_rows(post.mean, *rows_of) : post.mean;
  Var var = rows_of ? ad::gather_rows(post.variance, *rows_of) : post.variance;
  return t.constant(base) + cwise_mul(t.constant(mask), mean + cwise_mul(sqrt(var), t.constant(eps)));
}

}  // namespace

Var expect_over_missing_covariates(const std::function<Var(const Var& x_inst)>& term, const CovariateTable& x,
                                   const CovariatePosteriorVars& posterior, const MissingExpectationPlan& plan,
                                   Rng& rng) {
  ad::Tape& t = *posterior.mean.tape();
  const double joint = plan.joint_size();
  const bool enumerate = joint <= plan.cap;
  if (!enumerate && !plan.sample_on_overflow) {
    const double limit = static_cast<double>(std::numeric_limits<std::size_t>::max());
    throw EnumerationOverflow(static_cast<std::size_t>(std::min(joint, limit)), static_cast<std::size_t>(plan.cap));
  }
  for (const auto& e : plan.categorical) require_log_probs(posterior, e.column);

  Matrix base = x.values;
  Matrix mask = Matrix::Zero(x.rows(), x.cols());
  for (const auto& e : plan.continuous) {
    base(e.row, e.column) = 0.0;
    mask(e.row, e.column) = 1.0;
  }
  const auto branches = enumerate ? static_cast<long long>(joint) : 1LL;

  Var total;
  for (int s = 0; s < plan.mc_samples; ++s) {
    std::vector<int> digit(plan.categorical.size(), 0);
    for (long long b = 0; b < branches; ++b) {
      Var log_w;
      for (std::size_t k = 0; k < plan.categorical.size(); ++k) {
        const auto& e = plan.categorical[k];
        const Var& lp = posterior.log_probs[static_cast<std::size_t>(e.column)];
        if (!enumerate) digit[k] = draw_category(lp.value(), e.row, rng);
        base(e.row, e.column) = digit[k];
        if (enumerate) {
          Var term_k = ad::gather_sum(lp, {{{e.row, digit[k]}}});
          log_w = log_w.valid() ? log_w + term_k : term_k;
        }
      }
      Matrix eps = Matrix::Zero(x.rows(), x.cols());
      for (const auto& e : plan.continuous) eps(e.row, e.column) = rng.normal();
      Var value = term(instantiate(t, base, mask, eps, posterior, nullptr));
      if (log_w.valid()) value = cwise_mul(exp(log_w), value);
      total = total.valid() ? total + value : value;
      // next assignment, last entry fastest
      for (std::size_t k = digit.size(); k-- > 0;) {
        if (++digit[k] < plan.categorical[k].cardinality) break;
        digit[k] = 0;
      }
    }
  }
  return total / static_cast<double>(plan.mc_samples);
}

BranchExpansion expand_rows(const CovariateTable& x, const CovariateSchema& schema,
                            const CovariatePosteriorVars& posterior, int cap, int mc_samples, Rng& rng) {
  if (mc_samples < 1) throw ConfigError("Monte-Carlo sample count must be >= 1");
  ad::Tape& t = *posterior.mean.tape();
  const Index n = x.rows();
  const int q_all = schema.size();

  // Per-row plans are shared across samples.
  std::vector<std::vector<MissingEntry>> cat(static_cast<std::size_t>(n));
  std::vector<std::vector<int>> cont(static_cast<std::size_t>(n));
  std::vector<long long> joint(static_cast<std::size_t>(n), 1);
  for (Index i = 0; i < n; ++i) {
    double j = 1.0;
    for (int q = 0; q < q_all; ++q) {
      if (x.observed(i, q)) continue;
      const auto& c = schema.column(q);
      if (c.role == ColumnRole::instance) throw DataError("instance id missing at row " + std::to_string(i));
      if (c.kind == ColumnKind::categorical) {
        require_log_probs(posterior, q);
        cat[static_cast<std::size_t>(i)].push_back({static_cast<int>(i), q, c.cardinality});
        j *= c.cardinality;
      } else {
        cont[static_cast<std::size_t>(i)].push_back(q);
      }
    }
    joint[static_cast<std::size_t>(i)] = j <= cap ? static_cast<long long>(j) : -1;
  }

  BranchExpansion out;
  out.mc_samples = mc_samples;
  std::vector<RowVector> base_rows, mask_rows, eps_rows;
  // per schema column: the (row, category) whose log-probability enters each branch weight
  std::vector<std::vector<std::vector<std::pair<int, int>>>> picks(static_cast<std::size_t>(q_all));
  bool any_weight = false;

  for (int s = 0; s < mc_samples; ++s) {
    for (Index i = 0; i < n; ++i) {
      const auto& entries = cat[static_cast<std::size_t>(i)];
      const long long jn = joint[static_cast<std::size_t>(i)];
      const bool enumerate = jn > 0;
      const long long count = enumerate ? jn : 1;
      std::vector<int> digit(entries.size(), 0);
      for (long long b = 0; b < count; ++b) {
        RowVector base = x.values.row(i);
        RowVector mask = RowVector::Zero(q_all);
        RowVector eps = RowVector::Zero(q_all);
        for (auto& column_picks : picks) column_picks.emplace_back();
        for (std::size_t k = 0; k < entries.size(); ++k) {
          const auto& e = entries[k];
          if (!enumerate) digit[k] = draw_category(posterior.log_probs[static_cast<std::size_t>(e.column)].value(), e.row, rng);
          base(e.column) = digit[k];
          if (enumerate) {
            picks[static_cast<std::size_t>(e.column)].back().push_back({e.row, digit[k]});
            any_weight = true;
          }
        }
        for (int q : cont[static_cast<std::size_t>(i)]) {
          base(q) = 0.0;
          mask(q) = 1.0;
          eps(q) = rng.normal();
        }
        base_rows.push_back(base);
        mask_rows.push_back(mask);
        eps_rows.push_back(eps);
        out.row_of.push_back(static_cast<int>(i));
        out.sample_of.push_back(s);
        for (std::size_t k = digit.size(); k-- > 0;) {
          if (++digit[k] < entries[k].cardinality) break;
          digit[k] = 0;
        }
      }
    }
  }

  const auto e_count = static_cast<Index>(base_rows.size());
  Matrix base(e_count, q_all), mask(e_count, q_all), eps(e_count, q_all);
  for (Index e = 0; e < e_count; ++e) {
    base.row(e) = base_rows[static_cast<std::size_t>(e)];
    mask.row(e) = mask_rows[static_cast<std::size_t>(e)];
    eps.row(e) = eps_rows[static_cast<std::size_t>(e)];
  }
  out.x = instantiate(t, base, mask, eps, posterior, &out.row_of);

  if (!any_weight) {
    out.weight = t.constant(Matrix::Ones(e_count, 1));
    return out;
  }
  Var log_w;
  for (int q = 0; q < q_all; ++q) {
    const auto& column_picks = picks[static_cast<std::size_t>(q)];
    bool used = false;
    for (const auto& p : column_picks) used = used || !p.empty();
    if (!used) continue;
    Var part = ad::gather_sum(posterior.log_probs[static_cast<std::size_t>(q)], column_picks);
    log_w = log_w.valid() ? log_w + part : part;
  }
  out.weight = exp(log_w);
  return out;
}

// ---------------------------------------------------------------------------

namespace ad_elbo {

Var covariate_kl_term(const CovariatePosteriorVars& posterior, const BoolMatrix& observed, const CovariatePrior& prior,
                      const CovariateSchema& schema, double scale) {
  ad::Tape& t = *posterior.mean.tape();
  Var total = t.constant(0.0);
  std::vector<std::vector<std::pair<int, int>>> entries;
  std::vector<double> prior_mean, prior_var;
  for (int q : schema.continuous_columns()) {
    for (Index i = 0; i < observed.rows(); ++i) {
      if (observed(i, q)) continue;
      entries.push_back({{static_cast<int>(i), q}});
      prior_mean.push_back(prior.columns.at(static_cast<std::size_t>(q)).mean);
      prior_var.push_back(prior.columns.at(static_cast<std::size_t>(q)).variance);
    }
  }
  if (!entries.empty()) {
    Var mq = ad::gather_sum(posterior.mean, entries);
    Var vq = ad::gather_sum(posterior.variance, entries);
    Var mp = t.constant(Matrix(Eigen::Map<Vector>(prior_mean.data(), static_cast<Index>(prior_mean.size()))));
    Var vp = t.constant(Matrix(Eigen::Map<Vector>(prior_var.data(), static_cast<Index>(prior_var.size()))));
    total = total + sum(ad_dist::kl_diag_gaussian_entries(mq, vq, mp, vp));
  }
  for (int q : schema.categorical_columns()) {
    std::vector<int> rows;
    for (Index i = 0; i < observed.rows(); ++i)
      if (!observed(i, q)) rows.push_back(static_cast<int>(i));
    if (rows.empty()) continue;
    if (schema.column(q).role == ColumnRole::instance) throw DataError("instance id is missing");
    require_log_probs(posterior, q);
    const Vector& p = prior.columns.at(static_cast<std::size_t>(q)).probs;
    if ((p.array() <= 0.0).any()) throw SupportViolation("covariate prior has a zero-probability category");
    Var lq = ad::gather_rows(posterior.log_probs[static_cast<std::size_t>(q)], rows);
    Var lp = t.constant(Matrix(p.array().log().matrix().transpose()));
    total = total + sum(cwise_mul(exp(lq), lq - lp));
  }
  return total * scale;
}

Var kl_standard_normal(const Var& mean, const Var& variance, double scale) {
  return 0.5 * scale * sum(variance + square(mean) - 1.0 - log(variance));
}

Var kl_gp_exact(const KernelSpec& spec, Binding& theta, const Var& x, const Var& mean, const Var& variance) {
  if (x.rows() > kExactKlSizeGuard) {
    throw SizeGuard("exact GP KL on " + std::to_string(x.rows()) + " rows exceeds the guard of " +
                    std::to_string(kExactKlSizeGuard));
  }
  if (mean.rows() != x.rows() || mean.cols() != spec.latent_dims) throw DimensionMismatch("kl_gp_exact: encoder shape");
  Var total;
  for (int l = 0; l < spec.latent_dims; ++l) {
    Var factor = ad::cholesky(ad_kernel::gram(spec, l, theta, x, true));
    Var kl = ad_dist::kl_diag_to_zero_mean(ad::block(mean, 0, l, mean.rows(), 1),
                                           ad::block(variance, 0, l, variance.rows(), 1), factor);
    total = total.valid() ? total + kl : kl;
  }
  return total;
}

namespace {

std::vector<int> all_components(const KernelSpec& spec) {
  std::vector<int> all(static_cast<std::size_t>(spec.size()));
  std::iota(all.begin(), all.end(), 0);
  return all;
}

}  // namespace

Var gp_bound_rows(const KernelSpec& spec, Binding& theta, const InducingVars& inducing, const Var& x,
                  const Var& mean, const Var& variance, const Var& weight, int mc_samples, double scale) {
  const Index e = x.rows();
  if (mean.rows() != e || variance.rows() != e || weight.rows() != e) throw DimensionMismatch("gp_bound_rows: row counts");
  const std::vector<int> all = all_components(spec);
  Var total;
  for (int l = 0; l < spec.latent_dims; ++l) {
    Var log_noise = theta[KernelSpec::noise_key(l)];
    Var lss = ad::cholesky(ad_kernel::cross(spec, l, theta, inducing.s, inducing.s));
    Var v = ad::solve_lower(lss, ad_kernel::cross(spec, l, theta, inducing.s, x));
    Var ktilde = ad_kernel::gram_diag(spec, l, theta, x, all) - transpose(col_sum(square(v)));
    Var proj = transpose(v) * ad::solve_lower(lss, inducing.m[static_cast<std::size_t>(l)]);
    Var a = ad::solve_lower(lss, v, true);
    Var trace_h = transpose(col_sum(square(transpose(inducing.h_factor[static_cast<std::size_t>(l)]) * a)));
    Var mu = ad::block(mean, 0, l, e, 1);
    Var var = ad::block(variance, 0, l, e, 1);
    Var inner = square(proj - mu) + var + ktilde + trace_h;
    Var row_terms = cwise_mul(inner, exp(-log_noise)) - log(var);
    Var s = sum(cwise_mul(weight, row_terms));
    total = total.valid() ? total + s : s;
  }
  return total * (0.5 * scale / mc_samples);
}

Var gp_bound_global(const KernelSpec& spec, Binding& theta, const InducingVars& inducing, Index n_total) {
  ad::Tape& t = theta.tape();
  const auto n = static_cast<double>(n_total);
  Var total;
  for (int l = 0; l < spec.latent_dims; ++l) {
    Var lss = ad::cholesky(ad_kernel::cross(spec, l, theta, inducing.s, inducing.s));
    const auto& m = inducing.m[static_cast<std::size_t>(l)];
    Var kl = ad_dist::kl_gaussian_factors(m, inducing.h_factor[static_cast<std::size_t>(l)],
                                          t.constant(Matrix::Zero(m.rows(), 1)), lss);
    Var term = 0.5 * n * theta[KernelSpec::noise_key(l)] - 0.5 * n + kl;
    total = total.valid() ? total + term : term;
  }
  return total;
}

Var longitudinal_instance_term(const KernelSpec& spec, Binding& theta, const InducingVars& inducing, const Var& x,
                               const Var& mean, const Var& variance) {
  if (spec.instance_component < 0) throw ConfigError("kernel has no instance-specific component");
  ad::Tape& t = theta.tape();
  const Index n = x.rows();
  const std::vector<int> own{spec.instance_component};
  const std::vector<int> shared = spec.shared_components();
  Var total;
  for (int l = 0; l < spec.latent_dims; ++l) {
    Var sigma = ad_kernel::cross(spec, l, theta, x, x, own) +
                cwise_mul(t.constant(Matrix::Identity(n, n)), ad_kernel::noise(spec, l, theta));
    Var lp = ad::cholesky(sigma);
    Var mu = ad::block(mean, 0, l, n, 1);
    Var var = ad::block(variance, 0, l, n, 1);
    Var term = sum(square(ad::solve_lower(lp, ad::diag_matrix(sqrt(var))))) + ad::logdet_from_factor(lp) - sum(log(var));
    if (shared.empty()) {
      term = term + sum(square(ad::solve_lower(lp, mu)));
    } else {
      Var lss = ad::cholesky(ad_kernel::cross(spec, l, theta, inducing.s, inducing.s, shared));
      Var v = ad::solve_lower(lss, ad_kernel::cross(spec, l, theta, inducing.s, x, shared));
      Var ktilde = ad_kernel::cross(spec, l, theta, x, x, shared) - transpose(v) * v;
      Var proj = transpose(v) * ad::solve_lower(lss, inducing.m[static_cast<std::size_t>(l)]);
      Var a_t = ad::solve_lower(lss, v, true);
      Var quad = sum(square(ad::solve_lower(lp, proj - mu)));
      Var trace_k = sum(diag(ad::solve_lower(lp, ad::solve_lower(lp, ktilde), true)));
      Var trace_h = sum(square(ad::solve_lower(lp, transpose(a_t) * inducing.h_factor[static_cast<std::size_t>(l)])));
      term = term + quad + trace_k + trace_h;
    }
    total = total.valid() ? total + term : term;
  }
  return total;
}

Var longitudinal_global(const KernelSpec& spec, Binding& theta, const InducingVars& inducing, Index n_total) {
  ad::Tape& t = theta.tape();
  const std::vector<int> shared = spec.shared_components();
  Var total = t.constant(-0.5 * static_cast<double>(n_total) * spec.latent_dims);
  if (shared.empty()) return total;
  for (int l = 0; l < spec.latent_dims; ++l) {
    Var lss = ad::cholesky(ad_kernel::cross(spec, l, theta, inducing.s, inducing.s, shared));
    const auto& m = inducing.m[static_cast<std::size_t>(l)];
    total = total + ad_dist::kl_gaussian_factors(m, inducing.h_factor[static_cast<std::size_t>(l)],
                                                 t.constant(Matrix::Zero(m.rows(), 1)), lss);
  }
  return total;
}

}  // namespace ad_elbo

// ---------------------------------------------------------------------------

namespace {

InducingVars constant_inducing(ad::Tape& t, const InducingState& st) {
  InducingVars iv;
  if (st.s.size() > 0) iv.s = t.constant(st.s);
  for (const auto& m : st.m) iv.m.push_back(t.constant(Matrix(m)));
  for (const auto& f : st.h_factor) iv.h_factor.push_back(t.constant(f));
  return iv;
}

Matrix pick_rows(const Matrix& m, const std::vector<int>& rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Index>(k)) = m.row(rows[k]);
  return out;
}

CovariatePosteriorVars constant_posterior(ad::Tape& t, const CovariatePosterior& post) {
  CovariatePosteriorVars v;
  v.mean = t.constant(post.mean);
  v.variance = t.constant(post.variance);
  v.log_probs.resize(post.probs.size());
  for (std::size_t q = 0; q < post.probs.size(); ++q) {
    if (post.probs[q].size() > 0) v.log_probs[q] = t.constant(Matrix(post.probs[q].array().log()));
  }
  return v;
}

}  // namespace

double kl_gp_exact(const EncoderOutput& enc, const KernelSpec& spec, const Matrix& x) {
  ad::Tape t;
  Binding b(t, spec.theta, false);
  return ad_elbo::kl_gp_exact(spec, b, t.constant(x), t.constant(enc.mean), t.constant(enc.variance)).scalar();
}

double kl_gp_bound_minibatch(const std::vector<int>& batch, const EncoderOutput& enc, const InducingState& inducing,
                             const KernelSpec& spec, const Matrix& x, Index n_total) {
  if (batch.empty()) throw DimensionMismatch("empty batch");
  for (int i : batch)
    if (i < 0 || i >= x.rows()) throw DimensionMismatch("batch index out of range");
  ad::Tape t;
  Binding b(t, spec.theta, false);
  InducingVars iv = constant_inducing(t, inducing);
  const double scale = static_cast<double>(n_total) / static_cast<double>(batch.size());
  Var rows = ad_elbo::gp_bound_rows(spec, b, iv, t.constant(pick_rows(x, batch)), t.constant(pick_rows(enc.mean, batch)),
                                    t.constant(pick_rows(enc.variance, batch)),
                                    t.constant(Matrix::Ones(static_cast<Index>(batch.size()), 1)), 1, scale);
  return (rows + ad_elbo::gp_bound_global(spec, b, iv, n_total)).scalar();
}

double kl_longitudinal_bound(const std::vector<int>& instances, const EncoderOutput& enc,
                             const InducingState& inducing, const KernelSpec& spec, const LongitudinalIndex& index,
                             const Matrix& x, int p_total) {
  if (instances.empty()) throw DimensionMismatch("empty instance batch");
  ad::Tape t;
  Binding b(t, spec.theta, false);
  InducingVars iv = constant_inducing(t, inducing);
  Var acc = t.constant(0.0);
  for (int p : instances) {
    const std::vector<int> rows = index.rows_of(p);
    acc = acc + ad_elbo::longitudinal_instance_term(spec, b, iv, t.constant(pick_rows(x, rows)),
                                                    t.constant(pick_rows(enc.mean, rows)),
                                                    t.constant(pick_rows(enc.variance, rows)));
  }
  const double scale = static_cast<double>(p_total) / static_cast<double>(instances.size());
  return (0.5 * scale * acc + ad_elbo::longitudinal_global(spec, b, iv, index.rows())).scalar();
}

double covariate_kl_term(const CovariatePosterior& posterior, const CovariatePrior& prior, const CovariateSchema& schema,
                         double scale) {
  ad::Tape t;
  CovariatePosteriorVars v = constant_posterior(t, posterior);
  BoolMatrix observed = posterior.missing.unaryExpr([](bool m) { return !m; });
  return ad_elbo::covariate_kl_term(v, observed, prior, schema, scale).scalar();
}

double kl_cvae(const EncoderOutput& enc, const CovariatePosterior& posterior, const CovariatePrior& prior,
               const CovariateSchema& schema, double scale) {
  ad::Tape t;
  const double latent = ad_elbo::kl_standard_normal(t.constant(enc.mean), t.constant(enc.variance), scale).scalar();
  return latent + covariate_kl_term(posterior, prior, schema, scale);
}

// ---------------------------------------------------------------------------

Batch make_row_batch(const MaskedTable& y, const CovariateTable& x, const std::vector<int>& rows) {
  if (rows.empty()) throw DimensionMismatch("empty batch");
  Batch b;
  b.y = y.select_rows(rows);
  b.x = x.select_rows(rows);
  b.total_rows = y.rows();
  b.scale = static_cast<double>(y.rows()) / static_cast<double>(rows.size());
  return b;
}

Batch make_instance_batch(const MaskedTable& y, const CovariateTable& x, const CovariateSchema& schema,
                          const LongitudinalIndex& full, const std::vector<int>& instances) {
  if (instances.empty()) throw DimensionMismatch("empty instance batch");
  std::vector<int> rows;
  for (int p : instances) {
    const auto r = full.rows_of(p);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  Batch b;
  b.y = y.select_rows(rows);
  b.x = x.select_rows(rows);
  b.total_rows = y.rows();
  b.scale = static_cast<double>(full.instances()) / static_cast<double>(instances.size());
  b.index = build_longitudinal_index(b.x, schema);
  return b;
}

ElboBreakdown ElboGraph::values() const {
  return {reconstruction.scalar(), latent_kl.scalar(), covariate_kl.scalar(), total.scalar()};
}

namespace {

CovariatePosteriorVars restrict_rows(const CovariatePosteriorVars& post, const std::vector<int>& rows) {
  CovariatePosteriorVars out;
  out.mean = ad::gather_rows(post.mean, rows);
  out.variance = ad::gather_rows(post.variance, rows);
  out.log_probs.resize(post.log_probs.size());
  for (std::size_t q = 0; q < post.log_probs.size(); ++q)
    if (post.log_probs[q].valid()) out.log_probs[q] = ad::gather_rows(post.log_probs[q], rows);
  return out;
}

}  // namespace

ElboGraph elbo_graph(const ModelState& model, Binding& params, const Batch& batch, const ElboOptions& options,
                     Rng& rng) {
  ad::Tape& t = params.tape();
  const Networks& nets = model.networks;
  const Index n = batch.y.rows();
  const int latent = model.latent_dims();
  const int mc = options.mc_samples;
  if (mc < 1) throw ConfigError("Monte-Carlo sample count must be >= 1");
  if (batch.x.rows() != n) throw DimensionMismatch("batch Y and X row counts differ");

  const Matrix y_in = fill_and_mask(batch.y);
  Var yin = t.constant(y_in);
  Var xin = t.constant(fill_and_mask(batch.x, nets.layout()));
  EncoderVars enc = nets.encode_z(params, yin, xin);
  CovariatePosteriorVars post = nets.encode_missing(params, xin, yin);

  ElboGraph g;
  g.covariate_kl = ad_elbo::covariate_kl_term(post, batch.x.observed, model.prior, model.schema, batch.scale);

  // z draws for every (sample, row), taken before any covariate draw.
  const Matrix z_eps = rng.normal_matrix(n * mc, latent);
  std::vector<int> stacked(static_cast<std::size_t>(n * mc));
  for (Index k = 0; k < n * mc; ++k) stacked[static_cast<std::size_t>(k)] = static_cast<int>(k % n);
  Var z = ad::gather_rows(enc.mean, stacked) + cwise_mul(sqrt(ad::gather_rows(enc.variance, stacked)), t.constant(z_eps));

  Var y_fill = t.constant(Matrix(y_in.leftCols(batch.y.cols())));
  Var y_mask = t.constant(Matrix(y_in.rightCols(batch.y.cols())));

  if (model.family == Family::cvae) {
    BranchExpansion ex = expand_rows(batch.x, model.schema, post, options.enumeration_cap, mc, rng);
    std::vector<int> z_rows(ex.row_of.size());
    for (std::size_t e = 0; e < z_rows.size(); ++e) z_rows[e] = ex.sample_of[e] * static_cast<int>(n) + ex.row_of[e];
    DecoderVars dec = nets.decode(params, ad::gather_rows(z, z_rows), encode_instantiated(ex.x, nets.layout()));
    Var ll = cwise_mul(ad_dist::gaussian_log_density_entries(ad::gather_rows(y_fill, ex.row_of), dec.mean, dec.log_variance),
                       ad::gather_rows(y_mask, ex.row_of));
    g.reconstruction = sum(cwise_mul(ex.weight, row_sum(ll))) * (batch.scale / mc);
    g.latent_kl = ad_elbo::kl_standard_normal(enc.mean, enc.variance, batch.scale);
  } else {
    DecoderVars dec = nets.decode(params, z, Var());
    Var ll = cwise_mul(ad_dist::gaussian_log_density_entries(ad::gather_rows(y_fill, stacked), dec.mean, dec.log_variance),
                       ad::gather_rows(y_mask, stacked));
    g.reconstruction = sum(ll) * (batch.scale / mc);

    const KernelSpec& spec = model.kernel;
    const bool needs_inducing = model.family != Family::longitudinal_gp || !spec.shared_components().empty();
    InducingVars inducing;
    if (needs_inducing && options.gp_kl == GpKl::bound) {
      inducing = bind_inducing(params, latent, model.inducing_fixed, model.schema, model.train_inducing);
    }
    if (options.gp_kl == GpKl::exact) {
      MissingExpectationPlan plan = plan_missing(batch.x, model.schema, options.enumeration_cap, mc, true);
      g.latent_kl = expect_over_missing_covariates(
          [&](const Var& xi) { return ad_elbo::kl_gp_exact(spec, params, xi, enc.mean, enc.variance); }, batch.x, post,
          plan, rng);
    } else if (model.family == Family::longitudinal_gp) {
      Var acc = t.constant(0.0);
      for (int p = 0; p < batch.index.instances(); ++p) {
        const std::vector<int> rows = batch.index.rows_of(p);
        const CovariateTable xp = batch.x.select_rows(rows);
        const CovariatePosteriorVars pp = restrict_rows(post, rows);
        Var mp = ad::gather_rows(enc.mean, rows);
        Var vp = ad::gather_rows(enc.variance, rows);
        MissingExpectationPlan plan = plan_missing(xp, model.schema, options.enumeration_cap, mc, true);
        acc = acc + expect_over_missing_covariates(
                        [&](const Var& xi) { return ad_elbo::longitudinal_instance_term(spec, params, inducing, xi, mp, vp); },
                        xp, pp, plan, rng);
      }
      g.latent_kl = 0.5 * batch.scale * acc + ad_elbo::longitudinal_global(spec, params, inducing, batch.total_rows);
    } else {
      BranchExpansion ex = expand_rows(batch.x, model.schema, post, options.enumeration_cap, mc, rng);
      g.latent_kl = ad_elbo::gp_bound_rows(spec, params, inducing, ex.x, ad::gather_rows(enc.mean, ex.row_of),
                                           ad::gather_rows(enc.variance, ex.row_of), ex.weight, mc, batch.scale) +
                    ad_elbo::gp_bound_global(spec, params, inducing, batch.total_rows);
    }
  }
  g.total = g.reconstruction - g.latent_kl - g.covariate_kl;
  return g;
}

ElboBreakdown elbo_step(const ModelState& model, const Batch& batch, const ElboOptions& options, Rng& rng) {
  ad::Tape t;
  Binding b(t, model.params, false);
  return elbo_graph(model, b, batch, options, rng).values();
}

}  // namespace mcvae
