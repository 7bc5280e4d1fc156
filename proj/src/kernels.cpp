#include "mcvae/kernels.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace mcvae {

KernelForm KernelComponent::form() const {
  if (categorical.empty()) return KernelForm::squared_exponential;
  if (continuous.empty()) return KernelForm::categorical;
  return KernelForm::product;
}

KernelSpec::KernelSpec(std::vector<KernelComponent> comps, int dims, const CovariateSchema& schema,
                       int instance)
    : components(std::move(comps)), latent_dims(dims), instance_component(instance) {
  resolve(schema);
  initialise(theta);
}

void KernelSpec::resolve(const CovariateSchema& schema) {
  if (components.empty()) throw ConfigError("kernel needs at least one component");
  if (latent_dims < 1) throw ConfigError("kernel latent_dims must be >= 1");
  if (instance_component >= size()) throw ConfigError("instance component index out of range");
  for (auto& c : components) {
    if (c.continuous.empty() && c.categorical.empty()) throw ConfigError("kernel component reads no columns");
    c.continuous_index.clear();
    c.categorical_index.clear();
    for (const auto& name : c.continuous) {
      const int q = schema.index_of(name);
      if (schema.column(q).kind != ColumnKind::continuous) {
        throw ConfigError("kernel column '" + name + "' is not continuous");
      }
      c.continuous_index.push_back(q);
    }
    for (const auto& name : c.categorical) {
      const int q = schema.index_of(name);
      if (schema.column(q).kind != ColumnKind::categorical) {
        throw ConfigError("kernel column '" + name + "' is not categorical");
      }
      c.categorical_index.push_back(q);
    }
  }
}

void KernelSpec::initialise(ParameterSet& into) const {
  for (int l = 0; l < latent_dims; ++l) {
    for (int r = 0; r < size(); ++r) {
      const auto& c = components[static_cast<std::size_t>(r)];
      if (!c.continuous.empty()) {
        into.set(lengthscale_key(l, r), Matrix::Zero(1, static_cast<Index>(c.continuous.size())));
      }
      into.set(variance_key(l, r), Matrix::Zero(1, 1));
    }
    into.set(noise_key(l), Matrix::Constant(1, 1, kInitialLogNoise));
  }
}

std::vector<int> KernelSpec::shared_components() const {
  std::vector<int> out;
  for (int r = 0; r < size(); ++r)
    if (r != instance_component) out.push_back(r);
  return out;
}

std::string KernelSpec::lengthscale_key(int l, int r) {
  return "kernel/" + std::to_string(l) + "/" + std::to_string(r) + "/log_lengthscale";
}
std::string KernelSpec::variance_key(int l, int r) {
  return "kernel/" + std::to_string(l) + "/" + std::to_string(r) + "/log_variance";
}
std::string KernelSpec::noise_key(int l) { return "kernel/" + std::to_string(l) + "/log_noise"; }

double categorical_kernel(int a, int b, int cardinality) {
  if (a < 0 || a >= cardinality || b < 0 || b >= cardinality) {
    throw InvalidCategory("category id outside [0, " + std::to_string(cardinality) + ")");
  }
  return a == b ? 1.0 : 0.0;
}

namespace {

int category_at(const Matrix& x, Index i, int q) {
  const double v = x(i, q);
  if (v != std::floor(v) || v < 0) {
    throw InvalidCategory("covariate column " + std::to_string(q) + " row " + std::to_string(i) +
                          " holds non-category value " + std::to_string(v));
  }
  return static_cast<int>(v);
}

Matrix indicator(const Matrix& a, const Matrix& b, const std::vector<int>& columns) {
  Matrix out = Matrix::Ones(a.rows(), b.rows());
  for (int q : columns) {
    for (Index j = 0; j < b.rows(); ++j) {
      const int cb = category_at(b, j, q);
      for (Index i = 0; i < a.rows(); ++i) {
        if (category_at(a, i, q) != cb) out(i, j) = 0.0;
      }
    }
  }
  return out;
}

void check_latent(const KernelSpec& spec, int l) {
  if (l < 0 || l >= spec.latent_dims) throw DimensionMismatch("latent dimension out of range");
}

}  // namespace

namespace ad_kernel {

Var component_cross(const KernelSpec& spec, int l, int r, Binding& theta, const Var& a, const Var& b) {
  check_latent(spec, l);
  if (a.cols() != b.cols()) throw DimensionMismatch("gram: covariate widths differ");
  const auto& c = spec.components.at(static_cast<std::size_t>(r));
  Var log_var = theta[KernelSpec::variance_key(l, r)];
  Var k;
  if (!c.continuous_index.empty()) {
    k = ad::se_cross(ad::gather_cols(a, c.continuous_index), ad::gather_cols(b, c.continuous_index),
                     theta[KernelSpec::lengthscale_key(l, r)], log_var);
  }
  if (!c.categorical_index.empty()) {
    Var ind = theta.tape().constant(indicator(a.value(), b.value(), c.categorical_index));
    k = k.valid() ? cwise_mul(k, ind) : cwise_mul(ind, exp(log_var));
  }
  return k;
}

Var cross(const KernelSpec& spec, int l, Binding& theta, const Var& a, const Var& b,
          const std::vector<int>& components) {
  Var total;
  for (int r : components) {
    Var k = component_cross(spec, l, r, theta, a, b);
    total = total.valid() ? total + k : k;
  }
  if (!total.valid()) total = theta.tape().constant(Matrix::Zero(a.rows(), b.rows()));
  return total;
}

Var cross(const KernelSpec& spec, int l, Binding& theta, const Var& a, const Var& b) {
  std::vector<int> all(static_cast<std::size_t>(spec.size()));
  std::iota(all.begin(), all.end(), 0);
  return cross(spec, l, theta, a, b, all);
}

Var noise(const KernelSpec& spec, int l, Binding& theta) {
  check_latent(spec, l);
  return exp(theta[KernelSpec::noise_key(l)]);
}

Var gram(const KernelSpec& spec, int l, Binding& theta, const Var& a, bool include_noise) {
  Var k = cross(spec, l, theta, a, a);
  if (!include_noise) return k;
  Var eye = theta.tape().constant(Matrix::Identity(a.rows(), a.rows()));
  return k + cwise_mul(eye, noise(spec, l, theta));
}

Var gram_diag(const KernelSpec& spec, int l, Binding& theta, const Var& a, const std::vector<int>& components) {
  check_latent(spec, l);
  Var ones = theta.tape().constant(Matrix::Ones(a.rows(), 1));
  Var total;
  for (int r : components) {
    Var v = exp(theta[KernelSpec::variance_key(l, r)]);
    total = total.valid() ? total + v : v;
  }
  if (!total.valid()) return theta.tape().constant(Matrix::Zero(a.rows(), 1));
  return cwise_mul(ones, total);
}

}  // namespace ad_kernel

Matrix gram(const KernelSpec& spec, const ParameterSet& theta, int l, const Matrix& a, bool include_noise) {
  ad::Tape t;
  ad::Binding b(t, theta, false);
  return ad_kernel::gram(spec, l, b, t.constant(a), include_noise).value();
}

Matrix gram(const KernelSpec& spec, const ParameterSet& theta, int l, const Matrix& a, const Matrix& bm) {
  ad::Tape t;
  ad::Binding b(t, theta, false);
  return ad_kernel::cross(spec, l, b, t.constant(a), t.constant(bm)).value();
}

Matrix gram(const KernelSpec& spec, int l, const Matrix& a, bool include_noise) {
  return gram(spec, spec.theta, l, a, include_noise);
}

Matrix gram(const KernelSpec& spec, int l, const Matrix& a, const Matrix& b) { return gram(spec, spec.theta, l, a, b); }

Matrix gram_components(const KernelSpec& spec, const ParameterSet& theta, int l, const Matrix& a, const Matrix& bm,
                       const std::vector<int>& components) {
  ad::Tape t;
  ad::Binding b(t, theta, false);
  return ad_kernel::cross(spec, l, b, t.constant(a), t.constant(bm), components).value();
}

GramBundle gram_bundle(const KernelSpec& spec, const ParameterSet& theta, int l, const Matrix& x, const Matrix& s) {
  if (s.rows() == 0) throw DimensionMismatch("gram_bundle needs at least one inducing row");
  ad::Tape t;
  ad::Binding b(t, theta, false);
  ad::Var xv = t.constant(x);
  ad::Var sv = t.constant(s);
  GramBundle out;
  std::vector<int> all(static_cast<std::size_t>(spec.size()));
  std::iota(all.begin(), all.end(), 0);
  out.kxx_diag = ad_kernel::gram_diag(spec, l, b, xv, all).value();
  out.kxs = ad_kernel::cross(spec, l, b, xv, sv).value();
  out.kss = ad_kernel::cross(spec, l, b, sv, sv).value();
  const Matrix factor = ad::cholesky(t.constant(out.kss)).value();
  const Matrix v = factor.triangularView<Eigen::Lower>().solve(out.kxs.transpose());
  out.nystrom_diag = (out.kxx_diag - v.colwise().squaredNorm().transpose()).cwiseMax(0.0);
  return out;
}

GramBundle gram_bundle(const KernelSpec& spec, int l, const Matrix& x, const Matrix& s) {
  return gram_bundle(spec, spec.theta, l, x, s);
}

std::vector<int> LongitudinalIndex::rows_of(int p) const {
  std::vector<int> out(static_cast<std::size_t>(count.at(static_cast<std::size_t>(p))));
  std::iota(out.begin(), out.end(), start[static_cast<std::size_t>(p)]);
  return out;
}

std::vector<int> canonical_order(const CovariateTable& x, const CovariateSchema& schema) {
  const auto inst = schema.instance_column();
  if (!inst) throw TooFewInstances("schema has no instance-id column");
  const auto time = schema.time_column();
  std::vector<int> order(static_cast<std::size_t>(x.rows()));
  std::iota(order.begin(), order.end(), 0);
  auto time_of = [&](int i) {
    return (time && x.observed(i, *time)) ? x.values(i, *time) : std::numeric_limits<double>::infinity();
  };
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (x.values(a, *inst) != x.values(b, *inst)) return x.values(a, *inst) < x.values(b, *inst);
    return time_of(a) < time_of(b);
  });
  return order;
}

LongitudinalIndex build_longitudinal_index(const CovariateTable& x, const CovariateSchema& schema) {
  const auto inst = schema.instance_column();
  if (!inst) throw TooFewInstances("schema has no instance-id column");
  LongitudinalIndex idx;
  idx.instance_of_row.resize(static_cast<std::size_t>(x.rows()));
  for (Index i = 0; i < x.rows(); ++i) {
    if (!x.observed(i, *inst)) throw DataError("instance id missing at row " + std::to_string(i));
    const int id = category_at(x.values, i, *inst);
    if (idx.instance_ids.empty() || idx.instance_ids.back() != id) {
      if (std::find(idx.instance_ids.begin(), idx.instance_ids.end(), id) != idx.instance_ids.end()) {
        throw DataError("rows of instance " + std::to_string(id) + " are not contiguous");
      }
      idx.instance_ids.push_back(id);
      idx.start.push_back(static_cast<int>(i));
      idx.count.push_back(0);
    }
    ++idx.count.back();
    idx.instance_of_row[static_cast<std::size_t>(i)] = idx.instances() - 1;
  }
  return idx;
}

LongitudinalBlocks longitudinal_blocks(const KernelSpec& spec, const ParameterSet& theta, int l,
                                       const LongitudinalIndex& index, const Matrix& x, const Matrix& s) {
  if (spec.instance_component < 0) throw ConfigError("kernel has no instance-specific component");
  if (index.rows() != x.rows()) throw DimensionMismatch("longitudinal index does not match covariate rows");
  const std::vector<int> own{spec.instance_component};
  const std::vector<int> shared = spec.shared_components();
  const double noise = std::exp(theta.at(KernelSpec::noise_key(l))(0, 0));
  LongitudinalBlocks out;
  if (!shared.empty()) out.shared_inducing = gram_components(spec, theta, l, s, s, shared);
  for (int p = 0; p < index.instances(); ++p) {
    const Matrix xp = x.middleRows(index.start[static_cast<std::size_t>(p)], index.count[static_cast<std::size_t>(p)]);
    Matrix sigma = gram_components(spec, theta, l, xp, xp, own);
    sigma.diagonal().array() += noise;
    ad::Tape t;
    out.sigma_factors.push_back(ad::cholesky(t.constant(sigma)).value());
    out.shared_cross.push_back(shared.empty() ? Matrix() : gram_components(spec, theta, l, xp, s, shared));
  }
  return out;
}

}  // namespace mcvae
