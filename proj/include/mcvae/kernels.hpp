#pragma once

// Additive GP covariance functions over covariate rows.
//
// A component multiplies an SE kernel over some continuous columns by 0/1
// indicators over some categorical columns and a component variance. The
// latent dimension l has its own parameters for every component plus a
// noise variance. Parameters live in a ParameterSet under kernel/... keys.

#include <string>
#include <vector>

#include "mcvae/diffmath.hpp"
#include "mcvae/distributions.hpp"

namespace mcvae {

using ad::ParameterSet;

enum class KernelForm { squared_exponential, categorical, product };

struct KernelComponent {
  std::vector<std::string> continuous;
  std::vector<std::string> categorical;

  // Filled by KernelSpec from the schema.
  std::vector<int> continuous_index;
  std::vector<int> categorical_index;

  KernelForm form() const;
};

inline constexpr double kInitialLogNoise = -2.302585092994046;  // log 0.1

struct KernelSpec {
  std::vector<KernelComponent> components;
  int latent_dims = 1;
  // Index of the instance-specific component, -1 when none.
  int instance_component = -1;
  ParameterSet theta;

  KernelSpec() = default;
  // Resolves column names and writes default parameter values.
  KernelSpec(std::vector<KernelComponent> components, int latent_dims, const CovariateSchema& schema,
             int instance_component = -1);

  int size() const { return static_cast<int>(components.size()); }
  void resolve(const CovariateSchema& schema);
  void initialise(ParameterSet& into) const;
  // Every component except the instance-specific one.
  std::vector<int> shared_components() const;

  static std::string lengthscale_key(int l, int r);
  static std::string variance_key(int l, int r);
  static std::string noise_key(int l);
};

// ---------------------------------------------------------------------------
// Scalar kernels.

template <class A, class B, class C>
double se_kernel(const Eigen::MatrixBase<A>& x, const Eigen::MatrixBase<B>& x2,
                 const Eigen::MatrixBase<C>& log_lengthscales, double log_variance) {
  if (x.size() != x2.size() || x.size() != log_lengthscales.size()) {
    throw DimensionMismatch("se_kernel: argument lengths differ");
  }
  const double d2 = ((x.array() - x2.array()) / log_lengthscales.array().exp()).square().sum();
  return std::exp(log_variance) * std::exp(-0.5 * d2);
}

double categorical_kernel(int a, int b, int cardinality);

// ---------------------------------------------------------------------------
// Gram matrices from parameter values. A and B are fully instantiated
// covariate rows with category ids stored as doubles.

Matrix gram(const KernelSpec& spec, const ParameterSet& theta, int l, const Matrix& a, bool include_noise);
Matrix gram(const KernelSpec& spec, const ParameterSet& theta, int l, const Matrix& a, const Matrix& b);
Matrix gram(const KernelSpec& spec, int l, const Matrix& a, bool include_noise);
Matrix gram(const KernelSpec& spec, int l, const Matrix& a, const Matrix& b);
// Sum over the listed components only.
Matrix gram_components(const KernelSpec& spec, const ParameterSet& theta, int l, const Matrix& a, const Matrix& b,
                       const std::vector<int>& components);

struct GramBundle {
  Vector kxx_diag;
  Matrix kxs;
  Matrix kss;
  Vector nystrom_diag;
};

GramBundle gram_bundle(const KernelSpec& spec, const ParameterSet& theta, int l, const Matrix& x, const Matrix& s);
GramBundle gram_bundle(const KernelSpec& spec, int l, const Matrix& x, const Matrix& s);

// ---------------------------------------------------------------------------
// Longitudinal structure.

struct LongitudinalIndex {
  std::vector<int> instance_of_row;
  // Row range of instance p is [start[p], start[p] + count[p]).
  std::vector<int> start;
  std::vector<int> count;
  std::vector<int> instance_ids;  // original id of each instance

  int instances() const { return static_cast<int>(start.size()); }
  int rows() const { return static_cast<int>(instance_of_row.size()); }
  std::vector<int> rows_of(int p) const;
};

// Row order grouping instances (ascending id), then by time when a time
// column exists, then by original position.
std::vector<int> canonical_order(const CovariateTable& x, const CovariateSchema& schema);
// Requires contiguous, observed instance ids.
LongitudinalIndex build_longitudinal_index(const CovariateTable& x, const CovariateSchema& schema);

struct LongitudinalBlocks {
  std::vector<Matrix> sigma_factors;  // lower Cholesky of K^R_pp + noise I
  std::vector<Matrix> shared_cross;   // K^A between rows of p and S; empty without shared components
  Matrix shared_inducing;             // K^A_SS
};

LongitudinalBlocks longitudinal_blocks(const KernelSpec& spec, const ParameterSet& theta, int l,
                                       const LongitudinalIndex& index, const Matrix& x, const Matrix& s);

// ---------------------------------------------------------------------------
// Differentiable grams.

namespace ad_kernel {

using ad::Binding;
using ad::Var;

Var component_cross(const KernelSpec& spec, int l, int r, Binding& theta, const Var& a, const Var& b);
Var cross(const KernelSpec& spec, int l, Binding& theta, const Var& a, const Var& b,
          const std::vector<int>& components);
Var cross(const KernelSpec& spec, int l, Binding& theta, const Var& a, const Var& b);
Var gram(const KernelSpec& spec, int l, Binding& theta, const Var& a, bool include_noise);
// exp(log noise) as a 1x1 Var.
Var noise(const KernelSpec& spec, int l, Binding& theta);
// Diagonal of the noiseless gram of a, Nx1.
Var gram_diag(const KernelSpec& spec, int l, Binding& theta, const Var& a, const std::vector<int>& components);

}  // namespace ad_kernel

}  // namespace mcvae
