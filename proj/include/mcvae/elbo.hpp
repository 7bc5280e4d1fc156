#pragma once

// Training objectives: reconstruction, latent KLs (CVAE, exact GP, the
// row-wise inducing bound and the longitudinal inducing bound), the
// covariate KL, and the expectation over missing covariates.

#include <functional>
#include <string>
#include <vector>

#include "mcvae/diffmath.hpp"
#include "mcvae/distributions.hpp"
#include "mcvae/kernels.hpp"
#include "mcvae/networks.hpp"
#include "mcvae/random.hpp"

namespace mcvae {

enum class Family { cvae, regression_gp, temporal_gp, longitudinal_gp };
enum class GpKl { bound, exact };

std::string to_string(Family f);
Family family_from_string(const std::string& s);
inline bool is_gp(Family f) { return f != Family::cvae; }

inline constexpr int kDefaultEnumerationCap = 64;
inline constexpr Index kExactKlSizeGuard = 4096;

// ---------------------------------------------------------------------------
// Inducing variables.

struct InducingState {
  Matrix s;                       // M x Q, category ids in categorical columns
  std::vector<Vector> m;          // per latent dimension
  std::vector<Matrix> h_factor;   // lower factor of H_l, positive diagonal

  int size() const { return static_cast<int>(s.rows()); }
  void write(ParameterSet& into) const;
  static InducingState read(const ParameterSet& from, int latent_dims);

  static std::string s_key() { return "inducing/S"; }
  static std::string m_key(int l) { return "inducing/" + std::to_string(l) + "/m"; }
  static std::string h_key(int l) { return "inducing/" + std::to_string(l) + "/H"; }
};

struct InducingVars {
  Var s;
  std::vector<Var> m;
  std::vector<Var> h_factor;
};

// Continuous columns of S come from the parameter (trainable unless frozen);
// categorical columns are pinned to `s_fixed`.
InducingVars bind_inducing(Binding& params, int latent_dims, const Matrix& s_fixed, const CovariateSchema& schema,
                           bool train_locations);

// ---------------------------------------------------------------------------
// Expectation over missing covariates.

struct MissingEntry {
  int row = 0;
  int column = 0;
  int cardinality = 0;  // 0 for continuous entries
};

struct MissingExpectationPlan {
  std::vector<MissingEntry> categorical;
  std::vector<MissingEntry> continuous;
  int cap = kDefaultEnumerationCap;
  int mc_samples = 1;
  // When set, an over-cap joint enumeration is replaced by one posterior draw
  // per categorical entry; otherwise EnumerationOverflow is raised.
  bool sample_on_overflow = false;

  double joint_size() const;
};

MissingExpectationPlan plan_missing(const CovariateTable& x, const CovariateSchema& schema, int cap, int mc_samples,
                                    bool sample_on_overflow = false);

// Weighted sum over the joint enumeration of categorical entries, with fresh
// continuous draws per branch, averaged over plan.mc_samples. The term
// receives a fully instantiated covariate matrix (rows of x).
Var expect_over_missing_covariates(const std::function<Var(const Var& x_inst)>& term, const CovariateTable& x,
                                   const CovariatePosteriorVars& posterior, const MissingExpectationPlan& plan,
                                   Rng& rng);

// Row-factorised variant: every row expands into its own branches.
struct BranchExpansion {
  Var x;                    // E x Q instantiated covariates
  std::vector<int> row_of;     // batch row of each branch
  std::vector<int> sample_of;  // Monte-Carlo sample of each branch
  Var weight;               // E x 1; sums to mc_samples over the branches of a row
  int mc_samples = 1;
};

BranchExpansion expand_rows(const CovariateTable& x, const CovariateSchema& schema,
                            const CovariatePosteriorVars& posterior, int cap, int mc_samples, Rng& rng);

// ---------------------------------------------------------------------------
// KL terms on the graph.

namespace ad_elbo {

// sum_i sum_missing KL(q || p_lambda), times scale.
Var covariate_kl_term(const CovariatePosteriorVars& posterior, const BoolMatrix& observed, const CovariatePrior& prior,
                      const CovariateSchema& schema, double scale);

// sum_rows KL(N(mean, var) || N(0, I)), times scale.
Var kl_standard_normal(const Var& mean, const Var& variance, double scale);

// Sum over l of KL(N(mean_l, diag var_l) || N(0, K_XX^(l) + noise I)).
Var kl_gp_exact(const KernelSpec& spec, Binding& theta, const Var& x, const Var& mean, const Var& variance);

// Row terms of the inducing bound over expanded rows, summed over latent
// dimensions, weighted, averaged over samples and scaled by 0.5 * scale.
Var gp_bound_rows(const KernelSpec& spec, Binding& theta, const InducingVars& inducing, const Var& x,
                  const Var& mean, const Var& variance, const Var& weight, int mc_samples, double scale);
// N/2 log noise - N/2 + KL(N(m, H) || N(0, K_SS)), summed over l.
Var gp_bound_global(const KernelSpec& spec, Binding& theta, const InducingVars& inducing, Index n_total);

// Bracketed per-instance term of the longitudinal bound, summed over l.
Var longitudinal_instance_term(const KernelSpec& spec, Binding& theta, const InducingVars& inducing, const Var& x,
                               const Var& mean, const Var& variance);
// -N/2 + KL(N(m, H) || N(0, K^A_SS)) summed over l; the KL is skipped
// without shared components.
Var longitudinal_global(const KernelSpec& spec, Binding& theta, const InducingVars& inducing, Index n_total);

}  // namespace ad_elbo

// ---------------------------------------------------------------------------
// Value-level entry points with fixed encoder statistics.

// Encoder statistics are N x L.
double kl_gp_exact(const EncoderOutput& enc, const KernelSpec& spec, const Matrix& x);
double kl_gp_bound_minibatch(const std::vector<int>& batch, const EncoderOutput& enc, const InducingState& inducing,
                             const KernelSpec& spec, const Matrix& x, Index n_total);
double kl_longitudinal_bound(const std::vector<int>& instances, const EncoderOutput& enc,
                             const InducingState& inducing, const KernelSpec& spec, const LongitudinalIndex& index,
                             const Matrix& x, int p_total);
// Batch rows of enc/posterior/observed; scale = N / N-hat.
double kl_cvae(const EncoderOutput& enc, const CovariatePosterior& posterior, const CovariatePrior& prior,
               const CovariateSchema& schema, double scale);
double covariate_kl_term(const CovariatePosterior& posterior, const CovariatePrior& prior, const CovariateSchema& schema,
                         double scale);

// ---------------------------------------------------------------------------
// Model state and the assembled objective.

struct ElboOptions {
  int enumeration_cap = kDefaultEnumerationCap;
  int mc_samples = 1;
  GpKl gp_kl = GpKl::bound;
};

struct ModelState {
  Family family = Family::cvae;
  CovariateSchema schema;
  Networks networks;
  KernelSpec kernel;      // structure only; values live in params
  CovariatePrior prior;
  Matrix inducing_fixed;  // categorical coordinates of S
  bool train_inducing = true;
  ParameterSet params;

  int latent_dims() const { return networks.latent_dims(); }
  int data_dims() const { return networks.data_dims(); }
};

struct Batch {
  MaskedTable y;
  CovariateTable x;
  double scale = 1.0;  // N / N-hat, or P / P-hat for instance batches
  Index total_rows = 0;
  LongitudinalIndex index;  // batch-local; longitudinal family only
};

Batch make_row_batch(const MaskedTable& y, const CovariateTable& x, const std::vector<int>& rows);
// `x` rows must already be in canonical instance order.
Batch make_instance_batch(const MaskedTable& y, const CovariateTable& x, const CovariateSchema& schema,
                          const LongitudinalIndex& full, const std::vector<int>& instances);

struct ElboBreakdown {
  double reconstruction = 0.0;
  double latent_kl = 0.0;
  double covariate_kl = 0.0;
  double total = 0.0;
};

struct ElboGraph {
  Var reconstruction;
  Var latent_kl;
  Var covariate_kl;
  Var total;
  ElboBreakdown values() const;
};

ElboGraph elbo_graph(const ModelState& model, Binding& params, const Batch& batch, const ElboOptions& options,
                     Rng& rng);
ElboBreakdown elbo_step(const ModelState& model, const Batch& batch, const ElboOptions& options, Rng& rng);

}  // namespace mcvae
