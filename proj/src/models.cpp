#include "mcvae/models.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace mcvae {

using nlohmann::json;

namespace {

constexpr int kDefaultRowBatch = 64;
constexpr int kDefaultInstanceBatch = 8;

bool has_inducing(const ModelConfig& c, const KernelSpec& spec) {
  return is_gp(c.family) && (c.family != Family::longitudinal_gp || !spec.shared_components().empty());
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration.

void ModelConfig::validate(const CovariateSchema& schema) const {
  if (latent_dims < 1) throw ConfigError("model.latent_dims must be >= 1");
  if (mc_samples < 1) throw ConfigError("model.mc_samples must be >= 1");
  if (enumeration_cap < 1) throw ConfigError("model.enumeration_cap must be >= 1");
  if (inducing_points < 1) throw ConfigError("model.inducing_points must be >= 1");
  if (family == Family::temporal_gp && !schema.time_column())
    throw ConfigError("the temporal family needs a time column");
  if (family == Family::longitudinal_gp) {
    if (!schema.instance_column()) throw ConfigError("the longitudinal family needs an instance-id column");
    if (!kernel.empty()) {
      if (instance_component < 0 || instance_component >= static_cast<int>(kernel.size()))
        throw ConfigError("model.instance_component must designate a kernel component");
      const auto& cats = kernel[static_cast<std::size_t>(instance_component)].categorical;
      const std::string& id = schema.column(*schema.instance_column()).name;
      if (std::find(cats.begin(), cats.end(), id) == cats.end())
        throw ConfigError("the instance-specific component must read the instance-id column '" + id + "'");
    }
  } else if (is_gp(family) && instance_component >= 0) {
    throw ConfigError("model.instance_component is only used by the longitudinal family");
  }
  if (is_gp(family) && !kernel.empty()) {
    KernelSpec probe;
    probe.components = kernel;
    probe.latent_dims = latent_dims;
    probe.instance_component = instance_component;
    try {
      probe.resolve(schema);
    } catch (const SchemaMismatch& e) {
      throw ConfigError(std::string("model.kernel: ") + e.what());
    }
  }
}

std::vector<KernelComponent> default_kernel(Family family, const CovariateSchema& schema, int* instance_component) {
  std::vector<KernelComponent> out;
  if (instance_component) *instance_component = -1;
  const auto time = schema.time_column();
  const auto inst = schema.instance_column();
  auto name = [&](int q) { return schema.column(q).name; };
  switch (family) {
    case Family::cvae: break;
    case Family::regression_gp: {
      KernelComponent se;
      for (int q : schema.continuous_columns()) se.continuous.push_back(name(q));
      if (!se.continuous.empty()) out.push_back(se);
      for (int q : schema.categorical_columns())
        if (!inst || q != *inst) out.push_back({{}, {name(q)}, {}, {}});
      if (out.empty()) throw ConfigError("no covariates for a regression kernel");
      break;
    }
    case Family::temporal_gp:
      if (!time) throw ConfigError("the temporal family needs a time column");
      out.push_back({{name(*time)}, {}, {}, {}});
      break;
    case Family::longitudinal_gp: {
      if (!inst) throw ConfigError("the longitudinal family needs an instance-id column");
      KernelComponent own;
      own.categorical = {name(*inst)};
      if (time) own.continuous = {name(*time)};
      out.push_back(own);
      if (instance_component) *instance_component = 0;
      KernelComponent shared;
      if (time) {
        shared.continuous = {name(*time)};
      } else {
        for (int q : schema.continuous_columns()) shared.continuous.push_back(name(q));
      }
      if (!shared.continuous.empty()) out.push_back(shared);
      break;
    }
  }
  return out;
}

void TrainConfig::validate() const {
  if (!(step_size > 0)) throw ConfigError("train.step_size must be > 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train decay rates must lie in [0, 1)");
  if (!(epsilon > 0)) throw ConfigError("train.epsilon must be > 0");
  if (batch_size < 0) throw ConfigError("train.batch_size must be >= 0");
  if (max_epochs < 0) throw ConfigError("train.max_epochs must be >= 0");
  if (patience < 1) throw ConfigError("train.patience must be >= 1");
  if (validation_mc_samples < 1) throw ConfigError("train.validation_mc_samples must be >= 1");
}

// ---------------------------------------------------------------------------
// Assembly.

namespace {

ModelState build_state(const ModelConfig& config, const CovariateSchema& schema, int data_dims) {
  ModelState st;
  st.family = config.family;
  st.schema = schema;
  NetworkConfig net = config.networks;
  net.decoder_reads_x = config.family == Family::cvae;
  st.networks = Networks(schema, data_dims, config.latent_dims, net);
  st.train_inducing = config.train_inducing;
  if (is_gp(config.family)) {
    int inst = config.instance_component;
    std::vector<KernelComponent> comps = config.kernel;
    if (comps.empty()) comps = default_kernel(config.family, schema, &inst);
    st.kernel = KernelSpec(comps, config.latent_dims, schema, inst);
  }
  return st;
}

Matrix stable_factor(const Matrix& k) {
  double jitter = 0.0;
  while (true) {
    Eigen::LLT<Matrix> llt(k + jitter * Matrix::Identity(k.rows(), k.cols()));
    if (llt.info() == Eigen::Success) return llt.matrixL();
    jitter = jitter == 0.0 ? ad::kDefaultJitter : jitter * 10.0;
    if (jitter > ad::kMaxJitter) throw NotPositiveDefinite("inducing covariance is not positive definite");
  }
}

}  // namespace

TrainedModel initialise_model(const ModelConfig& config, const Dataset& train, std::uint64_t seed) {
  train.validate();
  config.validate(train.schema);
  if (train.rows() < 1) throw DataError("training set is empty");
  TrainedModel m;
  m.config = config;
  m.state = build_state(config, train.schema, static_cast<int>(train.y.cols()));
  Rng rng = Rng::stream(seed, "init");
  m.state.networks.initialise(m.state.params, rng);
  m.state.prior = fit_covariate_prior(train.x, train.schema);

  if (is_gp(config.family)) {
    const KernelSpec& spec = m.state.kernel;
    for (const auto& [k, v] : spec.theta.items()) m.state.params.set(k, v);
    if (has_inducing(config, spec)) {
      const auto n = static_cast<int>(train.rows());
      const int count = std::min(config.inducing_points, n);
      std::vector<int> rows(static_cast<std::size_t>(n));
      std::iota(rows.begin(), rows.end(), 0);
      std::shuffle(rows.begin(), rows.end(), rng.engine());
      Matrix s(count, train.schema.size());
      for (int k = 0; k < count; ++k) {
        const int i = rows[static_cast<std::size_t>(k)];
        for (int q = 0; q < train.schema.size(); ++q) {
          const auto& prior = m.state.prior.columns[static_cast<std::size_t>(q)];
          if (train.x.observed(i, q)) {
            s(k, q) = train.x.values(i, q);
          } else if (train.schema.column(q).kind == ColumnKind::continuous) {
            s(k, q) = prior.mean;
          } else {
            Index best = 0;
            prior.probs.maxCoeff(&best);
            s(k, q) = static_cast<double>(best);
          }
        }
      }
      InducingState ind;
      ind.s = s;
      const std::vector<int> shared = config.family == Family::longitudinal_gp ? spec.shared_components() : [&] {
        std::vector<int> all(static_cast<std::size_t>(spec.size()));
        std::iota(all.begin(), all.end(), 0);
        return all;
      }();
      for (int l = 0; l < config.latent_dims; ++l) {
        ind.m.push_back(Vector::Zero(count));
        ind.h_factor.push_back(stable_factor(gram_components(spec, spec.theta, l, s, s, shared)));
      }
      ind.write(m.state.params);
      m.state.inducing_fixed = s;
    }
  }
  for (const auto& [k, v] : m.state.params.items()) {
    m.optimiser.first.set(k, Matrix::Zero(v.rows(), v.cols()));
    m.optimiser.second.set(k, Matrix::Zero(v.rows(), v.cols()));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Training.

namespace {

ElboOptions options_of(const ModelConfig& c, int mc) {
  ElboOptions o;
  o.enumeration_cap = c.enumeration_cap;
  o.mc_samples = mc;
  o.gp_kl = c.gp_kl;
  return o;
}

LongitudinalIndex index_of(const Dataset& d) {
  return d.index ? *d.index : build_longitudinal_index(d.x, d.schema);
}

Batch full_batch(const TrainedModel& m, const Dataset& d) {
  if (m.config.family == Family::longitudinal_gp) {
    const LongitudinalIndex idx = index_of(d);
    std::vector<int> all(static_cast<std::size_t>(idx.instances()));
    std::iota(all.begin(), all.end(), 0);
    return make_instance_batch(d.y, d.x, d.schema, idx, all);
  }
  std::vector<int> rows(static_cast<std::size_t>(d.rows()));
  std::iota(rows.begin(), rows.end(), 0);
  return make_row_batch(d.y, d.x, rows);
}

void check_schema(const TrainedModel& m, const CovariateSchema& s, const char* what) {
  if (!(s.columns() == m.state.schema.columns())) throw SchemaMismatch(std::string(what) + " schema differs from the model's");
}

}  // namespace

ElboBreakdown dataset_elbo(const TrainedModel& model, const Dataset& data, int mc_samples, std::uint64_t seed) {
  check_schema(model, data.schema, "evaluation data");
  Rng rng = Rng::stream(seed, "eval/elbo");
  return elbo_step(model.state, full_batch(model, data), options_of(model.config, mc_samples), rng);
}

TrainedModel train(const ModelConfig& model_config, const Dataset& train_set, const Dataset& validation_set,
                   const TrainConfig& train_config, const TrainedModel* resume, const StepCallback& on_step) {
  train_config.validate();
  if (train_set.rows() < 1) throw DataError("training set is empty");
  TrainedModel m = resume ? *resume : initialise_model(model_config, train_set, train_config.seed);
  if (resume) {
    model_config.validate(train_set.schema);
    if (to_json(model_config) != to_json(resume->config))
      throw ConfigError("resumed archive was trained with a different model configuration");
  }
  check_schema(m, train_set.schema, "training");
  m.config = model_config;
  m.train = train_config;
  if (train_config.max_epochs == 0) return m;

  const bool longitudinal = model_config.family == Family::longitudinal_gp;
  const Dataset& val = validation_set.rows() > 0 ? validation_set : train_set;
  check_schema(m, val.schema, "validation");
  const LongitudinalIndex full_index = longitudinal ? index_of(train_set) : LongitudinalIndex{};
  const int units = longitudinal ? full_index.instances() : static_cast<int>(train_set.rows());
  const int batch = std::min(units, train_config.batch_size > 0 ? train_config.batch_size
                                                                : (longitudinal ? kDefaultInstanceBatch : kDefaultRowBatch));
  const ElboOptions opts = options_of(model_config, model_config.mc_samples);
  const auto t0 = std::chrono::steady_clock::now();

  auto validate_at = [&](int epoch) {
    return dataset_elbo(m, val, train_config.validation_mc_samples, mix_seed(train_config.seed, "validation/" + std::to_string(epoch))).total;
  };
  if (m.epochs.empty()) {
    m.best_validation = validate_at(0);
    m.best_epoch = 0;
    m.epochs.push_back({0, m.best_validation});
  }
  ParameterSet best = m.state.params;
  const int first_epoch = m.epochs_run + 1;
  const int last_epoch = m.epochs_run + train_config.max_epochs;
  m.early_stopped = false;

  for (int epoch = first_epoch; epoch <= last_epoch; ++epoch) {
    Rng rng = Rng::stream(train_config.seed, "training/" + std::to_string(epoch));
    std::vector<int> order(static_cast<std::size_t>(units));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (int start = 0; start < units; start += batch) {
      std::vector<int> chosen(order.begin() + start, order.begin() + std::min(units, start + batch));
      Batch b;
      if (longitudinal) {
        std::sort(chosen.begin(), chosen.end());
        b = make_instance_batch(train_set.y, train_set.x, train_set.schema, full_index, chosen);
      } else {
        b = make_row_batch(train_set.y, train_set.x, chosen);
      }
      const long step = m.optimiser.steps + 1;
      ad::Tape tape;
      Binding params(tape, m.state.params, true);
      const ElboGraph g = elbo_graph(m.state, params, b, opts, rng);
      const ElboBreakdown v = g.values();
      if (!std::isfinite(v.total)) throw NonFiniteLoss(step);
      tape.backward(g.total);
      const ParameterSet grads = params.gradients();
      for (const auto& [k, gk] : grads.items())
        if (!gk.allFinite()) throw NonFiniteLoss(step);

      m.optimiser.steps = step;
      const double c1 = 1.0 - std::pow(train_config.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(train_config.beta2, static_cast<double>(step));
      for (auto& [k, p] : m.state.params.items()) {
        const Matrix& gk = grads.at(k);
        Matrix& m1 = m.optimiser.first.at(k);
        Matrix& m2 = m.optimiser.second.at(k);
        m1 = train_config.beta1 * m1 + (1.0 - train_config.beta1) * gk;
        m2 = train_config.beta2 * m2 + (1.0 - train_config.beta2) * gk.cwiseAbs2();
        p.array() += train_config.step_size * (m1.array() / c1) / ((m2.array() / c2).sqrt() + train_config.epsilon);
      }
      HistoryRecord rec{step, epoch, v.reconstruction, v.latent_kl, v.covariate_kl, v.total,
                        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
      m.history.push_back(rec);
      if (on_step) on_step(rec);
    }
    m.epochs_run = epoch;
    const double score = validate_at(epoch);
    if (!std::isfinite(score)) throw NonFiniteLoss(m.optimiser.steps);
    m.epochs.push_back({epoch, score});
    if (score > m.best_validation) {
      m.best_validation = score;
      m.best_epoch = epoch;
      best = m.state.params;
    } else if (epoch - m.best_epoch >= train_config.patience) {
      m.early_stopped = true;
      break;
    }
  }
  m.state.params = best;
  return m;
}

// ---------------------------------------------------------------------------
// Prediction.

std::pair<Matrix, Matrix> latent_predictive(const TrainedModel& model, const Matrix& x) {
  const int latent = model.state.latent_dims();
  const Index n = x.rows();
  if (!is_gp(model.config.family)) return {Matrix::Zero(n, latent), Matrix::Ones(n, latent)};
  const KernelSpec& spec = model.state.kernel;
  ad::Tape t;
  Binding b(t, model.state.params, false);
  Var xv = t.constant(x);
  const bool inducing = has_inducing(model.config, spec);
  InducingVars iv;
  if (inducing) iv = bind_inducing(b, latent, model.state.inducing_fixed, model.state.schema, model.state.train_inducing);
  std::vector<int> shared = spec.shared_components();
  std::vector<int> own;
  if (model.config.family == Family::longitudinal_gp) {
    own.push_back(spec.instance_component);
  } else {
    shared.resize(static_cast<std::size_t>(spec.size()));
    std::iota(shared.begin(), shared.end(), 0);
  }
  Matrix mean(n, latent), var(n, latent);
  for (int l = 0; l < latent; ++l) {
    Var v = t.constant(Matrix::Ones(n, 1)) * ad_kernel::noise(spec, l, b);
    if (!own.empty()) v = v + ad_kernel::gram_diag(spec, l, b, xv, own);
    if (inducing) {
      Var lss = ad::cholesky(ad_kernel::cross(spec, l, b, iv.s, iv.s, shared));
      Var ksx = ad_kernel::cross(spec, l, b, iv.s, xv, shared);
      Var a = ad::solve_lower(lss, ad::solve_lower(lss, ksx), true);  // K_SS^-1 K_SX
      Var mu = transpose(a) * iv.m[static_cast<std::size_t>(l)];
      Var explained = transpose(col_sum(cwise_mul(ksx, a)));
      Var h = transpose(col_sum(square(transpose(iv.h_factor[static_cast<std::size_t>(l)]) * a)));
      v = v + ad_kernel::gram_diag(spec, l, b, xv, shared) - explained + h;
      mean.col(l) = mu.value().col(0);
    } else {
      mean.col(l).setZero();
    }
    var.col(l) = v.value().col(0).cwiseMax(1e-12);
  }
  return {mean, var};
}

namespace {

int argmax_lowest(const Eigen::Ref<const RowVector>& p) {
  int best = 0;
  for (Index k = 1; k < p.size(); ++k)
    if (p(k) > p(best)) best = static_cast<int>(k);
  return best;
}

int sample_category(const Eigen::Ref<const RowVector>& p, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (Index k = 0; k < p.size(); ++k) {
    acc += p(k);
    if (u < acc) return static_cast<int>(k);
  }
  return static_cast<int>(p.size() - 1);
}

double log_sum_exp(const std::vector<double>& v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double a : v) mx = std::max(mx, a);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double a : v) s += std::exp(a - mx);
  return mx + std::log(s);
}

}  // namespace

Prediction predict_y(const TrainedModel& model, const CovariateTable& x_star, const MaskedTable& y_star,
                     std::uint64_t seed, int draws) {
  const ModelState& st = model.state;
  const CovariateSchema& schema = st.schema;
  if (x_star.cols() != schema.size()) throw SchemaMismatch("covariate table does not match the model schema");
  if (y_star.cols() != st.data_dims()) throw SchemaMismatch("observation table does not match the model");
  if (y_star.rows() != x_star.rows()) throw DimensionMismatch("X and Y row counts differ");
  if (draws < 1) throw ConfigError("predictive draw count must be >= 1");
  const Index n = x_star.rows();
  const int qn = schema.size();
  Rng rng = Rng::stream(seed, "predict");

  // Missing covariates follow q(x^u | x^o); a posterior that also reads Y
  // would see the targets, so those models use the prior instead.
  CovariatePosterior post;
  if (model.config.networks.condition_x_posterior_on_y || !st.networks.has_covariate_network()) {
    post.mean = Matrix::Zero(n, qn);
    post.variance = Matrix::Ones(n, qn);
    post.probs.resize(static_cast<std::size_t>(qn));
    for (int q = 0; q < qn; ++q) {
      const auto& c = st.prior.columns[static_cast<std::size_t>(q)];
      if (schema.column(q).kind == ColumnKind::continuous) {
        post.mean.col(q).setConstant(c.mean);
        post.variance.col(q).setConstant(c.variance);
      } else {
        post.probs[static_cast<std::size_t>(q)] = c.probs.transpose().replicate(n, 1);
      }
    }
  } else {
    post = st.networks.encode_missing(st.params, fill_and_mask(x_star, st.networks.layout()), Matrix(), x_star.observed);
  }

  // Expanded rows: per row, categorical branches x draws.
  std::vector<int> row_of;
  std::vector<double> log_w;
  std::vector<int> branch_of;
  std::vector<RowVector> xs;
  std::vector<int> branches_per_row(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    std::vector<int> cat, cont;
    double joint = 1.0;
    for (int q = 0; q < qn; ++q) {
      if (x_star.observed(i, q)) continue;
      if (schema.column(q).role == ColumnRole::instance) throw DataError("instance id missing at row " + std::to_string(i));
      if (schema.column(q).kind == ColumnKind::categorical) {
        cat.push_back(q);
        joint *= schema.column(q).cardinality;
      } else {
        cont.push_back(q);
      }
    }
    const bool enumerate = joint <= model.config.enumeration_cap;
    const int nb = enumerate ? static_cast<int>(joint) : 1;
    branches_per_row[static_cast<std::size_t>(i)] = nb;
    std::vector<int> digit(cat.size(), 0);
    for (int b = 0; b < nb; ++b) {
      double lw = 0.0;
      if (enumerate)
        for (std::size_t k = 0; k < cat.size(); ++k)
          lw += std::log(post.probs[static_cast<std::size_t>(cat[k])](i, digit[k]));
      for (int s = 0; s < draws; ++s) {
        RowVector xi = x_star.values.row(i);
        for (std::size_t k = 0; k < cat.size(); ++k)
          xi(cat[k]) = enumerate ? digit[k] : sample_category(post.probs[static_cast<std::size_t>(cat[k])].row(i), rng);
        for (int q : cont) xi(q) = post.mean(i, q) + std::sqrt(post.variance(i, q)) * rng.normal();
        xs.push_back(xi);
        row_of.push_back(static_cast<int>(i));
        branch_of.push_back(b);
        log_w.push_back(lw);
      }
      for (std::size_t k = digit.size(); k-- > 0;) {
        if (++digit[k] < schema.column(cat[k]).cardinality) break;
        digit[k] = 0;
      }
    }
  }
  const auto e = static_cast<Index>(xs.size());
  Matrix x_all(e, qn);
  for (Index k = 0; k < e; ++k) x_all.row(k) = xs[static_cast<std::size_t>(k)];

  auto [zm, zv] = latent_predictive(model, x_all);
  const Matrix z = zm + (zv.array().sqrt() * rng.normal_matrix(e, st.latent_dims()).array()).matrix();
  std::optional<Matrix> x_enc;
  if (model.config.family == Family::cvae) x_enc = encode_instantiated(x_all, st.networks.layout());
  const DecoderOutput dec = st.networks.decode(st.params, z, x_enc);
  const RowVector dvar = dec.log_variance.array().exp();
  const double log2pi = std::log(2.0 * std::numbers::pi);

  Prediction out;
  out.mean = Matrix::Zero(n, st.data_dims());
  Matrix second = Matrix::Zero(n, st.data_dims());
  out.latent_mean = Matrix::Zero(n, st.latent_dims());
  Matrix latent_second = Matrix::Zero(n, st.latent_dims());
  out.nll = Vector::Zero(n);
  // per (row, branch): log-mean-exp over draws
  Index k = 0;
  for (Index i = 0; i < n; ++i) {
    const int nb = branches_per_row[static_cast<std::size_t>(i)];
    std::vector<double> branch_terms;
    for (int b = 0; b < nb; ++b) {
      std::vector<double> lls;
      const double w = std::exp(log_w[static_cast<std::size_t>(k)]);
      for (int s = 0; s < draws; ++s, ++k) {
        double ll = 0.0;
        for (Index d = 0; d < st.data_dims(); ++d) {
          if (!y_star.observed(i, d)) continue;
          const double r = y_star.values(i, d) - dec.mean(k, d);
          ll += -0.5 * (log2pi + dec.log_variance(d) + r * r / dvar(d));
        }
        lls.push_back(ll);
        out.mean.row(i) += w / draws * dec.mean.row(k);
        second.row(i) += w / draws * (dec.mean.row(k).array().square() + dvar.array()).matrix();
        out.latent_mean.row(i) += w / draws * zm.row(k);
        latent_second.row(i) += w / draws * (zm.row(k).array().square() + zv.row(k).array()).matrix();
      }
      branch_terms.push_back(log_w[static_cast<std::size_t>(k - 1)] + log_sum_exp(lls) - std::log(draws));
    }
    out.nll(i) = y_star.observed.row(i).any() ? -log_sum_exp(branch_terms) : 0.0;
  }
  out.variance = (second.array() - out.mean.array().square()).cwiseMax(0.0);
  out.latent_variance = (latent_second.array() - out.latent_mean.array().square()).cwiseMax(0.0);
  out.mean_nll = n > 0 ? out.nll.mean() : 0.0;
  if (!std::isfinite(out.mean_nll)) throw NonFiniteOutput("predictive NLL is not finite");
  return out;
}

Imputation impute_covariates(const TrainedModel& model, const CovariateTable& x_partial,
                             const std::optional<MaskedTable>& y_partial) {
  const ModelState& st = model.state;
  if (x_partial.cols() != st.schema.size()) throw SchemaMismatch("covariate table does not match the model schema");
  const Index n = x_partial.rows();
  Matrix y_in;
  if (model.config.networks.condition_x_posterior_on_y) {
    if (y_partial) {
      if (y_partial->cols() != st.data_dims() || y_partial->rows() != n)
        throw SchemaMismatch("observation table does not match the model");
      y_in = fill_and_mask(*y_partial);
    } else {
      y_in = Matrix::Zero(n, 2 * st.data_dims());
    }
  }
  Imputation out;
  out.posterior = st.networks.encode_missing(st.params, fill_and_mask(x_partial, st.networks.layout()), y_in,
                                             x_partial.observed);
  out.filled = x_partial;
  for (Index i = 0; i < n; ++i)
    for (int q = 0; q < st.schema.size(); ++q) {
      if (x_partial.observed(i, q)) continue;
      const auto& c = st.schema.column(q);
      if (c.role == ColumnRole::instance) throw DataError("instance id missing at row " + std::to_string(i));
      out.filled.values(i, q) = c.kind == ColumnKind::continuous
                                    ? out.posterior.mean(i, q)
                                    : argmax_lowest(out.posterior.probs[static_cast<std::size_t>(q)].row(i));
      out.filled.observed(i, q) = true;
    }
  return out;
}

Metrics evaluate(const TrainedModel& model, const Dataset& test, std::uint64_t seed, int draws) {
  check_schema(model, test.schema, "test");
  Metrics m;
  m.draws = draws;
  const Prediction p = predict_y(model, test.x, test.y, seed, draws);
  m.nll = p.mean_nll;
  m.rows = test.rows();
  if (test.truth_x.empty()) {
    m.notices.push_back("no covariate ground truth: imputation metrics omitted");
    return m;
  }
  const Imputation imp = impute_covariates(model, test.x, test.y);
  const ImputationScores s = score_imputation(imp.filled, test);
  m.mse = s.mse;
  m.accuracy = s.accuracy;
  m.mse_count = s.continuous_count;
  m.accuracy_count = s.categorical_count;
  if (!s.mse) m.notices.push_back("no masked continuous covariates: mse omitted");
  if (!s.accuracy) m.notices.push_back("no masked categorical covariates: accuracy omitted");
  return m;
}

// ---------------------------------------------------------------------------
// Serialisation.

void reject_unknown_keys(const json& j, const std::vector<std::string>& allowed, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + " must be an object");
  for (const auto& [k, v] : j.items())
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) throw ConfigError("unknown key " + path + "." + k);
}

namespace {

template <class T>
T get_or(const json& j, const std::string& key, T fallback, const std::string& path) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(path + "." + key + " has the wrong type");
  }
}

json mlp_json(const MlpConfig& c) {
  return {{"hidden", c.hidden}, {"activation", c.activation == Activation::relu ? "relu" : "tanh"}};
}

MlpConfig mlp_from(const json& j, const std::string& path) {
  reject_unknown_keys(j, {"hidden", "activation"}, path);
  MlpConfig c;
  c.hidden = get_or(j, "hidden", c.hidden, path);
  const auto act = get_or<std::string>(j, "activation", "relu", path);
  if (act == "relu") {
    c.activation = Activation::relu;
  } else if (act == "tanh") {
    c.activation = Activation::tanh;
  } else {
    throw ConfigError(path + ".activation must be relu or tanh");
  }
  return c;
}

json matrix_json(const Matrix& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index k = 0; k < m.cols(); ++k) data.push_back(m(i, k));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

Matrix matrix_from(const json& j) {
  const Index r = j.at("rows").get<Index>(), c = j.at("cols").get<Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Index>(data.size()) != r * c) throw DataError("archived matrix has the wrong size");
  Matrix m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index k = 0; k < c; ++k) m(i, k) = data[static_cast<std::size_t>(i * c + k)];
  return m;
}

json params_json(const ParameterSet& p) {
  json j = json::object();
  for (const auto& [k, v] : p.items()) j[k] = matrix_json(v);
  return j;
}

ParameterSet params_from(const json& j) {
  ParameterSet p;
  for (const auto& [k, v] : j.items()) p.set(k, matrix_from(v));
  return p;
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

json to_json(const ModelConfig& c) {
  json kernel = json::array();
  for (const auto& k : c.kernel) kernel.push_back({{"continuous", k.continuous}, {"categorical", k.categorical}});
  return {{"family", to_string(c.family)},
          {"latent_dims", c.latent_dims},
          {"kernel", kernel},
          {"instance_component", c.instance_component},
          {"networks",
           {{"encoder", mlp_json(c.networks.encoder)},
            {"covariate", mlp_json(c.networks.covariate)},
            {"decoder", mlp_json(c.networks.decoder)},
            {"condition_x_posterior_on_y", c.networks.condition_x_posterior_on_y}}},
          {"inducing_points", c.inducing_points},
          {"train_inducing", c.train_inducing},
          {"enumeration_cap", c.enumeration_cap},
          {"mc_samples", c.mc_samples},
          {"gp_kl", c.gp_kl == GpKl::bound ? "bound" : "exact"}};
}

ModelConfig model_config_from_json(const json& j, const std::string& path) {
  reject_unknown_keys(j, {"family", "latent_dims", "kernel", "instance_component", "networks", "inducing_points",
                          "train_inducing", "enumeration_cap", "mc_samples", "gp_kl"},
                      path);
  ModelConfig c;
  c.family = family_from_string(get_or<std::string>(j, "family", "cvae", path));
  c.latent_dims = get_or(j, "latent_dims", c.latent_dims, path);
  c.instance_component = get_or(j, "instance_component", c.instance_component, path);
  if (j.contains("kernel")) {
    if (!j.at("kernel").is_array()) throw ConfigError(path + ".kernel must be an array");
    int r = 0;
    for (const auto& k : j.at("kernel")) {
      const std::string kp = path + ".kernel[" + std::to_string(r++) + "]";
      reject_unknown_keys(k, {"continuous", "categorical"}, kp);
      KernelComponent comp;
      comp.continuous = get_or(k, "continuous", std::vector<std::string>{}, kp);
      comp.categorical = get_or(k, "categorical", std::vector<std::string>{}, kp);
      c.kernel.push_back(comp);
    }
  }
  if (j.contains("networks")) {
    const json& n = j.at("networks");
    const std::string np = path + ".networks";
    reject_unknown_keys(n, {"encoder", "covariate", "decoder", "condition_x_posterior_on_y"}, np);
    if (n.contains("encoder")) c.networks.encoder = mlp_from(n.at("encoder"), np + ".encoder");
    if (n.contains("covariate")) c.networks.covariate = mlp_from(n.at("covariate"), np + ".covariate");
    if (n.contains("decoder")) c.networks.decoder = mlp_from(n.at("decoder"), np + ".decoder");
    c.networks.condition_x_posterior_on_y = get_or(n, "condition_x_posterior_on_y", false, np);
  }
  c.networks.decoder_reads_x = c.family == Family::cvae;
  c.inducing_points = get_or(j, "inducing_points", c.inducing_points, path);
  c.train_inducing = get_or(j, "train_inducing", c.train_inducing, path);
  c.enumeration_cap = get_or(j, "enumeration_cap", c.enumeration_cap, path);
  c.mc_samples = get_or(j, "mc_samples", c.mc_samples, path);
  const auto kl = get_or<std::string>(j, "gp_kl", "bound", path);
  if (kl == "bound") {
    c.gp_kl = GpKl::bound;
  } else if (kl == "exact") {
    c.gp_kl = GpKl::exact;
  } else {
    throw ConfigError(path + ".gp_kl must be bound or exact");
  }
  return c;
}

json to_json(const TrainConfig& c) {
  return {{"step_size", c.step_size},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"validation_mc_samples", c.validation_mc_samples},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j, const std::string& path) {
  reject_unknown_keys(j, {"step_size", "beta1", "beta2", "epsilon", "batch_size", "max_epochs", "patience",
                          "validation_mc_samples", "seed"},
                      path);
  TrainConfig c;
  c.step_size = get_or(j, "step_size", c.step_size, path);
  c.beta1 = get_or(j, "beta1", c.beta1, path);
  c.beta2 = get_or(j, "beta2", c.beta2, path);
  c.epsilon = get_or(j, "epsilon", c.epsilon, path);
  c.batch_size = get_or(j, "batch_size", c.batch_size, path);
  c.max_epochs = get_or(j, "max_epochs", c.max_epochs, path);
  c.patience = get_or(j, "patience", c.patience, path);
  c.validation_mc_samples = get_or(j, "validation_mc_samples", c.validation_mc_samples, path);
  c.seed = get_or(j, "seed", c.seed, path);
  return c;
}

json to_json(const CovariateSchema& s) {
  json cols = json::array();
  for (const auto& c : s.columns()) {
    const char* role = c.role == ColumnRole::time ? "time" : c.role == ColumnRole::instance ? "instance" : "covariate";
    cols.push_back({{"name", c.name},
                    {"kind", c.kind == ColumnKind::continuous ? "continuous" : "categorical"},
                    {"cardinality", c.cardinality},
                    {"levels", c.levels},
                    {"role", role}});
  }
  return cols;
}

CovariateSchema schema_from_json(const json& j) {
  std::vector<CovariateColumn> cols;
  for (const auto& c : j) {
    CovariateColumn col;
    col.name = c.at("name").get<std::string>();
    col.kind = c.at("kind").get<std::string>() == "continuous" ? ColumnKind::continuous : ColumnKind::categorical;
    col.cardinality = c.at("cardinality").get<int>();
    col.levels = c.at("levels").get<std::vector<std::string>>();
    const auto role = c.at("role").get<std::string>();
    col.role = role == "time" ? ColumnRole::time : role == "instance" ? ColumnRole::instance : ColumnRole::covariate;
    cols.push_back(std::move(col));
  }
  return CovariateSchema(cols);
}

json to_json(const TrainedModel& m) {
  json prior = json::array();
  for (const auto& c : m.state.prior.columns) {
    std::vector<double> probs(c.probs.data(), c.probs.data() + c.probs.size());
    prior.push_back({{"mean", c.mean}, {"variance", c.variance}, {"probs", probs}});
  }
  json history = json::array();
  for (const auto& h : m.history)
    history.push_back({h.step, h.epoch, h.reconstruction, h.latent_kl, h.covariate_kl, h.total});
  json epochs = json::array();
  for (const auto& e : m.epochs) epochs.push_back({e.epoch, finite_or_null(e.validation_elbo)});
  json j{{"format", kModelFormat},
         {"config", to_json(m.config)},
         {"train", to_json(m.train)},
         {"schema", to_json(m.state.schema)},
         {"data_dims", m.state.data_dims()},
         {"prior", prior},
         {"params", params_json(m.state.params)},
         {"optimiser",
          {{"steps", m.optimiser.steps}, {"first", params_json(m.optimiser.first)}, {"second", params_json(m.optimiser.second)}}},
         {"history", history},
         {"epochs", epochs},
         {"best_epoch", m.best_epoch},
         {"best_validation", finite_or_null(m.best_validation)},
         {"epochs_run", m.epochs_run},
         {"early_stopped", m.early_stopped}};
  if (m.state.inducing_fixed.size() > 0) j["inducing_fixed"] = matrix_json(m.state.inducing_fixed);
  return j;
}

TrainedModel model_from_json(const json& j) {
  try {
    if (!j.contains("format") || j.at("format") != kModelFormat)
      throw DataError(std::string("archive format tag is not ") + kModelFormat);
    TrainedModel m;
    m.config = model_config_from_json(j.at("config"));
    m.train = train_config_from_json(j.at("train"));
    const CovariateSchema schema = schema_from_json(j.at("schema"));
    m.state = build_state(m.config, schema, j.at("data_dims").get<int>());
    for (const auto& c : j.at("prior")) {
      ColumnPrior p;
      p.mean = c.at("mean").get<double>();
      p.variance = c.at("variance").get<double>();
      const auto probs = c.at("probs").get<std::vector<double>>();
      p.probs = Eigen::Map<const Vector>(probs.data(), static_cast<Index>(probs.size()));
      m.state.prior.columns.push_back(p);
    }
    m.state.params = params_from(j.at("params"));
    if (j.contains("inducing_fixed")) m.state.inducing_fixed = matrix_from(j.at("inducing_fixed"));
    if (is_gp(m.config.family)) {
      for (auto& [k, v] : m.state.kernel.theta.items())
        if (m.state.params.contains(k)) v = m.state.params.at(k);
    }
    const json& opt = j.at("optimiser");
    m.optimiser.steps = opt.at("steps").get<long>();
    m.optimiser.first = params_from(opt.at("first"));
    m.optimiser.second = params_from(opt.at("second"));
    for (const auto& h : j.at("history"))
      m.history.push_back({h[0].get<long>(), h[1].get<int>(), h[2].get<double>(), h[3].get<double>(),
                           h[4].get<double>(), h[5].get<double>(), 0.0});
    for (const auto& e : j.at("epochs"))
      m.epochs.push_back({e[0].get<int>(), e[1].is_null() ? -std::numeric_limits<double>::infinity() : e[1].get<double>()});
    m.best_epoch = j.at("best_epoch").get<int>();
    m.best_validation = j.at("best_validation").is_null() ? -std::numeric_limits<double>::infinity()
                                                          : j.at("best_validation").get<double>();
    m.epochs_run = j.at("epochs_run").get<int>();
    m.early_stopped = j.at("early_stopped").get<bool>();
    return m;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed model archive: ") + e.what());
  }
}

void save_model(const TrainedModel& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json(m).dump() << "\n";
}

TrainedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open model archive " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("model archive " + path.string() + " is not valid JSON: " + e.what());
  }
  return model_from_json(j);
}

void write_history_csv(const std::vector<HistoryRecord>& history, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "step,epoch,reconstruction,latent_kl,covariate_kl,total\n";
  for (const auto& h : history)
    out << h.step << "," << h.epoch << "," << format_double(h.reconstruction) << "," << format_double(h.latent_kl) << ","
        << format_double(h.covariate_kl) << "," << format_double(h.total) << "\n";
}

}  // namespace mcvae
