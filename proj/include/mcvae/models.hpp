#pragma once

// Model assembly, training with early stopping, prediction, imputation,
// evaluation and the saved-model archive.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcvae/data.hpp"
#include "mcvae/elbo.hpp"

namespace mcvae {

struct ModelConfig {
  Family family = Family::cvae;
  int latent_dims = 2;
  // GP families. Empty means the family default (see default_kernel).
  std::vector<KernelComponent> kernel;
  int instance_component = -1;
  NetworkConfig networks;
  int inducing_points = 16;
  bool train_inducing = true;
  int enumeration_cap = kDefaultEnumerationCap;
  int mc_samples = 1;
  GpKl gp_kl = GpKl::bound;

  // Family prerequisites against a schema; throws ConfigError.
  void validate(const CovariateSchema& schema) const;
};

// Regression: one SE over all continuous covariates plus one indicator per
// categorical covariate. Temporal: SE over time. Longitudinal: SE(time) x
// instance indicator (instance-specific) plus a shared SE(time).
std::vector<KernelComponent> default_kernel(Family family, const CovariateSchema& schema, int* instance_component);

struct TrainConfig {
  double step_size = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 0;  // rows, or instances for the longitudinal family; 0 = 64 / 8
  int max_epochs = 500;
  int patience = 10;
  int validation_mc_samples = 50;
  std::uint64_t seed = 0;

  void validate() const;
};

struct HistoryRecord {
  long step = 0;
  int epoch = 0;
  double reconstruction = 0.0;
  double latent_kl = 0.0;
  double covariate_kl = 0.0;
  double total = 0.0;
  double wall_seconds = 0.0;  // callback only; kept out of files so reruns are byte-identical
};

struct EpochRecord {
  int epoch = 0;
  double validation_elbo = 0.0;
};

struct AdamState {
  ParameterSet first;
  ParameterSet second;
  long steps = 0;
};

struct TrainedModel {
  ModelConfig config;
  TrainConfig train;
  ModelState state;
  AdamState optimiser;
  std::vector<HistoryRecord> history;
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;  // 0 = initialisation
  double best_validation = 0.0;
  int epochs_run = 0;
  bool early_stopped = false;
};

// Builds networks, kernel, prior, inducing state and initial parameters.
TrainedModel initialise_model(const ModelConfig& config, const Dataset& train, std::uint64_t seed);

// Called after every step with the new record; may be null.
using StepCallback = std::function<void(const HistoryRecord&)>;

// Starts from `resume` when given (its configs are replaced by the arguments);
// otherwise from initialise_model(model_config, train, train_config.seed).
TrainedModel train(const ModelConfig& model_config, const Dataset& train_set, const Dataset& validation_set,
                   const TrainConfig& train_config, const TrainedModel* resume = nullptr,
                   const StepCallback& on_step = nullptr);

// Full-data ELBO with `mc_samples` draws (instance batches for longitudinal).
ElboBreakdown dataset_elbo(const TrainedModel& model, const Dataset& data, int mc_samples, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Prediction and imputation.

inline constexpr int kPredictiveDraws = 50;

struct Prediction {
  Matrix mean;      // N x D predictive mean
  Matrix variance;  // N x D predictive variance
  Vector nll;       // per row, summed over observed Y entries
  double mean_nll = 0.0;
  Matrix latent_mean;      // N x L, moments of the mixture over imputed X
  Matrix latent_variance;  // N x L
};

// Latent predictive N(mean, var) of every row of a fully instantiated X.
std::pair<Matrix, Matrix> latent_predictive(const TrainedModel& model, const Matrix& x);

Prediction predict_y(const TrainedModel& model, const CovariateTable& x_star, const MaskedTable& y_star,
                     std::uint64_t seed, int draws = kPredictiveDraws);

struct Imputation {
  CovariateTable filled;
  CovariatePosterior posterior;
};

Imputation impute_covariates(const TrainedModel& model, const CovariateTable& x_partial,
                             const std::optional<MaskedTable>& y_partial = std::nullopt);

struct Metrics {
  double nll = 0.0;
  Index rows = 0;
  int draws = kPredictiveDraws;
  std::optional<double> mse;
  std::optional<double> accuracy;
  std::size_t mse_count = 0;
  std::size_t accuracy_count = 0;
  std::vector<std::string> notices;
};

// NLL of the observed test Y under predict_y; imputation metrics over the
// artificially masked covariates, omitted with a notice when no truth exists.
Metrics evaluate(const TrainedModel& model, const Dataset& test, std::uint64_t seed, int draws = kPredictiveDraws);

// ---------------------------------------------------------------------------
// Serialisation.

inline constexpr const char* kModelFormat = "mcvae-model/1";

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path = "model");
nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path = "train");
nlohmann::json to_json(const CovariateSchema& s);
CovariateSchema schema_from_json(const nlohmann::json& j);

nlohmann::json to_json(const TrainedModel& m);
TrainedModel model_from_json(const nlohmann::json& j);
void save_model(const TrainedModel& m, const std::filesystem::path& path);
TrainedModel load_model(const std::filesystem::path& path);

void write_history_csv(const std::vector<HistoryRecord>& history, const std::filesystem::path& path);

// Throws ConfigError naming the first key of `j` outside `allowed`.
void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& allowed, const std::string& path);

}  // namespace mcvae
