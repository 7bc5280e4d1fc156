#pragma once

// Experiment documents and the command drivers behind the mcvae binary.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcvae/models.hpp"

namespace mcvae {

// How test (and, in the suite, training) covariates reach the model.
enum class CovariateMode { model, oracle, mean, knn, zero };

std::string to_string(CovariateMode m);
CovariateMode covariate_mode_from_string(const std::string& s);

struct DataSection {
  RotatedDigitsConfig generator;
  double missing_x = 0.2;
  double missing_y = 0.2;
  // Directory holding {train,validation,test}.csv, manifest.json and the
  // truth files. Empty = the output directory.
  std::string dir;
};

struct EvalSection {
  CovariateMode mode = CovariateMode::model;
  std::string split = "test";
  int draws = kPredictiveDraws;
  int knn_k = kDefaultKnn;
};

struct OutputSection {
  std::string dir = "out";
};

struct SuiteSection {
  std::vector<double> rates{0.05, 0.1, 0.2, 0.3, 0.4};
  std::vector<CovariateMode> methods{CovariateMode::model, CovariateMode::mean, CovariateMode::knn,
                                     CovariateMode::zero, CovariateMode::oracle};
  int seeds = 5;  // seed, seed + 1, ...
  bool enforce_ordering = false;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DataSection data;
  ModelConfig model;
  TrainConfig train;
  EvalSection eval;
  OutputSection output;
  SuiteSection suite;

  std::filesystem::path output_dir() const { return output.dir; }
  std::filesystem::path data_dir() const { return data.dir.empty() ? output_dir() : std::filesystem::path(data.dir); }
};

// Parses and validates; unknown keys and bad values throw ConfigError naming
// the key path. `seed` and `out` override the document.
ExperimentConfig parse_experiment(const nlohmann::json& j, std::optional<std::uint64_t> seed = std::nullopt,
                                  const std::optional<std::string>& out = std::nullopt);
ExperimentConfig load_experiment(const std::filesystem::path& path, std::optional<std::uint64_t> seed = std::nullopt,
                                 const std::optional<std::string>& out = std::nullopt);
// Resolved document, defaults included.
nlohmann::json to_json(const ExperimentConfig& c);

nlohmann::json to_json(const RotatedDigitsConfig& c);
RotatedDigitsConfig generator_from_json(const nlohmann::json& j, const std::string& path);

// ---------------------------------------------------------------------------
// Data.

struct Splits {
  Dataset train;
  Dataset validation;
  Dataset test;
};

// Generated splits with MCAR masks at the given rates (truth retained).
Splits generate_splits(const RotatedDigitsConfig& generator, double missing_x, double missing_y, std::uint64_t seed,
                       std::vector<std::pair<std::string, double>>* metadata = nullptr);
void write_splits(const Splits& s, const std::filesystem::path& dir);
Splits read_splits(const std::filesystem::path& dir);

// Replaces missing covariates per `mode` (statistics from `reference`). The
// covariate truth is dropped from routed copies.
Dataset route_covariates(const Dataset& data, CovariateMode mode, const Dataset& reference, int knn_k);

// evaluate() on the routed data, with imputation scores of the routed
// covariates against the truth of `data`.
Metrics evaluate_mode(const TrainedModel& model, const Dataset& data, CovariateMode mode, const Dataset& reference,
                      int knn_k, std::uint64_t seed, int draws);

// ---------------------------------------------------------------------------
// Commands. Each writes into config.output_dir() and embeds the resolved
// config in its JSON documents.

void cmd_generate(const ExperimentConfig& config);
// On a numerical failure the history so far is written before rethrowing.
TrainedModel cmd_train(const ExperimentConfig& config, const std::optional<std::filesystem::path>& resume = std::nullopt);
nlohmann::json cmd_evaluate(const ExperimentConfig& config);
void cmd_impute(const ExperimentConfig& config);

struct CellResult {
  CovariateMode method = CovariateMode::model;
  double rate = 0.0;
  std::uint64_t seed = 0;
  std::optional<Metrics> metrics;  // absent when the cell failed
  std::string error;
  // 2 config, 3 data, 4 numerical, 1 anything else; 0 when it ran
  int failure = 0;
};

// One grid cell: generate, mask, route, train, evaluate.
CellResult run_cell(const ExperimentConfig& config, CovariateMode method, double rate, std::uint64_t seed);

struct SuiteResult {
  std::vector<CellResult> cells;
  std::vector<std::string> ordering_failures;
  bool any_failed() const;
  // Most specific failure code among the cells (0 if none).
  int failure_code() const;
};

SuiteResult cmd_suite(const ExperimentConfig& config, int jobs);

// Per-seed checks of the suite orderings at one rate; returns the number of
// seeds satisfying each named ordering.
std::vector<std::pair<std::string, int>> count_orderings(const std::vector<CellResult>& cells, double rate);

}  // namespace mcvae
