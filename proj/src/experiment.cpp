#include "mcvae/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace mcvae {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kArchiveName = "model.json";
constexpr const char* kHistoryName = "history.csv";
constexpr std::array<const char*, 3> kSplitNames{"train", "validation", "test"};

template <class T>
T read_key(const json& j, const std::string& key, T fallback, const std::string& path) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(path + "." + key + " has the wrong type");
  }
}

const json& section(const json& j, const std::string& key) {
  static const json empty = json::object();
  return j.contains(key) ? j.at(key) : empty;
}

void write_json(const json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw DataError("cannot write " + path.string());
}

std::ofstream open_text(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

GaussianParams gaussian_from(const json& j, GaussianParams fallback, const std::string& path) {
  reject_unknown_keys(j, {"mean", "sd"}, path);
  fallback.mean = read_key(j, "mean", fallback.mean, path);
  fallback.sd = read_key(j, "sd", fallback.sd, path);
  return fallback;
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string rate_label(double rate) { return format_double(rate); }

}  // namespace

std::string to_string(CovariateMode m) {
  switch (m) {
    case CovariateMode::model: return "model";
    case CovariateMode::oracle: return "oracle";
    case CovariateMode::mean: return "mean";
    case CovariateMode::knn: return "knn";
    case CovariateMode::zero: return "zero";
  }
  return "model";
}

CovariateMode covariate_mode_from_string(const std::string& s) {
  for (CovariateMode m : {CovariateMode::model, CovariateMode::oracle, CovariateMode::mean, CovariateMode::knn,
                          CovariateMode::zero})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown covariate mode '" + s + "' (model, oracle, mean, knn, zero)");
}

// ---------------------------------------------------------------------------
// Documents.

json to_json(const RotatedDigitsConfig& c) {
  auto g = [](const GaussianParams& p) { return json{{"mean", p.mean}, {"sd", p.sd}}; };
  return {{"variant", to_string(c.variant)},
          {"side", c.side},
          {"n_train", c.n_train},
          {"n_validation", c.n_validation},
          {"n_test", c.n_test},
          {"t_min", c.t_min},
          {"t_max", c.t_max},
          {"digit", c.digit},
          {"glyph_path", c.glyph_path},
          {"rotation", g(c.rotation)},
          {"shift", g(c.shift)},
          {"contrast", g(c.contrast)},
          {"pixel_noise_sd", c.pixel_noise_sd},
          {"nonlinear_noise_fraction", c.nonlinear_noise_fraction}};
}

RotatedDigitsConfig generator_from_json(const json& j, const std::string& path) {
  reject_unknown_keys(j, {"variant", "side", "n_train", "n_validation", "n_test", "t_min", "t_max", "digit",
                          "glyph_path", "rotation", "shift", "contrast", "pixel_noise_sd", "nonlinear_noise_fraction"},
                      path);
  RotatedDigitsConfig c;
  try {
    c.variant = digits_variant_from_string(read_key<std::string>(j, "variant", to_string(c.variant), path));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ".variant: " + e.what());
  }
  c.side = read_key(j, "side", c.side, path);
  c.n_train = read_key(j, "n_train", c.n_train, path);
  c.n_validation = read_key(j, "n_validation", c.n_validation, path);
  c.n_test = read_key(j, "n_test", c.n_test, path);
  c.t_min = read_key(j, "t_min", c.t_min, path);
  c.t_max = read_key(j, "t_max", c.t_max, path);
  c.digit = read_key(j, "digit", c.digit, path);
  c.glyph_path = read_key(j, "glyph_path", c.glyph_path, path);
  if (j.contains("rotation")) c.rotation = gaussian_from(j.at("rotation"), c.rotation, path + ".rotation");
  if (j.contains("shift")) c.shift = gaussian_from(j.at("shift"), c.shift, path + ".shift");
  if (j.contains("contrast")) c.contrast = gaussian_from(j.at("contrast"), c.contrast, path + ".contrast");
  c.pixel_noise_sd = read_key(j, "pixel_noise_sd", c.pixel_noise_sd, path);
  c.nonlinear_noise_fraction = read_key(j, "nonlinear_noise_fraction", c.nonlinear_noise_fraction, path);
  if (!c.glyph_path.empty() && !fs::exists(c.glyph_path))
    throw ConfigError(path + ".glyph_path: " + c.glyph_path + " does not exist");
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return c;
}

ExperimentConfig parse_experiment(const json& j, std::optional<std::uint64_t> seed, const std::optional<std::string>& out) {
  reject_unknown_keys(j, {"seed", "data", "model", "train", "eval", "output", "suite"}, "config");
  ExperimentConfig c;
  c.seed = seed ? *seed : read_key<std::uint64_t>(j, "seed", 0, "config");

  const json& data = section(j, "data");
  reject_unknown_keys(data, {"generator", "missing_x", "missing_y", "dir"}, "data");
  c.data.generator = generator_from_json(section(data, "generator"), "data.generator");
  c.data.generator.seed = c.seed;
  c.data.missing_x = read_key(data, "missing_x", c.data.missing_x, "data");
  c.data.missing_y = read_key(data, "missing_y", c.data.missing_y, "data");
  if (!(c.data.missing_x >= 0 && c.data.missing_x < 1)) throw ConfigError("data.missing_x must lie in [0, 1)");
  if (!(c.data.missing_y >= 0 && c.data.missing_y < 1)) throw ConfigError("data.missing_y must lie in [0, 1)");
  c.data.dir = read_key(data, "dir", c.data.dir, "data");

  c.model = model_config_from_json(section(j, "model"), "model");
  const json& train = section(j, "train");
  if (train.is_object() && train.contains("seed")) throw ConfigError("train.seed: use the top-level seed");
  c.train = train_config_from_json(train, "train");
  c.train.seed = c.seed;
  try {
    c.train.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }

  const json& eval = section(j, "eval");
  reject_unknown_keys(eval, {"mode", "split", "draws", "knn_k"}, "eval");
  try {
    c.eval.mode = covariate_mode_from_string(read_key<std::string>(eval, "mode", "model", "eval"));
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("eval.mode: ") + e.what());
  }
  c.eval.split = read_key(eval, "split", c.eval.split, "eval");
  if (std::find(kSplitNames.begin(), kSplitNames.end(), c.eval.split) == kSplitNames.end())
    throw ConfigError("eval.split must be train, validation or test");
  c.eval.draws = read_key(eval, "draws", c.eval.draws, "eval");
  if (c.eval.draws < 1) throw ConfigError("eval.draws must be >= 1");
  c.eval.knn_k = read_key(eval, "knn_k", c.eval.knn_k, "eval");
  if (c.eval.knn_k < 1) throw ConfigError("eval.knn_k must be >= 1");

  const json& output = section(j, "output");
  reject_unknown_keys(output, {"dir"}, "output");
  c.output.dir = out ? *out : read_key(output, "dir", c.output.dir, "output");
  if (c.output.dir.empty()) throw ConfigError("output.dir must not be empty");

  const json& suite = section(j, "suite");
  reject_unknown_keys(suite, {"rates", "methods", "seeds", "enforce_ordering"}, "suite");
  c.suite.rates = read_key(suite, "rates", c.suite.rates, "suite");
  for (double r : c.suite.rates)
    if (!(r >= 0 && r < 1)) throw ConfigError("suite.rates entries must lie in [0, 1)");
  if (suite.contains("methods")) {
    c.suite.methods.clear();
    for (const auto& m : read_key<std::vector<std::string>>(suite, "methods", {}, "suite")) {
      try {
        c.suite.methods.push_back(covariate_mode_from_string(m));
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("suite.methods: ") + e.what());
      }
    }
  }
  c.suite.seeds = read_key(suite, "seeds", c.suite.seeds, "suite");
  if (c.suite.seeds < 1) throw ConfigError("suite.seeds must be >= 1");
  if (c.suite.rates.empty() || c.suite.methods.empty()) throw ConfigError("suite grid must not be empty");
  c.suite.enforce_ordering = read_key(suite, "enforce_ordering", c.suite.enforce_ordering, "suite");
  return c;
}

ExperimentConfig load_experiment(const fs::path& path, std::optional<std::uint64_t> seed, const std::optional<std::string>& out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config file " + path.string() + " cannot be opened");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_experiment(j, seed, out);
}

json to_json(const ExperimentConfig& c) {
  json train = to_json(c.train);
  train.erase("seed");
  std::vector<std::string> methods;
  for (CovariateMode m : c.suite.methods) methods.push_back(to_string(m));
  return {{"seed", c.seed},
          {"data",
           {{"generator", to_json(c.data.generator)},
            {"missing_x", c.data.missing_x},
            {"missing_y", c.data.missing_y},
            {"dir", c.data.dir}}},
          {"model", to_json(c.model)},
          {"train", train},
          {"eval", {{"mode", to_string(c.eval.mode)}, {"split", c.eval.split}, {"draws", c.eval.draws}, {"knn_k", c.eval.knn_k}}},
          {"output", {{"dir", c.output.dir}}},
          {"suite",
           {{"rates", c.suite.rates},
            {"methods", methods},
            {"seeds", c.suite.seeds},
            {"enforce_ordering", c.suite.enforce_ordering}}}};
}

// ---------------------------------------------------------------------------
// Data.

Splits generate_splits(const RotatedDigitsConfig& generator, double missing_x, double missing_y, std::uint64_t seed,
                       std::vector<std::pair<std::string, double>>* metadata) {
  RotatedDigitsConfig g = generator;
  g.seed = seed;
  GeneratedDigits d = generate_rotated_digits(g);
  if (metadata) *metadata = d.metadata;
  Splits s;
  s.train = inject_mcar(d.train, missing_x, missing_y, mix_seed(seed, "mcar/train"));
  s.validation = inject_mcar(d.validation, missing_x, missing_y, mix_seed(seed, "mcar/validation"));
  s.test = inject_mcar(d.test, missing_x, missing_y, mix_seed(seed, "mcar/test"));
  return s;
}

void write_splits(const Splits& s, const fs::path& dir) {
  fs::create_directories(dir);
  const std::array<const Dataset*, 3> parts{&s.train, &s.validation, &s.test};
  for (std::size_t k = 0; k < parts.size(); ++k) {
    write_csv(*parts[k], dir / (std::string(kSplitNames[k]) + ".csv"));
    write_truth(*parts[k], dir / (std::string(kSplitNames[k]) + "_truth.csv"));
  }
  manifest_for(s.train).write(dir / "manifest.json");
}

Splits read_splits(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.json";
  for (const char* name : kSplitNames)
    if (!fs::exists(dir / (std::string(name) + ".csv")))
      throw ConfigError("data.dir: " + (dir / (std::string(name) + ".csv")).string() + " does not exist");
  if (!fs::exists(manifest)) throw ConfigError("data.dir: " + manifest.string() + " does not exist");
  Splits s;
  LoadedDataset train = load_longitudinal_csv(dir / "train.csv", manifest);
  s.train = std::move(train.data);
  s.validation = load_longitudinal_csv(dir / "validation.csv", manifest, train.ranges).data;
  s.test = load_longitudinal_csv(dir / "test.csv", manifest, train.ranges).data;
  const std::array<Dataset*, 3> parts{&s.train, &s.validation, &s.test};
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const fs::path truth = dir / (std::string(kSplitNames[k]) + "_truth.csv");
    if (fs::exists(truth)) read_truth(*parts[k], truth);
  }
  return s;
}

Dataset route_covariates(const Dataset& data, CovariateMode mode, const Dataset& reference, int knn_k) {
  Dataset out = data;
  switch (mode) {
    case CovariateMode::model: break;
    case CovariateMode::oracle: out.x = restore_truth(data.x, data.truth_x); break;
    case CovariateMode::mean: out.x = mean_impute(data.x, data.schema, fit_impute_stats(reference.x, reference.schema)); break;
    case CovariateMode::knn:
      out.x = knn_impute(data.x, reference.x, data.schema, knn_k, fit_impute_stats(reference.x, reference.schema));
      break;
    case CovariateMode::zero: out.x = zero_impute(data.x, data.schema); break;
  }
  if (mode != CovariateMode::model) out.truth_x.clear();
  return out;
}

Metrics evaluate_mode(const TrainedModel& model, const Dataset& data, CovariateMode mode, const Dataset& reference,
                      int knn_k, std::uint64_t seed, int draws) {
  if (mode == CovariateMode::model) return evaluate(model, data, seed, draws);
  const Dataset routed = route_covariates(data, mode, reference, knn_k);
  Metrics m = evaluate(model, routed, seed, draws);
  m.notices.clear();
  if (data.truth_x.empty()) {
    m.notices.push_back("no covariate ground truth: imputation metrics omitted");
    return m;
  }
  const ImputationScores s = score_imputation(routed.x, data);
  m.mse = s.mse;
  m.accuracy = s.accuracy;
  m.mse_count = s.continuous_count;
  m.accuracy_count = s.categorical_count;
  if (!s.mse) m.notices.push_back("no masked continuous covariates: mse omitted");
  if (!s.accuracy) m.notices.push_back("no masked categorical covariates: accuracy omitted");
  return m;
}

// ---------------------------------------------------------------------------
// Commands.

namespace {

const Dataset& pick(const Splits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "validation") return s.validation;
  return s.test;
}

TrainedModel load_archive(const ExperimentConfig& config) {
  const fs::path archive = config.output_dir() / kArchiveName;
  if (!fs::exists(archive)) throw ConfigError("output.dir: no trained archive at " + archive.string());
  return load_model(archive);
}

json metrics_json(const Metrics& m) {
  return {{"nll", m.nll},
          {"nll_rows", m.rows},
          {"mse", optional_number(m.mse)},
          {"mse_count", m.mse_count},
          {"accuracy", optional_number(m.accuracy)},
          {"accuracy_count", m.accuracy_count}};
}

json estimator_json(int draws, const std::string& normalisation) {
  return {{"nll",
           "per-row negative log predictive density of the observed Y entries, log-mean-exp over joint draws of "
           "missing covariates and z, averaged over rows"},
          {"draws", draws},
          {"normalisation", normalisation},
          {"mse", "mean squared error over masked continuous covariate entries"},
          {"accuracy", "fraction of masked categorical covariate entries recovered by the posterior mode"}};
}

std::string normalisation_of(const ExperimentConfig& config) {
  const fs::path manifest = config.data_dir() / "manifest.json";
  if (!fs::exists(manifest)) return "none";
  return Manifest::read(manifest).normalisation == Normalisation::minmax_train ? "minmax-train" : "none";
}

}  // namespace

void cmd_generate(const ExperimentConfig& config) {
  std::vector<std::pair<std::string, double>> meta;
  const Splits s = generate_splits(config.data.generator, config.data.missing_x, config.data.missing_y, config.seed, &meta);
  write_splits(s, config.output_dir());
  json sampled = json::object();
  for (const auto& [k, v] : meta) sampled[k] = v;
  write_json({{"config", to_json(config)},
              {"rows", {{"train", s.train.rows()}, {"validation", s.validation.rows()}, {"test", s.test.rows()}}},
              {"missing", {{"x", s.train.x.missing_count()}, {"y", s.train.y.missing_count()}}},
              {"sampled_parameters", sampled}},
             config.output_dir() / "metadata.json");
}

TrainedModel cmd_train(const ExperimentConfig& config, const std::optional<fs::path>& resume) {
  const Splits s = read_splits(config.data_dir());
  const Dataset train_set = route_covariates(s.train, config.eval.mode, s.train, config.eval.knn_k);
  const Dataset validation = route_covariates(s.validation, config.eval.mode, s.train, config.eval.knn_k);
  std::optional<TrainedModel> previous;
  if (resume) {
    if (!fs::exists(*resume)) throw ConfigError("--resume: " + resume->string() + " does not exist");
    previous = load_model(*resume);
  }
  std::vector<HistoryRecord> log = previous ? previous->history : std::vector<HistoryRecord>{};
  const fs::path history = config.output_dir() / kHistoryName;
  try {
    TrainedModel m = train(config.model, train_set, validation, config.train, previous ? &*previous : nullptr,
                           [&](const HistoryRecord& r) { log.push_back(r); });
    json archive = to_json(m);
    archive["experiment"] = to_json(config);
    write_json(archive, config.output_dir() / kArchiveName);
    write_history_csv(log, history);
    return m;
  } catch (const NumericalError&) {
    write_history_csv(log, history);
    throw;
  }
}

json cmd_evaluate(const ExperimentConfig& config) {
  const TrainedModel model = load_archive(config);
  const Splits s = read_splits(config.data_dir());
  const Metrics m = evaluate_mode(model, pick(s, config.eval.split), config.eval.mode, s.train, config.eval.knn_k,
                                  mix_seed(config.seed, "eval"), config.eval.draws);
  json doc{{"config", to_json(config)},
           {"seed", config.seed},
           {"mode", to_string(config.eval.mode)},
           {"split", config.eval.split},
           {"metrics", metrics_json(m)},
           {"estimator", estimator_json(m.draws, normalisation_of(config))},
           {"notices", m.notices}};
  write_json(doc, config.output_dir() / "metrics.json");
  auto csv = open_text(config.output_dir() / "metrics.csv");
  csv << "seed,mode,split,metric,value,count\n";
  const std::string prefix = std::to_string(config.seed) + "," + to_string(config.eval.mode) + "," + config.eval.split + ",";
  csv << prefix << "nll," << format_double(m.nll) << "," << m.rows << "\n";
  if (m.mse) csv << prefix << "mse," << format_double(*m.mse) << "," << m.mse_count << "\n";
  if (m.accuracy) csv << prefix << "accuracy," << format_double(*m.accuracy) << "," << m.accuracy_count << "\n";
  return doc;
}

void cmd_impute(const ExperimentConfig& config) {
  const TrainedModel model = load_archive(config);
  const Splits s = read_splits(config.data_dir());
  const Dataset& d = pick(s, config.eval.split);
  if (!(d.schema.columns() == model.state.schema.columns()))
    throw SchemaMismatch("covariate columns of " + config.eval.split + " differ from the archive schema");
  const Imputation imp = impute_covariates(model, d.x, d.y);
  Dataset filled = d;
  filled.x = imp.filled;
  filled.truth_x.clear();
  write_csv(filled, config.output_dir() / "imputed.csv");

  auto side = open_text(config.output_dir() / "imputed_distributions.csv");
  side << "row,column,kind,mean,variance,probabilities\n";
  std::size_t entries = 0;
  for (Index i = 0; i < d.x.rows(); ++i)
    for (int q = 0; q < d.schema.size(); ++q) {
      if (d.x.observed(i, q)) continue;
      const auto& c = d.schema.column(q);
      side << i << "," << c.name << ",";
      if (c.kind == ColumnKind::continuous) {
        side << "continuous," << format_double(imp.posterior.mean(i, q)) << ","
             << format_double(imp.posterior.variance(i, q)) << ",\n";
      } else {
        side << "categorical,,,";
        const auto& p = imp.posterior.probs[static_cast<std::size_t>(q)];
        for (Index k = 0; k < p.cols(); ++k) side << (k ? ";" : "") << format_double(p(i, k));
        side << "\n";
      }
      ++entries;
    }
  write_json({{"config", to_json(config)}, {"split", config.eval.split}, {"imputed_entries", entries}},
             config.output_dir() / "imputed.json");
}

CellResult run_cell(const ExperimentConfig& config, CovariateMode method, double rate, std::uint64_t seed) {
  CellResult r{method, rate, seed, std::nullopt, {}};
  const Splits s = generate_splits(config.data.generator, rate, rate, seed);
  const int k = config.eval.knn_k;
  const Dataset tr = route_covariates(s.train, method, s.train, k);
  const Dataset va = route_covariates(s.validation, method, s.train, k);
  TrainConfig t = config.train;
  t.seed = seed;
  const TrainedModel m = train(config.model, tr, va, t);
  r.metrics = evaluate_mode(m, s.test, method, s.train, k, mix_seed(seed, "eval"), config.eval.draws);
  return r;
}

bool SuiteResult::any_failed() const {
  return std::any_of(cells.begin(), cells.end(), [](const CellResult& c) { return !c.metrics; });
}

int SuiteResult::failure_code() const {
  int code = 0;
  for (const auto& c : cells) code = std::max(code, c.failure);
  return code;
}

std::vector<std::pair<std::string, int>> count_orderings(const std::vector<CellResult>& cells, double rate) {
  std::map<std::uint64_t, std::map<CovariateMode, const Metrics*>> by_seed;
  for (const auto& c : cells)
    if (c.rate == rate && c.metrics) by_seed[c.seed][c.method] = &*c.metrics;
  int lt_mean = 0, lt_zero = 0, oracle = 0, mse = 0;
  for (const auto& [seed, m] : by_seed) {
    auto get = [&](CovariateMode k) { return m.count(k) ? m.at(k) : nullptr; };
    const Metrics* ours = get(CovariateMode::model);
    if (!ours) continue;
    if (const Metrics* b = get(CovariateMode::mean)) {
      lt_mean += ours->nll < b->nll;
      mse += ours->mse && b->mse && *ours->mse < *b->mse;
    }
    if (const Metrics* b = get(CovariateMode::zero)) lt_zero += ours->nll < b->nll;
    if (const Metrics* b = get(CovariateMode::oracle)) oracle += b->nll <= ours->nll;
  }
  return {{"nll_model_lt_mean", lt_mean}, {"nll_model_lt_zero", lt_zero}, {"nll_oracle_le_model", oracle},
          {"mse_model_lt_mean", mse}};
}

SuiteResult cmd_suite(const ExperimentConfig& config, int jobs) {
  if (jobs < 1) throw ConfigError("--jobs must be >= 1");
  struct Job {
    CovariateMode method;
    double rate;
    std::uint64_t seed;
  };
  std::vector<Job> grid;
  for (CovariateMode method : config.suite.methods)
    for (double rate : config.suite.rates)
      for (int k = 0; k < config.suite.seeds; ++k) grid.push_back({method, rate, config.seed + static_cast<std::uint64_t>(k)});

  SuiteResult result;
  result.cells.resize(grid.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < grid.size(); i = next++) {
      const Job& g = grid[i];
      CellResult& cell = result.cells[i];
      try {
        cell = run_cell(config, g.method, g.rate, g.seed);
      } catch (const ConfigError& e) {
        cell = CellResult{g.method, g.rate, g.seed, std::nullopt, e.what(), 2};
      } catch (const DataError& e) {
        cell = CellResult{g.method, g.rate, g.seed, std::nullopt, e.what(), 3};
      } catch (const NumericalError& e) {
        cell = CellResult{g.method, g.rate, g.seed, std::nullopt, e.what(), 4};
      } catch (const EnumerationOverflow& e) {
        cell = CellResult{g.method, g.rate, g.seed, std::nullopt, e.what(), 4};
      } catch (const std::exception& e) {
        cell = CellResult{g.method, g.rate, g.seed, std::nullopt, e.what(), 1};
      }
      const fs::path dir = config.output_dir() / "cells" /
                           (to_string(g.method) + "_" + rate_label(g.rate) + "_" + std::to_string(g.seed));
      json doc{{"method", to_string(g.method)}, {"rate", g.rate}, {"seed", g.seed}};
      doc["metrics"] = cell.metrics ? metrics_json(*cell.metrics) : json(nullptr);
      if (!cell.metrics) doc["error"] = cell.error;
      write_json(doc, dir / "metrics.json");
      std::lock_guard lock(log_mutex);
      std::fprintf(stderr, "[%zu/%zu] %s rate=%s seed=%llu %s\n", i + 1, grid.size(), to_string(g.method).c_str(),
                   rate_label(g.rate).c_str(), static_cast<unsigned long long>(g.seed),
                   cell.metrics ? ("nll=" + format_double(cell.metrics->nll)).c_str() : ("failed: " + cell.error).c_str());
    }
  };
  std::vector<std::thread> pool;
  for (int k = 1; k < std::min<int>(jobs, static_cast<int>(grid.size())); ++k) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  auto cells_csv = open_text(config.output_dir() / "suite_cells.csv");
  cells_csv << "method,rate,seed,nll,mse,accuracy,error\n";
  for (const auto& c : result.cells) {
    cells_csv << to_string(c.method) << "," << rate_label(c.rate) << "," << c.seed << ",";
    if (c.metrics) {
      cells_csv << format_double(c.metrics->nll) << "," << (c.metrics->mse ? format_double(*c.metrics->mse) : "") << ","
                << (c.metrics->accuracy ? format_double(*c.metrics->accuracy) : "") << ",\n";
    } else {
      std::string msg = c.error;
      std::replace(msg.begin(), msg.end(), '"', '\'');
      cells_csv << ",,,\"" << msg << "\"\n";
    }
  }

  auto moments = [](const std::vector<double>& v) -> std::pair<double, double> {
    if (v.empty()) return {std::nan(""), std::nan("")};
    double mean = 0.0;
    for (double a : v) mean += a;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double a : v) ss += (a - mean) * (a - mean);
    return {mean, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
  };
  auto cell_text = [](double v) { return std::isfinite(v) ? format_double(v) : std::string(); };
  auto table = open_text(config.output_dir() / "suite_table.csv");
  table << "method,rate,nll_mean,nll_sd,mse_mean,mse_sd,accuracy_mean,accuracy_sd,seeds_ok,seeds_failed\n";
  json rows = json::array();
  for (CovariateMode method : config.suite.methods)
    for (double rate : config.suite.rates) {
      std::vector<double> nll, mse, acc;
      int failed = 0;
      for (const auto& c : result.cells) {
        if (c.method != method || c.rate != rate) continue;
        if (!c.metrics) {
          ++failed;
          continue;
        }
        nll.push_back(c.metrics->nll);
        if (c.metrics->mse) mse.push_back(*c.metrics->mse);
        if (c.metrics->accuracy) acc.push_back(*c.metrics->accuracy);
      }
      const auto [nm, ns] = moments(nll);
      const auto [mm, ms] = moments(mse);
      const auto [am, as] = moments(acc);
      table << to_string(method) << "," << rate_label(rate) << "," << cell_text(nm) << "," << cell_text(ns) << ","
            << cell_text(mm) << "," << cell_text(ms) << "," << cell_text(am) << "," << cell_text(as) << "," << nll.size()
            << "," << failed << "\n";
      rows.push_back({{"method", to_string(method)},
                      {"rate", rate},
                      {"nll_mean", std::isfinite(nm) ? json(nm) : json(nullptr)},
                      {"nll_sd", std::isfinite(ns) ? json(ns) : json(nullptr)},
                      {"seeds_ok", nll.size()},
                      {"seeds_failed", failed}});
    }

  json orderings = json::object();
  const int needed = static_cast<int>(std::ceil(0.8 * config.suite.seeds));
  for (double rate : config.suite.rates) {
    json per = json::object();
    for (const auto& [name, count] : count_orderings(result.cells, rate)) {
      per[name] = count;
      if (config.suite.enforce_ordering && count < needed)
        result.ordering_failures.push_back(name + " at rate " + rate_label(rate) + ": " + std::to_string(count) + "/" +
                                           std::to_string(config.suite.seeds));
    }
    orderings[rate_label(rate)] = per;
  }
  write_json({{"config", to_json(config)},
              {"table", rows},
              {"orderings", orderings},
              {"ordering_threshold", needed},
              {"ordering_failures", result.ordering_failures},
              {"failed_cells", std::count_if(result.cells.begin(), result.cells.end(), [](const CellResult& c) { return !c.metrics; })}},
             config.output_dir() / "suite.json");
  return result;
}

}  // namespace mcvae
