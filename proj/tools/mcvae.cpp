#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "mcvae/experiment.hpp"

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumerical = 4 };

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> resume;
  int jobs = 1;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "experiment config (JSON)")->required();
  cmd->add_option("--seed", f.seed, "overrides the config seed");
  cmd->add_option("--out", f.out, "output directory (overrides output.dir)");
}

int run(const std::string& command, const Flags& f) {
  using namespace mcvae;
  const ExperimentConfig config = load_experiment(f.config, f.seed, f.out);
  if (command == "generate") {
    cmd_generate(config);
    std::printf("wrote splits to %s\n", config.output_dir().string().c_str());
  } else if (command == "train") {
    std::optional<std::filesystem::path> resume;
    if (f.resume) resume = *f.resume;
    const TrainedModel m = cmd_train(config, resume);
    std::printf("epochs %d, best epoch %d, validation ELBO %s%s\n", m.epochs_run, m.best_epoch,
                format_double(m.best_validation).c_str(), m.early_stopped ? " (early stop)" : "");
  } else if (command == "evaluate") {
    const auto doc = cmd_evaluate(config);
    std::printf("%s\n", doc.at("metrics").dump().c_str());
    for (const auto& n : doc.at("notices")) std::fprintf(stderr, "notice: %s\n", n.get<std::string>().c_str());
  } else if (command == "impute") {
    cmd_impute(config);
    std::printf("wrote %s\n", (config.output_dir() / "imputed.csv").string().c_str());
  } else if (command == "suite") {
    const SuiteResult r = cmd_suite(config, f.jobs);
    for (const auto& msg : r.ordering_failures) std::fprintf(stderr, "ordering not met: %s\n", msg.c_str());
    if (r.any_failed()) return r.failure_code();
    if (!r.ordering_failures.empty()) return kFailure;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional and GP-prior VAEs with missing covariates"};
  app.require_subcommand(1);
  Flags f;
  auto* generate = app.add_subcommand("generate", "write rotated-digit splits, manifest and truth files");
  auto* train = app.add_subcommand("train", "train a model and write the archive and history");
  auto* evaluate = app.add_subcommand("evaluate", "score an archive on a split");
  auto* impute = app.add_subcommand("impute", "fill missing covariates with the posterior");
  auto* suite = app.add_subcommand("suite", "run the missing-rate x method grid");
  for (auto* cmd : {generate, train, evaluate, impute, suite}) add_common(cmd, f);
  train->add_option("--resume", f.resume, "continue training from an archive");
  suite->add_option("--jobs", f.jobs, "parallel grid cells")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, f);
  } catch (const mcvae::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const mcvae::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const mcvae::NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kNumerical;
  } catch (const mcvae::EnumerationOverflow& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
}
