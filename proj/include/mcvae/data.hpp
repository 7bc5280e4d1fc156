#pragma once

// Datasets, the rotated-digits generator, MCAR masking, CSV + manifest I/O,
// splits and the baseline imputers.

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mcvae/distributions.hpp"
#include "mcvae/kernels.hpp"
#include "mcvae/random.hpp"

namespace mcvae {

// Held-out value of an entry that was observed before masking.
struct TruthEntry {
  int row = 0;
  int column = 0;
  double value = 0.0;

  bool operator==(const TruthEntry&) const = default;
};

struct Dataset {
  MaskedTable y;
  CovariateTable x;
  CovariateSchema schema;
  std::vector<std::string> y_names;
  std::vector<TruthEntry> truth_y;
  std::vector<TruthEntry> truth_x;
  std::optional<LongitudinalIndex> index;

  Index rows() const { return y.rows(); }
  // Row counts, widths and truth positions; throws DataError.
  void validate() const;
  // Truth entries follow their rows.
  Dataset select_rows(const std::vector<int>& rows) const;
  bool has_truth() const { return !truth_x.empty() || !truth_y.empty(); }
};

// ---------------------------------------------------------------------------
// Rotated digits.

enum class DigitsVariant { dataset1, dataset2, dataset3 };

std::string to_string(DigitsVariant v);
DigitsVariant digits_variant_from_string(const std::string& s);

struct GaussianParams {
  double mean = 0.0;
  double sd = 1.0;
};

struct RotatedDigitsConfig {
  DigitsVariant variant = DigitsVariant::dataset1;
  int side = 12;
  int n_train = 1000;
  int n_validation = 200;
  int n_test = 200;
  double t_min = 0.0;
  double t_max = 1.0;
  std::uint64_t seed = 0;
  int digit = 3;
  std::string glyph_path;  // optional PGM (P2/P5) replacing the procedural glyph

  // rotation in radians, shift in pixels along the diagonal, contrast factor
  GaussianParams rotation{0.4, 0.5};
  GaussianParams shift{0.5, 1.0};
  GaussianParams contrast{1.0, 0.25};
  double pixel_noise_sd = 0.05;
  double nonlinear_noise_fraction = 0.15;  // dataset2/3, of each map's range

  void validate() const;
};

struct GeneratedDigits {
  Dataset train;
  Dataset validation;
  Dataset test;
  // sampled-distribution parameters, in a fixed order
  std::vector<std::pair<std::string, double>> metadata;
};

// side x side intensities in [0, 1], row-major.
Matrix procedural_glyph(int digit, int side);
Matrix load_glyph(const std::filesystem::path& path, int side);
// Inverse-mapped bilinear rotation about the centre, shift (dx = dy), then contrast.
Matrix render_digit(const Matrix& glyph, double rotation, double shift, double contrast);

GeneratedDigits generate_rotated_digits(const RotatedDigitsConfig& config);

// ---------------------------------------------------------------------------
// Missingness.

// Entries are masked independently; newly masked entries move to the truth
// tables. Each row keeps at least one observed Y and one observed X entry
// when it had one. The instance-id column is never masked.
Dataset inject_mcar(const Dataset& data, double rate_x, double rate_y, std::uint64_t seed);

// ---------------------------------------------------------------------------
// CSV + manifest.

enum class Normalisation { none, minmax_train };

struct MinMax {
  RowVector min;
  RowVector max;
};

struct Manifest {
  struct Column {
    std::string name;
    std::string role;  // observation | continuous | categorical | time | instance
    std::vector<std::string> levels;
  };
  std::vector<Column> columns;
  Normalisation normalisation = Normalisation::none;
  std::optional<MinMax> ranges;  // training-split statistics when known

  static Manifest read(const std::filesystem::path& path);
  void write(const std::filesystem::path& path) const;
};

Manifest manifest_for(const Dataset& data);

struct LoadedDataset {
  Dataset data;
  std::optional<MinMax> ranges;  // statistics applied, if any
};

// `stats` overrides the manifest ranges; without either, min-max statistics
// come from this file.
LoadedDataset load_longitudinal_csv(const std::filesystem::path& data_path, const std::filesystem::path& manifest_path,
                                    const std::optional<MinMax>& stats = std::nullopt);
void write_csv(const Dataset& data, const std::filesystem::path& data_path);
void write_truth(const Dataset& data, const std::filesystem::path& path);
// Restores truth tables written by write_truth.
void read_truth(Dataset& data, const std::filesystem::path& path);

// Shortest round-trip text for a double.
std::string format_double(double v);

// ---------------------------------------------------------------------------
// Splits.

struct Split {
  Dataset train;
  Dataset validation;
  Dataset test;
};

// Largest-remainder rounding of counts; rows keep their relative order.
Split split(const Dataset& data, const std::array<double, 3>& fractions, bool by_instance, std::uint64_t seed);
std::array<int, 3> largest_remainder(int total, const std::array<double, 3>& fractions);

// ---------------------------------------------------------------------------
// Baseline imputers. Outputs are fully observed tables.

struct ImputeStats {
  std::vector<double> mean;     // per column; continuous only
  std::vector<double> sd;       // per column; continuous only, 1 when undefined
  std::vector<int> mode;        // per column; categorical only
};

ImputeStats fit_impute_stats(const CovariateTable& train, const CovariateSchema& schema);
CovariateTable mean_impute(const CovariateTable& x, const CovariateSchema& schema, const ImputeStats& stats);
CovariateTable zero_impute(const CovariateTable& x, const CovariateSchema& schema);
inline constexpr int kDefaultKnn = 5;
CovariateTable knn_impute(const CovariateTable& x, const CovariateTable& train, const CovariateSchema& schema, int k,
                          const ImputeStats& stats);
// Writes truth values back into the table (the oracle condition).
CovariateTable restore_truth(const CovariateTable& x, const std::vector<TruthEntry>& truth);

struct ImputationScores {
  std::optional<double> mse;       // over masked continuous entries
  std::optional<double> accuracy;  // over masked categorical entries
  std::size_t continuous_count = 0;
  std::size_t categorical_count = 0;
};

// Compares a filled table against the covariate truth entries.
ImputationScores score_imputation(const CovariateTable& filled, const Dataset& truth_source);

}  // namespace mcvae
