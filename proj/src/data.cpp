#include "mcvae/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace mcvae {

using nlohmann::json;

void Dataset::validate() const {
  if (y.values.rows() != y.observed.rows() || y.values.cols() != y.observed.cols())
    throw DimensionMismatch("Y values and mask differ in shape");
  if (x.values.rows() != x.observed.rows() || x.values.cols() != x.observed.cols())
    throw DimensionMismatch("X values and mask differ in shape");
  if (y.rows() != x.rows()) throw DimensionMismatch("Y and X row counts differ");
  if (x.cols() != schema.size()) throw SchemaMismatch("X width differs from schema");
  if (!y_names.empty() && static_cast<Index>(y_names.size()) != y.cols())
    throw DimensionMismatch("observation names do not match Y width");
  auto check = [](const std::vector<TruthEntry>& truth, const MaskedTable& t, const char* what) {
    for (const auto& e : truth) {
      if (e.row < 0 || e.row >= t.rows() || e.column < 0 || e.column >= t.cols())
        throw DataError(std::string(what) + " truth entry out of range");
      if (t.observed(e.row, e.column)) throw DataError(std::string(what) + " truth entry sits on an observed position");
    }
  };
  check(truth_y, y, "Y");
  check(truth_x, x, "X");
}

Dataset Dataset::select_rows(const std::vector<int>& rows) const {
  Dataset out;
  out.y = y.select_rows(rows);
  out.x = x.select_rows(rows);
  out.schema = schema;
  out.y_names = y_names;
  std::map<int, int> new_row;
  for (std::size_t k = 0; k < rows.size(); ++k) new_row.emplace(rows[k], static_cast<int>(k));
  auto remap = [&](const std::vector<TruthEntry>& in, std::vector<TruthEntry>& target) {
    for (const auto& e : in) {
      auto it = new_row.find(e.row);
      if (it != new_row.end()) target.push_back({it->second, e.column, e.value});
    }
    std::sort(target.begin(), target.end(),
              [](const TruthEntry& a, const TruthEntry& b) { return std::tie(a.row, a.column) < std::tie(b.row, b.column); });
  };
  remap(truth_y, out.truth_y);
  remap(truth_x, out.truth_x);
  if (schema.instance_column() && out.rows() > 0) out.index = build_longitudinal_index(out.x, schema);
  return out;
}

// ---------------------------------------------------------------------------
// Rotated digits.

std::string to_string(DigitsVariant v) {
  switch (v) {
    case DigitsVariant::dataset1: return "dataset1";
    case DigitsVariant::dataset2: return "dataset2";
    case DigitsVariant::dataset3: return "dataset3";
  }
  return "dataset1";
}

DigitsVariant digits_variant_from_string(const std::string& s) {
  if (s == "dataset1") return DigitsVariant::dataset1;
  if (s == "dataset2") return DigitsVariant::dataset2;
  if (s == "dataset3") return DigitsVariant::dataset3;
  throw ConfigError("unknown digits variant '" + s + "'");
}

void RotatedDigitsConfig::validate() const {
  if (side < 8) throw ConfigError("data.side must be >= 8");
  if (n_train < 1 || n_validation < 1 || n_test < 1) throw ConfigError("data row counts must be >= 1");
  if (digit < 0 || digit > 9) throw ConfigError("data.digit must lie in 0..9");
  if (variant == DigitsVariant::dataset3 && !(t_max > t_min)) throw ConfigError("data.t_max must exceed data.t_min");
  if (rotation.sd < 0 || shift.sd < 0 || contrast.sd < 0) throw ConfigError("covariate standard deviations must be >= 0");
  if (pixel_noise_sd < 0 || nonlinear_noise_fraction < 0) throw ConfigError("noise levels must be >= 0");
}

namespace {

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (ax + t * dx), py - (ay + t * dy));
}

}  // namespace

Matrix procedural_glyph(int digit, int side) {
  if (side < 8) throw ConfigError("glyph side must be >= 8");
  if (digit < 0 || digit > 9) throw ConfigError("digit must lie in 0..9");
  // seven segments a..g: top, upper right, lower right, bottom, lower left, upper left, middle
  static const std::array<std::array<double, 4>, 7> seg{{{-0.35, -0.6, 0.35, -0.6},
                                                         {0.35, -0.6, 0.35, 0.0},
                                                         {0.35, 0.0, 0.35, 0.6},
                                                         {-0.35, 0.6, 0.35, 0.6},
                                                         {-0.35, 0.0, -0.35, 0.6},
                                                         {-0.35, -0.6, -0.35, 0.0},
                                                         {-0.35, 0.0, 0.35, 0.0}}};
  static const std::array<const char*, 10> lit{"abcdef", "bc", "abged", "abgcd", "fgbc",
                                               "afgcd", "afgedc", "abc", "abcdefg", "abfgcd"};
  const double half = side / 2.0;
  const double width = 0.13;
  const double aa = 1.0 / half;
  Matrix g = Matrix::Zero(side, side);
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      const double v = (r + 0.5 - half) / half;
      const double u = (c + 0.5 - half) / half + 0.15 * v;  // slant
      double d = 1e9;
      for (const char* s = lit[static_cast<std::size_t>(digit)]; *s; ++s) {
        const auto& e = seg[static_cast<std::size_t>(*s - 'a')];
        d = std::min(d, segment_distance(u, v, e[0], e[1], e[2], e[3]));
      }
      g(r, c) = std::clamp(1.0 - (d - width) / aa, 0.0, 1.0);
    }
  }
  return g;
}

Matrix load_glyph(const std::filesystem::path& path, int side) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open glyph file " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P2" && magic != "P5") throw ConfigError("glyph file must be a PGM (P2 or P5): " + path.string());
  auto next_int = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
      in >> std::ws;
    }
    int v = 0;
    if (!(in >> v)) throw ConfigError("malformed glyph header in " + path.string());
    return v;
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (w != side || h != side) throw ConfigError("glyph must be " + std::to_string(side) + "x" + std::to_string(side));
  if (maxval < 1 || maxval > 255) throw ConfigError("glyph maxval must lie in 1..255");
  Matrix g(side, side);
  if (magic == "P5") in.get();
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      int v = 0;
      if (magic == "P2") {
        if (!(in >> v)) throw ConfigError("truncated glyph file " + path.string());
      } else {
        const int ch = in.get();
        if (ch == EOF) throw ConfigError("truncated glyph file " + path.string());
        v = ch;
      }
      g(r, c) = static_cast<double>(v) / maxval;
    }
  return g;
}

Matrix render_digit(const Matrix& glyph, double rotation, double shift, double contrast) {
  const Index side = glyph.rows();
  const double half = static_cast<double>(side) / 2.0;
  const double cs = std::cos(rotation), sn = std::sin(rotation);
  auto at = [&](Index r, Index c) {
    return (r < 0 || c < 0 || r >= side || c >= side) ? 0.0 : glyph(r, c);
  };
  Matrix out(side, side);
  for (Index r = 0; r < side; ++r) {
    for (Index c = 0; c < side; ++c) {
      const double px = static_cast<double>(c) + 0.5 - half - shift;
      const double py = static_cast<double>(r) + 0.5 - half - shift;
      const double sc = cs * px + sn * py + half - 0.5;
      const double sr = -sn * px + cs * py + half - 0.5;
      const double fc = std::floor(sc), fr = std::floor(sr);
      const double tc = sc - fc, tr = sr - fr;
      const auto c0 = static_cast<Index>(fc), r0 = static_cast<Index>(fr);
      const double v = (1 - tr) * ((1 - tc) * at(r0, c0) + tc * at(r0, c0 + 1)) +
                       tr * ((1 - tc) * at(r0 + 1, c0) + tc * at(r0 + 1, c0 + 1));
      out(r, c) = contrast * v;
    }
  }
  return out;
}

namespace {

struct CovariateMaps {
  RotatedDigitsConfig cfg;
  std::array<double, 3> noise{};

  // dataset2: one shared latent u ~ N(0, 1)
  std::array<double, 3> latent_map(double u) const {
    return {cfg.rotation.mean + 1.5 * cfg.rotation.sd * std::tanh(u),
            cfg.shift.mean + 1.5 * cfg.shift.sd * std::sin(1.5 * u),
            cfg.contrast.mean + cfg.contrast.sd * (u * u - 1.0) / std::numbers::sqrt2};
  }
  // dataset3: s = scaled time in [0, 1]
  std::array<double, 3> time_map(double s) const {
    return {cfg.rotation.mean + 1.5 * cfg.rotation.sd * std::sin(2.0 * std::numbers::pi * s),
            cfg.shift.mean + cfg.shift.sd * (3.0 * s * s - 1.0),
            cfg.contrast.mean + 1.5 * cfg.contrast.sd * std::cos(std::numbers::pi * s)};
  }

  explicit CovariateMaps(const RotatedDigitsConfig& c) : cfg(c) {
    if (cfg.variant == DigitsVariant::dataset1) return;
    std::array<double, 3> lo{1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300};
    for (int k = 0; k <= 1000; ++k) {
      const auto v = cfg.variant == DigitsVariant::dataset2 ? latent_map(-2.5 + 5.0 * k / 1000.0) : time_map(k / 1000.0);
      for (int j = 0; j < 3; ++j) {
        lo[static_cast<std::size_t>(j)] = std::min(lo[static_cast<std::size_t>(j)], v[static_cast<std::size_t>(j)]);
        hi[static_cast<std::size_t>(j)] = std::max(hi[static_cast<std::size_t>(j)], v[static_cast<std::size_t>(j)]);
      }
    }
    for (std::size_t j = 0; j < 3; ++j) noise[j] = cfg.nonlinear_noise_fraction * (hi[j] - lo[j]);
  }
};

Dataset make_digits(const RotatedDigitsConfig& cfg, const CovariateMaps& maps, const Matrix& glyph,
                    const CovariateSchema& schema, const std::vector<std::string>& names, int n, Rng& rng) {
  const int d = cfg.side * cfg.side;
  Matrix y(n, d);
  Matrix x(n, schema.size());
  for (int i = 0; i < n; ++i) {
    std::array<double, 3> cov{};
    double t = 0.0;
    switch (cfg.variant) {
      case DigitsVariant::dataset1:
        cov[0] = cfg.rotation.mean + cfg.rotation.sd * rng.normal();
        cov[1] = cfg.shift.mean + cfg.shift.sd * rng.normal();
        cov[2] = cfg.contrast.mean + cfg.contrast.sd * rng.normal();
        break;
      case DigitsVariant::dataset2: {
        cov = maps.latent_map(rng.normal());
        for (std::size_t j = 0; j < 3; ++j) cov[j] += maps.noise[j] * rng.normal();
        break;
      }
      case DigitsVariant::dataset3: {
        t = cfg.t_min + (cfg.t_max - cfg.t_min) * rng.uniform();
        cov = maps.time_map((t - cfg.t_min) / (cfg.t_max - cfg.t_min));
        for (std::size_t j = 0; j < 3; ++j) cov[j] += maps.noise[j] * rng.normal();
        break;
      }
    }
    const Matrix img = render_digit(glyph, cov[0], cov[1], cov[2]);
    for (int k = 0; k < d; ++k) y(i, k) = img(k / cfg.side, k % cfg.side) + cfg.pixel_noise_sd * rng.normal();
    x(i, 0) = cov[0];
    x(i, 1) = cov[1];
    x(i, 2) = cov[2];
    if (cfg.variant == DigitsVariant::dataset3) x(i, 3) = t;
  }
  Dataset out;
  out.y = MaskedTable::fully_observed(std::move(y));
  out.x = MaskedTable::fully_observed(std::move(x));
  out.schema = schema;
  out.y_names = names;
  return out;
}

}  // namespace

GeneratedDigits generate_rotated_digits(const RotatedDigitsConfig& config) {
  config.validate();
  const Matrix glyph = config.glyph_path.empty() ? procedural_glyph(config.digit, config.side)
                                                 : load_glyph(config.glyph_path, config.side);
  std::vector<CovariateColumn> cols{{"rotation", ColumnKind::continuous, 0, {}, ColumnRole::covariate},
                                    {"shift", ColumnKind::continuous, 0, {}, ColumnRole::covariate},
                                    {"contrast", ColumnKind::continuous, 0, {}, ColumnRole::covariate}};
  if (config.variant == DigitsVariant::dataset3) cols.push_back({"t", ColumnKind::continuous, 0, {}, ColumnRole::time});
  const CovariateSchema schema(cols);
  std::vector<std::string> names;
  for (int r = 0; r < config.side; ++r)
    for (int c = 0; c < config.side; ++c) names.push_back("p" + std::to_string(r) + "_" + std::to_string(c));

  const CovariateMaps maps(config);
  Rng rng = Rng::stream(config.seed, "data");
  GeneratedDigits out;
  out.train = make_digits(config, maps, glyph, schema, names, config.n_train, rng);
  out.validation = make_digits(config, maps, glyph, schema, names, config.n_validation, rng);
  out.test = make_digits(config, maps, glyph, schema, names, config.n_test, rng);

  auto& m = out.metadata;
  m.emplace_back("rotation_mean", config.rotation.mean);
  m.emplace_back("rotation_sd", config.rotation.sd);
  m.emplace_back("shift_mean", config.shift.mean);
  m.emplace_back("shift_sd", config.shift.sd);
  m.emplace_back("contrast_mean", config.contrast.mean);
  m.emplace_back("contrast_sd", config.contrast.sd);
  m.emplace_back("pixel_noise_sd", config.pixel_noise_sd);
  if (config.variant != DigitsVariant::dataset1) {
    m.emplace_back("rotation_noise_sd", maps.noise[0]);
    m.emplace_back("shift_noise_sd", maps.noise[1]);
    m.emplace_back("contrast_noise_sd", maps.noise[2]);
  }
  if (config.variant == DigitsVariant::dataset3) {
    m.emplace_back("t_min", config.t_min);
    m.emplace_back("t_max", config.t_max);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Missingness.

Dataset inject_mcar(const Dataset& data, double rate_x, double rate_y, std::uint64_t seed) {
  if (!(rate_x >= 0.0 && rate_x < 1.0)) throw RateError("covariate missing rate must lie in [0, 1)");
  if (!(rate_y >= 0.0 && rate_y < 1.0)) throw RateError("observation missing rate must lie in [0, 1)");
  data.validate();
  Dataset out = data;
  Rng rng = Rng::stream(seed, "mcar");
  const auto inst = data.schema.instance_column();

  // Masks depend only on the generator and the observed pattern.
  auto mask_row = [&](MaskedTable& t, Index i, double rate, std::vector<TruthEntry>& truth, std::optional<int> skip) {
    int available = 0;
    for (Index j = 0; j < t.cols(); ++j)
      if (t.observed(i, j) && (!skip || j != *skip)) ++available;
    std::vector<bool> drop(static_cast<std::size_t>(t.cols()));
    while (true) {
      int kept = 0;
      for (Index j = 0; j < t.cols(); ++j) {
        const bool hit = rng.uniform() < rate;
        const bool eligible = t.observed(i, j) && (!skip || j != *skip);
        drop[static_cast<std::size_t>(j)] = hit && eligible;
        if (eligible && !hit) ++kept;
      }
      if (available == 0 || kept > 0) break;
    }
    for (Index j = 0; j < t.cols(); ++j) {
      if (!drop[static_cast<std::size_t>(j)]) continue;
      truth.push_back({static_cast<int>(i), static_cast<int>(j), t.values(i, j)});
      t.observed(i, j) = false;
    }
  };
  std::vector<TruthEntry> ty, tx;
  for (Index i = 0; i < out.rows(); ++i) {
    mask_row(out.y, i, rate_y, ty, std::nullopt);
    mask_row(out.x, i, rate_x, tx, inst);
  }
  auto merge = [](std::vector<TruthEntry>& base, const std::vector<TruthEntry>& extra) {
    base.insert(base.end(), extra.begin(), extra.end());
    std::sort(base.begin(), base.end(),
              [](const TruthEntry& a, const TruthEntry& b) { return std::tie(a.row, a.column) < std::tie(b.row, b.column); });
  };
  merge(out.truth_y, ty);
  merge(out.truth_x, tx);
  return out;
}

// ---------------------------------------------------------------------------
// Text formats.

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

double parse_double(const std::string& s, std::size_t row, std::size_t col) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  while (b < e && *b == ' ') ++b;
  while (e > b && (e[-1] == ' ' || e[-1] == '\r')) --e;
  if (b < e && *b == '+') ++b;
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e) throw ParseError("cannot parse number '" + s + "'", row, col);
  return v;
}

std::vector<std::string> split_csv_line(const std::string& line, std::size_t row) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char c = line[k];
    if (quoted) {
      if (c == '"') {
        if (k + 1 < line.size() && line[k + 1] == '"') {
          cur += '"';
          ++k;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  if (quoted) throw ParseError("unterminated quoted field", row, out.size() + 1);
  out.push_back(std::move(cur));
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

std::string role_of(const CovariateColumn& c) {
  if (c.role == ColumnRole::time) return "time";
  if (c.role == ColumnRole::instance) return "instance";
  return c.kind == ColumnKind::continuous ? "continuous" : "categorical";
}

}  // namespace

Manifest Manifest::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ManifestError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  Manifest m;
  try {
    for (const auto& [k, v] : j.items())
      if (k != "columns" && k != "normalisation" && k != "time_column" && k != "instance_column" && k != "ranges")
        throw ManifestError("unknown manifest key '" + k + "'");
    for (const auto& c : j.at("columns")) {
      for (const auto& [k, v] : c.items())
        if (k != "name" && k != "role" && k != "levels") throw ManifestError("unknown column key '" + k + "'");
      Column col;
      col.name = c.at("name").get<std::string>();
      col.role = c.at("role").get<std::string>();
      if (col.role != "observation" && col.role != "continuous" && col.role != "categorical" && col.role != "time" &&
          col.role != "instance")
        throw ManifestError("column '" + col.name + "' has unknown role '" + col.role + "'");
      if (c.contains("levels")) col.levels = c.at("levels").get<std::vector<std::string>>();
      if (col.role == "categorical" && col.levels.empty())
        throw ManifestError("categorical column '" + col.name + "' needs levels");
      m.columns.push_back(std::move(col));
    }
    const std::string norm = j.value("normalisation", std::string("none"));
    if (norm == "minmax-train") {
      m.normalisation = Normalisation::minmax_train;
    } else if (norm != "none") {
      throw ManifestError("unknown normalisation '" + norm + "'");
    }
    auto role_check = [&](const char* key, const char* role) {
      if (!j.contains(key)) return;
      const auto name = j.at(key).get<std::string>();
      auto it = std::find_if(m.columns.begin(), m.columns.end(), [&](const Column& c) { return c.name == name; });
      if (it == m.columns.end() || it->role != role)
        throw ManifestError(std::string(key) + " '" + name + "' is not declared with role " + role);
    };
    role_check("time_column", "time");
    role_check("instance_column", "instance");
    if (j.contains("ranges")) {
      const auto lo = j.at("ranges").at("min").get<std::vector<double>>();
      const auto hi = j.at("ranges").at("max").get<std::vector<double>>();
      if (lo.size() != hi.size()) throw ManifestError("ranges min/max lengths differ");
      MinMax r;
      r.min = Eigen::Map<const RowVector>(lo.data(), static_cast<Index>(lo.size()));
      r.max = Eigen::Map<const RowVector>(hi.data(), static_cast<Index>(hi.size()));
      m.ranges = r;
    }
  } catch (const json::exception& e) {
    throw ManifestError("malformed manifest " + path.string() + ": " + e.what());
  }
  return m;
}

void Manifest::write(const std::filesystem::path& path) const {
  json j;
  j["columns"] = json::array();
  std::optional<std::string> time, inst;
  for (const auto& c : columns) {
    json jc{{"name", c.name}, {"role", c.role}};
    if (!c.levels.empty()) jc["levels"] = c.levels;
    j["columns"].push_back(jc);
    if (c.role == "time") time = c.name;
    if (c.role == "instance") inst = c.name;
  }
  j["normalisation"] = normalisation == Normalisation::minmax_train ? "minmax-train" : "none";
  if (time) j["time_column"] = *time;
  if (inst) j["instance_column"] = *inst;
  if (ranges) {
    j["ranges"]["min"] = std::vector<double>(ranges->min.data(), ranges->min.data() + ranges->min.size());
    j["ranges"]["max"] = std::vector<double>(ranges->max.data(), ranges->max.data() + ranges->max.size());
  }
  auto out = open_out(path);
  out << j.dump(2) << "\n";
}

Manifest manifest_for(const Dataset& data) {
  Manifest m;
  for (Index d = 0; d < data.y.cols(); ++d) {
    const std::string name = data.y_names.empty() ? "y" + std::to_string(d) : data.y_names[static_cast<std::size_t>(d)];
    m.columns.push_back({name, "observation", {}});
  }
  for (const auto& c : data.schema.columns()) {
    std::vector<std::string> levels = c.levels;
    if (c.kind == ColumnKind::categorical && levels.empty())
      for (int k = 0; k < c.cardinality; ++k) levels.push_back(std::to_string(k));
    m.columns.push_back({c.name, role_of(c), levels});
  }
  return m;
}

LoadedDataset load_longitudinal_csv(const std::filesystem::path& data_path, const std::filesystem::path& manifest_path,
                                    const std::optional<MinMax>& stats) {
  const Manifest manifest = Manifest::read(manifest_path);
  std::ifstream in(data_path);
  if (!in) throw DataError("cannot open data file " + data_path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError("missing header row", 1, 1);
  const auto header = split_csv_line(line, 1);

  std::map<std::string, std::size_t> declared;
  for (std::size_t k = 0; k < manifest.columns.size(); ++k) {
    if (!declared.emplace(manifest.columns[k].name, k).second)
      throw ManifestError("column '" + manifest.columns[k].name + "' declared twice");
  }
  std::vector<std::size_t> file_to_manifest(header.size());
  std::vector<bool> seen(manifest.columns.size(), false);
  for (std::size_t f = 0; f < header.size(); ++f) {
    auto it = declared.find(header[f]);
    if (it == declared.end()) throw ManifestError("column '" + header[f] + "' is not declared in the manifest");
    if (seen[it->second]) throw ManifestError("column '" + header[f] + "' appears twice in the data file");
    seen[it->second] = true;
    file_to_manifest[f] = it->second;
  }
  for (std::size_t k = 0; k < seen.size(); ++k)
    if (!seen[k]) throw ManifestError("manifest column '" + manifest.columns[k].name + "' is absent from the data file");

  std::vector<std::vector<std::string>> cells;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    auto fields = split_csv_line(line, row);
    if (fields.size() != header.size())
      throw ParseError("expected " + std::to_string(header.size()) + " fields, found " + std::to_string(fields.size()),
                       row, std::min(fields.size(), header.size()) + 1);
    std::vector<std::string> ordered(header.size());
    for (std::size_t f = 0; f < fields.size(); ++f) ordered[file_to_manifest[f]] = std::move(fields[f]);
    cells.push_back(std::move(ordered));
  }
  std::vector<std::size_t> line_of(cells.size());
  {
    // line numbers for error messages, skipping blank lines as read
    std::ifstream again(data_path);
    std::string l;
    std::getline(again, l);
    std::size_t r = 1, k = 0;
    while (std::getline(again, l) && k < cells.size()) {
      ++r;
      if (l.empty() || l == "\r") continue;
      line_of[k++] = r;
    }
  }
  std::vector<std::size_t> file_col(manifest.columns.size());
  for (std::size_t f = 0; f < header.size(); ++f) file_col[file_to_manifest[f]] = f + 1;

  // Instance ids without declared levels take first-appearance order.
  std::vector<Manifest::Column> cols = manifest.columns;
  for (std::size_t k = 0; k < cols.size(); ++k) {
    if (cols[k].role != "instance" || !cols[k].levels.empty()) continue;
    for (const auto& r : cells) {
      const std::string& v = r[k];
      if (!v.empty() && std::find(cols[k].levels.begin(), cols[k].levels.end(), v) == cols[k].levels.end())
        cols[k].levels.push_back(v);
    }
    if (cols[k].levels.size() < 2)
      throw ManifestError("instance column '" + cols[k].name + "' needs declared levels or at least two ids");
  }

  std::vector<CovariateColumn> schema_cols;
  std::vector<std::size_t> y_cols, x_cols;
  Dataset data;
  for (std::size_t k = 0; k < cols.size(); ++k) {
    const auto& c = cols[k];
    if (c.role == "observation") {
      y_cols.push_back(k);
      data.y_names.push_back(c.name);
      continue;
    }
    x_cols.push_back(k);
    CovariateColumn cc;
    cc.name = c.name;
    if (c.role == "continuous" || c.role == "time") {
      cc.kind = ColumnKind::continuous;
      cc.role = c.role == "time" ? ColumnRole::time : ColumnRole::covariate;
    } else {
      cc.kind = ColumnKind::categorical;
      cc.levels = c.levels;
      cc.cardinality = static_cast<int>(c.levels.size());
      cc.role = c.role == "instance" ? ColumnRole::instance : ColumnRole::covariate;
    }
    schema_cols.push_back(std::move(cc));
  }
  try {
    data.schema = CovariateSchema(schema_cols);
  } catch (const SchemaMismatch& e) {
    throw ManifestError(std::string("manifest does not define a valid schema: ") + e.what());
  }

  const auto n = static_cast<Index>(cells.size());
  Matrix yv = Matrix::Zero(n, static_cast<Index>(y_cols.size()));
  BoolMatrix yo = BoolMatrix::Constant(n, yv.cols(), false);
  Matrix xv = Matrix::Zero(n, static_cast<Index>(x_cols.size()));
  BoolMatrix xo = BoolMatrix::Constant(n, xv.cols(), false);
  for (Index i = 0; i < n; ++i) {
    const auto& r = cells[static_cast<std::size_t>(i)];
    const std::size_t ln = line_of[static_cast<std::size_t>(i)];
    for (std::size_t d = 0; d < y_cols.size(); ++d) {
      const std::string& s = r[y_cols[d]];
      if (s.empty()) continue;
      yv(i, static_cast<Index>(d)) = parse_double(s, ln, file_col[y_cols[d]]);
      yo(i, static_cast<Index>(d)) = true;
    }
    for (std::size_t q = 0; q < x_cols.size(); ++q) {
      const auto& c = cols[x_cols[q]];
      const std::string& s = r[x_cols[q]];
      if (s.empty()) continue;
      if (c.role == "categorical" || c.role == "instance") {
        auto it = std::find(c.levels.begin(), c.levels.end(), s);
        if (it == c.levels.end())
          throw ManifestError("level '" + s + "' of column '" + c.name + "' is not declared (row " + std::to_string(ln) + ")");
        xv(i, static_cast<Index>(q)) = static_cast<double>(it - c.levels.begin());
      } else {
        xv(i, static_cast<Index>(q)) = parse_double(s, ln, file_col[x_cols[q]]);
      }
      xo(i, static_cast<Index>(q)) = true;
    }
  }

  LoadedDataset out;
  if (manifest.normalisation == Normalisation::minmax_train) {
    MinMax r;
    if (stats) {
      r = *stats;
    } else if (manifest.ranges) {
      r = *manifest.ranges;
    } else {
      r.min = RowVector::Zero(yv.cols());
      r.max = RowVector::Zero(yv.cols());
      for (Index d = 0; d < yv.cols(); ++d) {
        bool any = false;
        for (Index i = 0; i < n; ++i) {
          if (!yo(i, d)) continue;
          r.min(d) = any ? std::min(r.min(d), yv(i, d)) : yv(i, d);
          r.max(d) = any ? std::max(r.max(d), yv(i, d)) : yv(i, d);
          any = true;
        }
      }
    }
    if (r.min.size() != yv.cols() || r.max.size() != yv.cols())
      throw ManifestError("normalisation ranges do not match the observation columns");
    for (Index d = 0; d < yv.cols(); ++d) {
      const double span = r.max(d) - r.min(d);
      for (Index i = 0; i < n; ++i)
        if (yo(i, d)) yv(i, d) = span > 0 ? (yv(i, d) - r.min(d)) / span : yv(i, d) - r.min(d);
    }
    out.ranges = r;
  }
  data.y = MaskedTable(std::move(yv), std::move(yo));
  data.x = MaskedTable(std::move(xv), std::move(xo));
  if (data.schema.instance_column()) {
    const auto order = canonical_order(data.x, data.schema);
    data = data.select_rows(order);
  }
  data.validate();
  out.data = std::move(data);
  return out;
}

void write_csv(const Dataset& data, const std::filesystem::path& data_path) {
  data.validate();
  const Manifest m = manifest_for(data);
  auto out = open_out(data_path);
  for (std::size_t k = 0; k < m.columns.size(); ++k) out << (k ? "," : "") << csv_field(m.columns[k].name);
  out << "\n";
  for (Index i = 0; i < data.rows(); ++i) {
    bool first = true;
    auto sep = [&]() {
      if (!first) out << ",";
      first = false;
    };
    for (Index d = 0; d < data.y.cols(); ++d) {
      sep();
      if (data.y.observed(i, d)) out << format_double(data.y.values(i, d));
    }
    for (int q = 0; q < data.schema.size(); ++q) {
      sep();
      if (!data.x.observed(i, q)) continue;
      const double v = data.x.values(i, q);
      if (data.schema.column(q).kind == ColumnKind::categorical) {
        out << csv_field(m.columns[static_cast<std::size_t>(data.y.cols() + q)].levels.at(static_cast<std::size_t>(v)));
      } else {
        out << format_double(v);
      }
    }
    out << "\n";
  }
}

void write_truth(const Dataset& data, const std::filesystem::path& path) {
  const Manifest m = manifest_for(data);
  auto out = open_out(path);
  out << "row,column,value\n";
  for (const auto& e : data.truth_y)
    out << e.row << "," << csv_field(m.columns[static_cast<std::size_t>(e.column)].name) << "," << format_double(e.value)
        << "\n";
  for (const auto& e : data.truth_x) {
    const auto& col = m.columns[static_cast<std::size_t>(data.y.cols() + e.column)];
    const std::string value = data.schema.column(e.column).kind == ColumnKind::categorical
                                  ? csv_field(col.levels.at(static_cast<std::size_t>(e.value)))
                                  : format_double(e.value);
    out << e.row << "," << csv_field(col.name) << "," << value << "\n";
  }
}

void read_truth(Dataset& data, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open truth file " + path.string());
  const Manifest m = manifest_for(data);
  std::string line;
  std::getline(in, line);
  std::size_t row = 1;
  data.truth_x.clear();
  data.truth_y.clear();
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line, row);
    if (f.size() != 3) throw ParseError("truth rows need three fields", row, f.size());
    const double r = parse_double(f[0], row, 1);
    auto it = std::find_if(m.columns.begin(), m.columns.end(), [&](const Manifest::Column& c) { return c.name == f[1]; });
    if (it == m.columns.end()) throw ManifestError("truth file names unknown column '" + f[1] + "'");
    const auto k = static_cast<int>(it - m.columns.begin());
    if (k < data.y.cols()) {
      data.truth_y.push_back({static_cast<int>(r), k, parse_double(f[2], row, 3)});
      continue;
    }
    const int q = k - static_cast<int>(data.y.cols());
    double v = 0.0;
    if (data.schema.column(q).kind == ColumnKind::categorical) {
      auto lv = std::find(it->levels.begin(), it->levels.end(), f[2]);
      if (lv == it->levels.end()) throw ManifestError("truth level '" + f[2] + "' is not declared");
      v = static_cast<double>(lv - it->levels.begin());
    } else {
      v = parse_double(f[2], row, 3);
    }
    data.truth_x.push_back({static_cast<int>(r), q, v});
  }
  auto order = [](std::vector<TruthEntry>& t) {
    std::sort(t.begin(), t.end(),
              [](const TruthEntry& a, const TruthEntry& b) { return std::tie(a.row, a.column) < std::tie(b.row, b.column); });
  };
  order(data.truth_x);
  order(data.truth_y);
  data.validate();
}

// ---------------------------------------------------------------------------
// Splits.

std::array<int, 3> largest_remainder(int total, const std::array<double, 3>& fractions) {
  double sum = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw ConfigError("split fractions must be non-negative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  std::array<int, 3> counts{};
  std::array<double, 3> rem{};
  int used = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const double exact = fractions[k] * total;
    counts[k] = static_cast<int>(std::floor(exact));
    rem[k] = exact - counts[k];
    used += counts[k];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; used < total; ++k, ++used) ++counts[order[k % 3]];
  return counts;
}

Split split(const Dataset& data, const std::array<double, 3>& fractions, bool by_instance, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "split");
  std::vector<std::vector<int>> units;
  if (by_instance) {
    const auto inst = data.schema.instance_column();
    if (!inst) throw TooFewInstances("splitting by instance needs an instance-id column");
    std::map<double, std::vector<int>> groups;
    for (Index i = 0; i < data.rows(); ++i) groups[data.x.values(i, *inst)].push_back(static_cast<int>(i));
    for (auto& [id, rows] : groups) units.push_back(std::move(rows));
    int needed = 0;
    for (double f : fractions) needed += f > 0 ? 1 : 0;
    if (static_cast<int>(units.size()) < needed)
      throw TooFewInstances(std::to_string(units.size()) + " instances cannot fill " + std::to_string(needed) + " splits");
  } else {
    for (Index i = 0; i < data.rows(); ++i) units.push_back({static_cast<int>(i)});
  }
  const auto counts = largest_remainder(static_cast<int>(units.size()), fractions);
  std::vector<std::size_t> perm(units.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  std::array<std::vector<int>, 3> rows;
  std::size_t pos = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    for (int k = 0; k < counts[s]; ++k, ++pos) {
      const auto& u = units[perm[pos]];
      rows[s].insert(rows[s].end(), u.begin(), u.end());
    }
    std::sort(rows[s].begin(), rows[s].end());
  }
  return {data.select_rows(rows[0]), data.select_rows(rows[1]), data.select_rows(rows[2])};
}

// ---------------------------------------------------------------------------
// Baseline imputers.

ImputeStats fit_impute_stats(const CovariateTable& train, const CovariateSchema& schema) {
  if (train.cols() != schema.size()) throw SchemaMismatch("covariate table does not match schema");
  ImputeStats s;
  s.mean.assign(static_cast<std::size_t>(schema.size()), 0.0);
  s.sd.assign(static_cast<std::size_t>(schema.size()), 1.0);
  s.mode.assign(static_cast<std::size_t>(schema.size()), 0);
  for (int q = 0; q < schema.size(); ++q) {
    const auto& c = schema.column(q);
    const auto uq = static_cast<std::size_t>(q);
    if (c.kind == ColumnKind::continuous) {
      double sum = 0.0;
      int n = 0;
      for (Index i = 0; i < train.rows(); ++i)
        if (train.observed(i, q)) {
          sum += train.values(i, q);
          ++n;
        }
      if (n == 0) continue;
      s.mean[uq] = sum / n;
      if (n < 2) continue;
      double ss = 0.0;
      for (Index i = 0; i < train.rows(); ++i)
        if (train.observed(i, q)) ss += (train.values(i, q) - s.mean[uq]) * (train.values(i, q) - s.mean[uq]);
      const double sd = std::sqrt(ss / (n - 1));
      if (sd > 0) s.sd[uq] = sd;
    } else {
      std::vector<int> counts(static_cast<std::size_t>(c.cardinality), 0);
      for (Index i = 0; i < train.rows(); ++i)
        if (train.observed(i, q)) ++counts[static_cast<std::size_t>(train.values(i, q))];
      s.mode[uq] = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    }
  }
  return s;
}

CovariateTable mean_impute(const CovariateTable& x, const CovariateSchema& schema, const ImputeStats& stats) {
  if (x.cols() != schema.size()) throw SchemaMismatch("covariate table does not match schema");
  CovariateTable out = x;
  for (Index i = 0; i < x.rows(); ++i)
    for (int q = 0; q < schema.size(); ++q) {
      if (x.observed(i, q)) continue;
      out.values(i, q) = schema.column(q).kind == ColumnKind::continuous ? stats.mean[static_cast<std::size_t>(q)]
                                                                         : stats.mode[static_cast<std::size_t>(q)];
      out.observed(i, q) = true;
    }
  return out;
}

CovariateTable zero_impute(const CovariateTable& x, const CovariateSchema& schema) {
  if (x.cols() != schema.size()) throw SchemaMismatch("covariate table does not match schema");
  CovariateTable out = x;
  out.values = x.observed.select(x.values, Matrix::Zero(x.rows(), x.cols()));
  out.observed.setConstant(true);
  return out;
}

CovariateTable knn_impute(const CovariateTable& x, const CovariateTable& train, const CovariateSchema& schema, int k,
                          const ImputeStats& stats) {
  if (k < 1) throw ConfigError("k must be >= 1");
  if (x.cols() != schema.size() || train.cols() != schema.size())
    throw SchemaMismatch("covariate table does not match schema");
  const auto inst = schema.instance_column();
  const CovariateTable fallback = mean_impute(x, schema, stats);
  CovariateTable out = fallback;
  const Index nt = train.rows();
  std::vector<double> dist(static_cast<std::size_t>(nt));
  std::vector<bool> comparable(static_cast<std::size_t>(nt));
  for (Index i = 0; i < x.rows(); ++i) {
    bool any_missing = false, any_observed = false;
    for (int q = 0; q < schema.size(); ++q) {
      if (inst && q == *inst) continue;
      (x.observed(i, q) ? any_observed : any_missing) = true;
    }
    if (!any_missing || !any_observed) continue;
    for (Index j = 0; j < nt; ++j) {
      double d = 0.0;
      int count = 0;
      for (int q = 0; q < schema.size(); ++q) {
        if ((inst && q == *inst) || !x.observed(i, q) || !train.observed(j, q)) continue;
        if (schema.column(q).kind == ColumnKind::continuous) {
          const double z = (x.values(i, q) - train.values(j, q)) / stats.sd[static_cast<std::size_t>(q)];
          d += z * z;
        } else {
          d += x.values(i, q) != train.values(j, q) ? 1.0 : 0.0;
        }
        ++count;
      }
      comparable[static_cast<std::size_t>(j)] = count > 0;
      dist[static_cast<std::size_t>(j)] = count > 0 ? d / count : 0.0;
    }
    for (int q = 0; q < schema.size(); ++q) {
      if (x.observed(i, q)) continue;
      std::vector<int> cand;
      for (Index j = 0; j < nt; ++j)
        if (comparable[static_cast<std::size_t>(j)] && train.observed(j, q)) cand.push_back(static_cast<int>(j));
      if (cand.empty()) continue;
      std::stable_sort(cand.begin(), cand.end(), [&](int a, int b) {
        return dist[static_cast<std::size_t>(a)] < dist[static_cast<std::size_t>(b)];
      });
      const std::size_t use = std::min(cand.size(), static_cast<std::size_t>(k));
      if (schema.column(q).kind == ColumnKind::continuous) {
        double s = 0.0;
        for (std::size_t m = 0; m < use; ++m) s += train.values(cand[m], q);
        out.values(i, q) = s / static_cast<double>(use);
      } else {
        std::vector<int> votes(static_cast<std::size_t>(schema.column(q).cardinality), 0);
        for (std::size_t m = 0; m < use; ++m) ++votes[static_cast<std::size_t>(train.values(cand[m], q))];
        out.values(i, q) = static_cast<double>(std::max_element(votes.begin(), votes.end()) - votes.begin());
      }
    }
  }
  return out;
}

CovariateTable restore_truth(const CovariateTable& x, const std::vector<TruthEntry>& truth) {
  CovariateTable out = x;
  for (const auto& e : truth) {
    out.values(e.row, e.column) = e.value;
    out.observed(e.row, e.column) = true;
  }
  return out;
}

ImputationScores score_imputation(const CovariateTable& filled, const Dataset& truth_source) {
  ImputationScores s;
  double se = 0.0;
  std::size_t hits = 0;
  for (const auto& e : truth_source.truth_x) {
    const double v = filled.values(e.row, e.column);
    if (truth_source.schema.column(e.column).kind == ColumnKind::continuous) {
      se += (v - e.value) * (v - e.value);
      ++s.continuous_count;
    } else {
      hits += v == e.value ? 1 : 0;
      ++s.categorical_count;
    }
  }
  if (s.continuous_count > 0) s.mse = se / static_cast<double>(s.continuous_count);
  if (s.categorical_count > 0) s.accuracy = static_cast<double>(hits) / static_cast<double>(s.categorical_count);
  return s;
}

}  // namespace mcvae
