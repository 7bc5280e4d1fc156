#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mcvae/data.hpp"

using namespace mcvae;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / "mcvae_test_data" / name;
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  out << s;
}

double correlation(const Matrix& x, Index a, Index b) {
  const auto u = x.col(a).array() - x.col(a).mean();
  const auto v = x.col(b).array() - x.col(b).mean();
  return (u * v).sum() / std::sqrt(u.square().sum() * v.square().sum());
}

Dataset mixed_dataset() {
  const CovariateSchema schema({{"age", ColumnKind::continuous, 0, {}, ColumnRole::covariate},
                                {"arm", ColumnKind::categorical, 2, {"placebo", "drug"}, ColumnRole::covariate},
                                {"week", ColumnKind::continuous, 0, {}, ColumnRole::time},
                                {"pid", ColumnKind::categorical, 3, {"p1", "p2", "p3"}, ColumnRole::instance}});
  Matrix xv(6, 4);
  xv << 0.1, 0, 1, 0,
        0.1, 0, 2.5, 0,
        -1.25, 1, 0.5, 1,
        -1.25, 1, 1.5, 1,
        3.0e-7, 0, 0.25, 2,
        3.0e-7, 0, 1.0 / 3.0, 2;
  BoolMatrix xo = BoolMatrix::Constant(6, 4, true);
  xo(1, 0) = false;
  xo(3, 1) = false;
  Matrix yv(6, 2);
  yv << 1, 2, 3, 4, 5, 6, 7, 8, 0.1, 0.2, 1e-300, -2.5;
  BoolMatrix yo = BoolMatrix::Constant(6, 2, true);
  yo(2, 1) = false;
  Dataset d;
  d.y = MaskedTable(yv, yo);
  d.x = MaskedTable(xv, xo);
  d.schema = schema;
  d.y_names = {"hb", "wbc"};
  d.index = build_longitudinal_index(d.x, schema);
  return d;
}

}  // namespace

TEST_CASE("procedural glyph and rendering") {
  const Matrix g = procedural_glyph(3, 12);
  CHECK(g.minCoeff() >= 0.0);
  CHECK(g.maxCoeff() <= 1.0);
  CHECK(g.sum() > 5.0);
  CHECK(render_digit(g, 0.0, 0.0, 1.0) == g);
  CHECK((render_digit(g, 0.0, 0.0, 0.5) - 0.5 * g).cwiseAbs().maxCoeff() < 1e-15);
  // a quarter turn keeps the mass in the frame
  CHECK(render_digit(g, std::acos(-1.0) / 2, 0.0, 1.0).sum() == doctest::Approx(g.sum()).epsilon(0.15));
  CHECK(render_digit(g, 0.3, 1.0, 1.0) != g);
  CHECK_THROWS_AS(procedural_glyph(3, 6), ConfigError);
}

TEST_CASE("generated digits") {
  RotatedDigitsConfig c;
  c.n_train = 4000;
  c.n_validation = 3;
  c.n_test = 5;
  c.seed = 11;
  const GeneratedDigits a = generate_rotated_digits(c);
  CHECK(a.train.rows() == 4000);
  CHECK(a.validation.rows() == 3);
  CHECK(a.test.rows() == 5);
  CHECK(a.train.y.cols() == 144);
  CHECK(a.train.schema.size() == 3);
  for (Index p = 0; p < 3; ++p)
    for (Index q = p + 1; q < 3; ++q) CHECK(std::abs(correlation(a.train.x.values, p, q)) < 0.05);
  CHECK(a.train.x.values.col(0).mean() == doctest::Approx(c.rotation.mean).epsilon(0.05));

  const GeneratedDigits b = generate_rotated_digits(c);
  CHECK(a.train.y.values == b.train.y.values);
  CHECK(a.test.x.values == b.test.x.values);
  c.seed = 12;
  CHECK(generate_rotated_digits(c).train.y.values != a.train.y.values);

  RotatedDigitsConfig c2;
  c2.variant = DigitsVariant::dataset2;
  c2.n_train = 2000;
  const GeneratedDigits d2 = generate_rotated_digits(c2);
  CHECK(std::abs(correlation(d2.train.x.values, 0, 1)) > 0.2);

  RotatedDigitsConfig c3;
  c3.variant = DigitsVariant::dataset3;
  c3.t_min = 2.0;
  c3.t_max = 5.0;
  const GeneratedDigits d3 = generate_rotated_digits(c3);
  REQUIRE(d3.train.schema.time_column());
  CHECK(d3.train.x.values.col(3).minCoeff() >= 2.0);
  CHECK(d3.train.x.values.col(3).maxCoeff() <= 5.0);

  RotatedDigitsConfig bad;
  bad.side = 4;
  CHECK_THROWS_AS(generate_rotated_digits(bad), ConfigError);
}

TEST_CASE("MCAR injection") {
  RotatedDigitsConfig c;
  c.n_train = 700;
  c.n_validation = 1;
  c.n_test = 1;
  const Dataset base = generate_rotated_digits(c).train;  // 700 x 144 ~ 1e5 entries

  const Dataset same = inject_mcar(base, 0.0, 0.0, 1);
  CHECK(same.y.observed.all());
  CHECK(same.x.observed.all());
  CHECK(!same.has_truth());

  const Dataset m = inject_mcar(base, 0.2, 0.2, 1);
  const double frac_y = static_cast<double>(m.y.missing_count()) / static_cast<double>(m.y.observed.size());
  CHECK(std::abs(frac_y - 0.2) < 0.01);
  CHECK(m.truth_y.size() == static_cast<std::size_t>(m.y.missing_count()));
  CHECK(m.truth_x.size() == static_cast<std::size_t>(m.x.missing_count()));
  for (const auto& e : m.truth_y) CHECK(e.value == base.y.values(e.row, e.column));

  // masks do not depend on the values
  Dataset shuffled = base;
  shuffled.y.values = base.y.values.colwise().reverse();
  shuffled.x.values.col(0).reverseInPlace();
  const Dataset m2 = inject_mcar(shuffled, 0.2, 0.2, 1);
  CHECK(m2.y.observed == m.y.observed);
  CHECK(m2.x.observed == m.x.observed);

  const Dataset extreme = inject_mcar(base.select_rows({0, 1, 2, 3, 4, 5, 6, 7}), 0.999, 0.999, 3);
  for (Index i = 0; i < extreme.rows(); ++i) {
    CHECK(extreme.y.observed.row(i).count() >= 1);
    CHECK(extreme.x.observed.row(i).count() >= 1);
  }

  // pre-existing gaps stay gaps without truth
  const Dataset twice = inject_mcar(m, 0.1, 0.1, 2);
  CHECK(twice.truth_y.size() > m.truth_y.size());
  CHECK((twice.y.observed.cast<int>().array() <= m.y.observed.cast<int>().array()).all());

  CHECK_THROWS_AS(inject_mcar(base, 1.0, 0.1, 1), RateError);
  CHECK_THROWS_AS(inject_mcar(base, 0.1, -0.1, 1), RateError);

  // instance ids are never masked
  const Dataset lon = inject_mcar(mixed_dataset(), 0.9, 0.5, 4);
  CHECK(lon.x.observed.col(3).all());
}

TEST_CASE("CSV and manifest") {
  const fs::path dir = scratch("csv");
  write_text(dir / "m.json",
             R"({"columns": [{"name": "y1", "role": "observation"}, {"name": "t", "role": "time"},
                 {"name": "sex", "role": "categorical", "levels": ["f", "m"]}, {"name": "id", "role": "instance"},
                 {"name": "y2", "role": "observation"}],
                 "normalisation": "none", "time_column": "t", "instance_column": "id"})");
  write_text(dir / "a.csv", "id,t,y1,y2,sex\nA,0,1.5,2,f\nB,1,-3,4e-3,m\n");
  const Dataset a = load_longitudinal_csv(dir / "a.csv", dir / "m.json").data;
  CHECK(a.y.observed.all());
  CHECK(a.x.observed.all());
  CHECK(a.y.values(0, 0) == 1.5);
  CHECK(a.y.values(1, 1) == 4e-3);
  CHECK(a.x.values(1, 1) == 1.0);
  CHECK(a.y_names == std::vector<std::string>{"y1", "y2"});
  REQUIRE(a.index);
  CHECK(a.index->instances() == 2);

  write_text(dir / "b.csv", "id,t,y1,y2,sex\nA,0,1.5,,f\nA,,2,3,\nB,1,1,1,m\n");
  const Dataset b = load_longitudinal_csv(dir / "b.csv", dir / "m.json").data;
  CHECK(!b.y.observed(0, 1));
  CHECK(!b.x.observed(1, 0));
  CHECK(!b.x.observed(1, 1));

  write_text(dir / "c.csv", "id,t,y1,y2,sex\nA,0,1.5,2,x\nB,1,1,2,f\n");
  try {
    load_longitudinal_csv(dir / "c.csv", dir / "m.json");
    FAIL("expected ManifestError");
  } catch (const ManifestError& e) {
    CHECK(std::string(e.what()).find("'x'") != std::string::npos);
  }
  write_text(dir / "d.csv", "id,t,y1,y2,sex\nA,0,1.5,2,f\nB,1,abc,2,f\n");
  try {
    load_longitudinal_csv(dir / "d.csv", dir / "m.json");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.row() == 3);
    CHECK(e.column() == 3);
  }
  write_text(dir / "e.csv", "id,t,y1,y2,sex,extra\nA,0,1,2,f,9\nB,1,1,2,f,9\n");
  CHECK_THROWS_AS(load_longitudinal_csv(dir / "e.csv", dir / "m.json"), ManifestError);

  // round trip
  const Dataset src = mixed_dataset();
  write_csv(src, dir / "rt.csv");
  manifest_for(src).write(dir / "rt.json");
  const Dataset back = load_longitudinal_csv(dir / "rt.csv", dir / "rt.json").data;
  CHECK(back.y.observed == src.y.observed);
  CHECK(back.x.observed == src.x.observed);
  CHECK(src.y.observed.select(back.y.values, 0.0) == src.y.observed.select(src.y.values, 0.0));
  CHECK(src.x.observed.select(back.x.values, 0.0) == src.x.observed.select(src.x.values, 0.0));
  CHECK(back.schema.columns() == src.schema.columns());
  CHECK(back.y_names == src.y_names);

  Dataset masked = inject_mcar(src, 0.3, 0.3, 5);
  write_csv(masked, dir / "rt2.csv");
  write_truth(masked, dir / "rt2_truth.csv");
  Dataset loaded = load_longitudinal_csv(dir / "rt2.csv", dir / "rt.json").data;
  read_truth(loaded, dir / "rt2_truth.csv");
  CHECK(loaded.truth_x == masked.truth_x);
  CHECK(loaded.truth_y == masked.truth_y);

  // min-max normalisation from the file, then from supplied statistics
  Manifest mm = Manifest::read(dir / "m.json");
  mm.normalisation = Normalisation::minmax_train;
  mm.write(dir / "mm.json");
  const LoadedDataset n1 = load_longitudinal_csv(dir / "a.csv", dir / "mm.json");
  REQUIRE(n1.ranges);
  CHECK(n1.data.y.values(0, 0) == 1.0);
  CHECK(n1.data.y.values(1, 0) == 0.0);
  MinMax fixed{RowVector::Constant(2, 0.0), RowVector::Constant(2, 2.0)};
  const LoadedDataset n2 = load_longitudinal_csv(dir / "a.csv", dir / "mm.json", fixed);
  CHECK(n2.data.y.values(0, 0) == 0.75);
}

TEST_CASE("splits") {
  const Dataset d = mixed_dataset();
  const Split all = split(d, {1.0, 0.0, 0.0}, false, 1);
  CHECK(all.train.rows() == 6);
  CHECK(all.validation.rows() == 0);
  CHECK(all.test.rows() == 0);

  CHECK(largest_remainder(10, {0.8, 0.1, 0.1}) == std::array<int, 3>{8, 1, 1});
  CHECK(largest_remainder(7, {0.5, 0.25, 0.25}) == std::array<int, 3>{3, 2, 2});

  // ten instances of two rows each
  const CovariateSchema schema({{"pid", ColumnKind::categorical, 10, {}, ColumnRole::instance}});
  Matrix xv(20, 1);
  for (Index i = 0; i < 20; ++i) xv(i, 0) = static_cast<double>(i / 2);
  Dataset ten;
  ten.x = MaskedTable::fully_observed(xv);
  ten.y = MaskedTable::fully_observed(Matrix::Zero(20, 1));
  ten.schema = schema;
  const Split s = split(ten, {0.8, 0.1, 0.1}, true, 3);
  CHECK(s.train.index->instances() == 8);
  CHECK(s.validation.index->instances() == 1);
  CHECK(s.test.index->instances() == 1);
  CHECK(s.train.rows() == 16);
  const Split s2 = split(ten, {0.8, 0.1, 0.1}, true, 3);
  CHECK(s2.test.x.values == s.test.x.values);

  Dataset flat = ten;
  flat.schema = CovariateSchema({{"v", ColumnKind::continuous, 0, {}, ColumnRole::covariate}});
  CHECK_THROWS_AS(split(flat, {0.8, 0.1, 0.1}, true, 1), TooFewInstances);
  CHECK_THROWS_AS(split(ten, {0.8, 0.1, 0.2}, false, 1), ConfigError);
}

TEST_CASE("baseline imputers") {
  const CovariateSchema schema({{"v", ColumnKind::continuous, 0, {}, ColumnRole::covariate},
                                {"c", ColumnKind::categorical, 3, {}, ColumnRole::covariate}});
  Matrix tv(4, 2);
  tv << 2, 1, 4, 2, 0, 1, 0, 2;
  BoolMatrix to = BoolMatrix::Constant(4, 2, true);
  to(2, 0) = false;
  to(3, 0) = false;
  const CovariateTable train(tv, to);
  const ImputeStats stats = fit_impute_stats(train, schema);
  CHECK(stats.mean[0] == 3.0);
  CHECK(stats.mode[1] == 1);  // tie between 1 and 2

  const CovariateTable full(tv, BoolMatrix::Constant(4, 2, true));
  CHECK(mean_impute(full, schema, stats).values == tv);

  Matrix qv(2, 2);
  qv << 9, 0, 7, 2;
  BoolMatrix qo(2, 2);
  qo << false, false, true, false;
  const CovariateTable filled = mean_impute(CovariateTable(qv, qo), schema, stats);
  CHECK(filled.values(0, 0) == 3.0);
  CHECK(filled.values(0, 1) == 1.0);
  CHECK(filled.values(1, 0) == 7.0);
  CHECK(filled.observed.all());
  CHECK(zero_impute(CovariateTable(qv, qo), schema).values(1, 1) == 0.0);

  Rng rng(2);
  Matrix rv(30, 2);
  for (Index i = 0; i < 30; ++i) {
    rv(i, 0) = rng.normal();
    rv(i, 1) = static_cast<double>(rng.index(3));
  }
  const CovariateTable ref = MaskedTable::fully_observed(rv);
  const ImputeStats rs = fit_impute_stats(ref, schema);
  BoolMatrix one_missing = BoolMatrix::Constant(1, 2, true);
  one_missing(0, 1) = false;
  const CovariateTable query(rv.row(7), one_missing);
  CHECK(knn_impute(query, ref, schema, 1, rs).values == rv.row(7));

  const CovariateTable all_k = knn_impute(query, ref, schema, 30, rs);
  CHECK(all_k.values(0, 1) == mean_impute(query, schema, rs).values(0, 1));
  one_missing(0, 1) = true;
  one_missing(0, 0) = false;
  const CovariateTable query2(rv.row(3), one_missing);
  CHECK(knn_impute(query2, ref, schema, 30, rs).values(0, 0) == doctest::Approx(rs.mean[0]).epsilon(1e-12));
  CHECK(knn_impute(query2, ref, schema, 30, rs).values(0, 1) == rv(3, 1));

  const CovariateTable empty(Matrix::Zero(1, 2), BoolMatrix::Constant(1, 2, false));
  CHECK(knn_impute(empty, ref, schema, 5, rs).values == mean_impute(empty, schema, rs).values);

  // perfect fill scores
  Dataset d;
  d.schema = schema;
  d.x = CovariateTable(qv, qo);
  d.y = MaskedTable::fully_observed(Matrix::Zero(2, 1));
  d.truth_x = {{0, 0, 9.0}, {0, 1, 0.0}, {1, 1, 2.0}};
  const ImputationScores sc = score_imputation(restore_truth(d.x, d.truth_x), d);
  CHECK(*sc.mse == 0.0);
  CHECK(*sc.accuracy == 1.0);
  CHECK(sc.continuous_count == 1);
  CHECK(sc.categorical_count == 2);
}
