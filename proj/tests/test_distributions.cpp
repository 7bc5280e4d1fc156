#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "mcvae/distributions.hpp"
#include "mcvae/random.hpp"

using namespace mcvae;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

Matrix random_spd(std::mt19937_64& gen, Index n) {
  std::normal_distribution<double> nd;
  Matrix b(n, n);
  for (Index i = 0; i < b.size(); ++i) b.data()[i] = nd(gen);
  return b * b.transpose() + 0.5 * Matrix::Identity(n, n);
}

struct McResult {
  double mean;
  double se;
};

McResult mc_kl_full(const Vector& m1, const Matrix& c1, const Vector& m0, const Matrix& c0, int draws,
                    std::uint64_t seed) {
  Rng rng(seed);
  const Matrix l1 = c1.llt().matrixL();
  const Matrix c1inv = c1.inverse();
  const Matrix c0inv = c0.inverse();
  const double ld1 = std::log(c1.determinant());
  const double ld0 = std::log(c0.determinant());
  double s = 0.0;
  double ss = 0.0;
  for (int k = 0; k < draws; ++k) {
    Vector eps(m1.size());
    for (Index i = 0; i < eps.size(); ++i) eps(i) = rng.normal();
    const Vector x = m1 + l1 * eps;
    const Vector d1 = x - m1;
    const Vector d0 = x - m0;
    const double v = -0.5 * (ld1 + d1.dot(c1inv * d1)) + 0.5 * (ld0 + d0.dot(c0inv * d0));
    s += v;
    ss += v * v;
  }
  const double mean = s / draws;
  const double var = (ss / draws - mean * mean) * draws / (draws - 1.0);
  return {mean, std::sqrt(var / draws)};
}

CovariateSchema mixed_schema() {
  return CovariateSchema({{"a", ColumnKind::continuous, 0, {}, ColumnRole::covariate},
                          {"b", ColumnKind::categorical, 4, {}, ColumnRole::covariate}});
}

}  // namespace

TEST_CASE("kl_diag_gaussian examples") {
  Vector m(3), v(3);
  m << 0.3, -1.0, 2.0;
  v << 0.5, 1.2, 3.0;
  CHECK(std::abs(kl_diag_gaussian(m, v, m, v)) < 1e-10);

  Vector one = Vector::Ones(1), zero = Vector::Zero(1);
  CHECK(kl_diag_gaussian(one, one, zero, one) == doctest::Approx(0.5).epsilon(1e-15));

  Vector bad = v;
  bad(1) = 0.0;
  CHECK_THROWS_AS(kl_diag_gaussian(m, bad, m, v), NonPositiveVariance);
  CHECK_THROWS_AS(kl_diag_gaussian(m, v, m, bad), NonPositiveVariance);
}

TEST_CASE("kl_diag_gaussian agrees with a Monte-Carlo estimate") {
  Vector mq(4), vq(4), mp(4), vp(4);
  mq << 0.4, -0.7, 1.1, 0.0;
  vq << 0.6, 1.5, 0.3, 2.0;
  mp << 0.0, 0.2, 0.8, -0.5;
  vp << 1.0, 0.9, 0.5, 1.7;
  const double exact = kl_diag_gaussian(mq, vq, mp, vp);
  auto r = mc_kl_full(mq, Matrix(vq.asDiagonal()), mp, Matrix(vp.asDiagonal()), 1000000, 11);
  CHECK(std::abs(r.mean - exact) < 3.0 * r.se);
}

TEST_CASE("kl_full_gaussian examples and oracles") {
  std::mt19937_64 gen(5);
  const Matrix c = random_spd(gen, 3);
  Vector m(3);
  m << 0.1, 0.2, -0.3;
  CHECK(std::abs(kl_full_gaussian(m, c, m, c)) < 1e-10);

  SUBCASE("diagonal specialisation") {
    Vector m1(4), v1(4), m0(4), v0(4);
    m1 << 1.0, -0.5, 0.25, 2.0;
    v1 << 0.3, 1.0, 4.0, 0.7;
    m0 << 0.0, 0.5, -1.0, 1.0;
    v0 << 1.0, 2.0, 0.5, 1.5;
    const double full = kl_full_gaussian(m1, v1.asDiagonal(), m0, v0.asDiagonal());
    CHECK(std::abs(full - kl_diag_gaussian(m1, v1, m0, v0)) < 1e-10);
  }

  SUBCASE("Monte-Carlo oracle") {
    const Matrix c1 = random_spd(gen, 3);
    const Matrix c0 = random_spd(gen, 3);
    Vector m1(3), m0(3);
    m1 << 0.5, -0.2, 0.1;
    m0 << -0.3, 0.4, 0.0;
    const double exact = kl_full_gaussian(m1, c1, m0, c0);
    auto r = mc_kl_full(m1, c1, m0, c0, 1000000, 12);
    CHECK(std::abs(r.mean - exact) < 3.0 * r.se);
  }

  SUBCASE("errors") {
    Matrix nonpd = Matrix::Identity(2, 2);
    nonpd(1, 1) = -1.0;
    CHECK_THROWS_AS(kl_full_gaussian(Vector::Zero(2), nonpd, Vector::Zero(2), Matrix::Identity(2, 2)),
                    NotPositiveDefinite);
    CHECK_THROWS_AS(kl_full_gaussian(Vector::Zero(2), Matrix::Identity(3, 3), Vector::Zero(2), Matrix::Identity(2, 2)),
                    DimensionMismatch);
  }
}

TEST_CASE("kl_categorical") {
  Vector q(2), p(2);
  q << 1.0, 0.0;
  p << 0.5, 0.5;
  CHECK(kl_categorical(q, p) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(kl_categorical(p, p) == 0.0);

  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  Vector a(5), b(5);
  for (int k = 0; k < 5; ++k) {
    a(k) = u(gen);
    b(k) = u(gen);
  }
  a /= a.sum();
  b /= b.sum();
  double oracle = 0.0;
  for (int k = 0; k < 5; ++k) oracle += a(k) * (std::log(a(k)) - std::log(b(k)));
  CHECK(kl_categorical(a, b) == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(kl_categorical(a, b) > 0.0);

  Vector zero_p(2);
  zero_p << 1.0, 0.0;
  Vector half(2);
  half << 0.5, 0.5;
  CHECK_THROWS_AS(kl_categorical(half, zero_p), SupportViolation);
}

TEST_CASE("gaussian_log_density") {
  Vector y(3), mu(3), var(3);
  y << 1.0, 2.0, 3.0;
  var.setOnes();
  CHECK(gaussian_log_density(y, y, var) == doctest::Approx(-1.5 * kLog2Pi).epsilon(1e-15));
  mu = y.array() - 1.0;
  CHECK(gaussian_log_density(y.head(1), mu.head(1), var.head(1)) ==
        doctest::Approx(-0.5 * kLog2Pi - 0.5).epsilon(1e-15));

  Rng rng(9);
  Matrix yy = rng.normal_matrix(6, 5);
  Matrix mm = rng.normal_matrix(6, 5);
  Matrix vv = rng.normal_matrix(6, 5).array().exp();
  double oracle = 0.0;
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 5; ++j) {
      const double d = yy(i, j) - mm(i, j);
      oracle += -0.5 * (kLog2Pi + std::log(vv(i, j)) + d * d / vv(i, j));
    }
  CHECK(std::abs(gaussian_log_density(yy, mm, vv) - oracle) < 1e-12);

  var(0) = -1.0;
  CHECK_THROWS_AS(gaussian_log_density(y, y, var), NonPositiveVariance);
}

TEST_CASE("reparam_gaussian") {
  CHECK(reparam_gaussian(1.5, 2.0, 0.0) == 1.5);
  CHECK(reparam_gaussian(0.0, 4.0, 1.0) == 2.0);
  CHECK_THROWS_AS(reparam_gaussian(0.0, 0.0, 1.0), NonPositiveVariance);

  Rng rng(21);
  const int n = 100000;
  const double mu = -0.7, var = 2.5;
  double s = 0.0;
  for (int k = 0; k < n; ++k) s += reparam_gaussian(mu, var, rng.normal());
  CHECK(std::abs(s / n - mu) < 3.0 * std::sqrt(var / n));
}

TEST_CASE("fit_covariate_prior") {
  const CovariateSchema schema = mixed_schema();
  Matrix v(4, 2);
  v << 1, 0, 2, 1, 3, 2, 99, 3;
  BoolMatrix o = BoolMatrix::Constant(4, 2, true);
  o(3, 0) = false;
  const CovariateTable x(v, o);
  const CovariatePrior p = fit_covariate_prior(x, schema);
  CHECK(p.columns[0].mean == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(p.columns[0].variance == doctest::Approx(1.0).epsilon(1e-15));
  REQUIRE(p.columns[1].probs.size() == 4);
  for (int k = 0; k < 4; ++k) CHECK(p.columns[1].probs(k) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(std::abs(p.columns[1].probs.sum() - 1.0) < 1e-12);

  SUBCASE("mask respecting") {
    Matrix v2 = v;
    v2(3, 0) = -1234.5;
    const CovariatePrior p2 = fit_covariate_prior(CovariateTable(v2, o), schema);
    CHECK(p2.columns[0].mean == p.columns[0].mean);
    CHECK(p2.columns[0].variance == p.columns[0].variance);
  }

  SUBCASE("smoothing keeps absent categories positive") {
    Matrix w(3, 2);
    w << 0, 0, 0, 0, 0, 1;
    const CovariatePrior q = fit_covariate_prior(CovariateTable::fully_observed(w), schema);
    CHECK(q.columns[1].probs(0) == doctest::Approx(2.5 / 5.0).epsilon(1e-15));
    CHECK(q.columns[1].probs(3) == doctest::Approx(0.5 / 5.0).epsilon(1e-15));
    CHECK(q.columns[0].variance == kPriorVarianceFloor);
  }

  SUBCASE("fully missing columns fall back") {
    const CovariateTable none(v, BoolMatrix::Constant(4, 2, false));
    const CovariatePrior q = fit_covariate_prior(none, schema);
    CHECK(q.columns[0].mean == 0.0);
    CHECK(q.columns[0].variance == 1.0);
    for (int k = 0; k < 4; ++k) CHECK(q.columns[1].probs(k) == doctest::Approx(0.25).epsilon(1e-15));
  }

  SUBCASE("invalid category") {
    Matrix w = v;
    w(0, 1) = 4;
    CHECK_THROWS_AS(fit_covariate_prior(CovariateTable(w, o), schema), InvalidCategory);
    CHECK_THROWS_AS(validate_covariates(CovariateTable(w, o), schema), InvalidCategory);
  }
}

TEST_CASE("CovariateSchema invariants") {
  const CovariateSchema s = mixed_schema();
  CHECK(s.index_of("b") == 1);
  CHECK_THROWS_AS(s.index_of("zzz"), SchemaMismatch);
  CHECK(s.encoded_width() == 5);
  CHECK(!s.time_column().has_value());

  CHECK_THROWS_AS(CovariateSchema({{"c", ColumnKind::categorical, 1, {}, ColumnRole::covariate}}), SchemaMismatch);
  CHECK_THROWS_AS(CovariateSchema({{"t", ColumnKind::continuous, 0, {}, ColumnRole::time},
                                   {"u", ColumnKind::continuous, 0, {}, ColumnRole::time}}),
                  SchemaMismatch);
  CHECK_THROWS_AS(CovariateSchema({{"i", ColumnKind::categorical, 3, {}, ColumnRole::instance},
                                   {"j", ColumnKind::categorical, 3, {}, ColumnRole::instance}}),
                  SchemaMismatch);
  const CovariateSchema lon({{"t", ColumnKind::continuous, 0, {}, ColumnRole::time},
                             {"id", ColumnKind::categorical, 3, {}, ColumnRole::instance}});
  CHECK(lon.time_column() == 0);
  CHECK(lon.instance_column() == 1);
}

TEST_CASE("differentiable densities and KLs pass gradient checks") {
  using namespace mcvae::ad;
  Rng rng(4);
  ParameterSet ps;
  ps.set("mq", rng.normal_matrix(3, 2));
  ps.set("lq", 0.3 * rng.normal_matrix(3, 2));
  ps.set("mp", rng.normal_matrix(3, 2));
  ps.set("lp", 0.3 * rng.normal_matrix(3, 2));
  ps.set("y", rng.normal_matrix(3, 2));

  DifferentiableGraph diag(ps, [](Binding& b) {
    return sum(ad_dist::kl_diag_gaussian_entries(b["mq"], exp(b["lq"]), b["mp"], exp(b["lp"])));
  });
  CHECK(gradient_check(diag) < 1e-4);

  DifferentiableGraph dens(ps, [](Binding& b) {
    return sum(ad_dist::gaussian_log_density_entries(b["y"], b["mq"], ad_dist::clamp_log_variance(b["lq"])));
  });
  CHECK(gradient_check(dens) < 1e-4);

  Matrix eps = rng.normal_matrix(3, 2);
  DifferentiableGraph rep(ps, [eps](Binding& b) {
    return sum(square(ad_dist::reparam_gaussian(b["mq"], exp(b["lq"]), eps)));
  });
  CHECK(gradient_check(rep) < 1e-4);

  ParameterSet full;
  full.set("m1", rng.normal_matrix(4, 1));
  full.set("m0", rng.normal_matrix(4, 1));
  full.set("a1", rng.normal_matrix(4, 4));
  full.set("a0", rng.normal_matrix(4, 4));
  full.set("v1", rng.normal_matrix(4, 1));
  DifferentiableGraph kl_full(full, [](Binding& b) {
    Var s0 = b["a0"] * transpose(b["a0"]);
    Var eye = b.tape().constant(Matrix::Identity(4, 4));
    Var l1 = cholesky(b["a1"] * transpose(b["a1"]) + eye);
    Var l0 = cholesky(s0 + eye);
    return ad_dist::kl_gaussian_factors(b["m1"], l1, b["m0"], l0) +
           ad_dist::kl_diag_to_zero_mean(b["m1"], exp(b["v1"]), l0);
  });
  CHECK(gradient_check(kl_full) < 1e-4);
}

TEST_CASE("differentiable KLs match the scalar API") {
  using namespace mcvae::ad;
  std::mt19937_64 gen(8);
  const Matrix c1 = random_spd(gen, 4);
  const Matrix c0 = random_spd(gen, 4);
  Vector m1(4), m0(4);
  m1 << 0.1, 0.2, 0.3, 0.4;
  m0 << -1.0, 0.0, 1.0, 0.5;
  Tape t;
  Var v = ad_dist::kl_gaussian_factors(t.constant(Matrix(m1)), cholesky(t.constant(c1)), t.constant(Matrix(m0)),
                                       cholesky(t.constant(c0)));
  // Oracle through explicit inverse and determinant.
  const Vector d = m0 - m1;
  const double oracle = 0.5 * ((c0.inverse() * c1).trace() + d.dot(c0.inverse() * d) - 4.0 +
                               std::log(c0.determinant()) - std::log(c1.determinant()));
  CHECK(std::abs(v.scalar() - oracle) < 1e-10);

  Vector var(4);
  var << 0.5, 1.0, 2.0, 0.25;
  Var w = ad_dist::kl_diag_to_zero_mean(t.constant(Matrix(m1)), t.constant(Matrix(var)), cholesky(t.constant(c0)));
  CHECK(std::abs(w.scalar() - kl_full_gaussian(m1, var.asDiagonal(), Vector::Zero(4), c0)) < 1e-10);
}
