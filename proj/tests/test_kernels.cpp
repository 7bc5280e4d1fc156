#include <cmath>

#include <Eigen/Eigenvalues>

#include "doctest.h"
#include "mcvae/kernels.hpp"
#include "mcvae/random.hpp"

using namespace mcvae;

namespace {

CovariateSchema mixed_schema() {
  return CovariateSchema({{"rot", ColumnKind::continuous, 0, {}, ColumnRole::covariate},
                          {"shift", ColumnKind::continuous, 0, {}, ColumnRole::covariate},
                          {"grp", ColumnKind::categorical, 3, {}, ColumnRole::covariate}});
}

KernelSpec mixed_spec(int latent_dims = 2) {
  return KernelSpec({{{"rot", "shift"}, {}, {}, {}}, {{"rot"}, {"grp"}, {}, {}}, {{}, {"grp"}, {}, {}}},
                    latent_dims, mixed_schema());
}

Matrix random_rows(Rng& rng, Index n) {
  Matrix x(n, 3);
  for (Index i = 0; i < n; ++i) {
    x(i, 0) = rng.normal();
    x(i, 1) = rng.normal();
    x(i, 2) = static_cast<double>(rng.index(3));
  }
  return x;
}

void randomise(KernelSpec& spec, Rng& rng) {
  for (auto& [name, m] : spec.theta.items()) {
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = 0.4 * rng.normal();
  }
}

// k(x_i, x_j) from the scalar kernels, one pair at a time.
double pair_oracle(const KernelSpec& spec, int l, const Matrix& a, Index i, const Matrix& b, Index j) {
  double total = 0.0;
  for (int r = 0; r < spec.size(); ++r) {
    const auto& c = spec.components[static_cast<std::size_t>(r)];
    const double log_var = spec.theta.at(KernelSpec::variance_key(l, r))(0, 0);
    double k = std::exp(log_var);
    if (!c.continuous_index.empty()) {
      Vector xi(c.continuous_index.size()), xj(c.continuous_index.size());
      for (std::size_t q = 0; q < c.continuous_index.size(); ++q) {
        xi(static_cast<Index>(q)) = a(i, c.continuous_index[q]);
        xj(static_cast<Index>(q)) = b(j, c.continuous_index[q]);
      }
      k = se_kernel(xi, xj, spec.theta.at(KernelSpec::lengthscale_key(l, r)).transpose(), log_var);
    }
    for (int q : c.categorical_index) {
      k *= categorical_kernel(static_cast<int>(a(i, q)), static_cast<int>(b(j, q)), 3);
    }
    total += k;
  }
  return total;
}

}  // namespace

TEST_CASE("se_kernel") {
  Vector x(2), ls = Vector::Zero(2);
  x << 0.3, -0.4;
  CHECK(se_kernel(x, x, ls, std::log(2.5)) == doctest::Approx(2.5).epsilon(1e-15));

  Vector a(1), b(1), one_ls = Vector::Zero(1);
  a << 1.0;
  b << 2.0;
  CHECK(se_kernel(a, b, one_ls, 0.0) == doctest::Approx(0.60653065971263342).epsilon(1e-12));
  CHECK(se_kernel(a, b, one_ls, 0.0) == se_kernel(b, a, one_ls, 0.0));

  b << 21.0;
  CHECK(se_kernel(a, b, one_ls, 0.0) < 1e-80);

  CHECK_THROWS_AS(se_kernel(x, a, ls, 0.0), DimensionMismatch);
}

TEST_CASE("categorical_kernel and products") {
  CHECK(categorical_kernel(2, 2, 3) == 1.0);
  CHECK(categorical_kernel(0, 1, 3) == 0.0);
  CHECK_THROWS_AS(categorical_kernel(3, 0, 3), InvalidCategory);

  const KernelSpec spec({{{"rot"}, {"grp"}, {}, {}}}, 1, mixed_schema());
  Matrix x(3, 3);
  x << 0.0, 0.0, 1, 0.5, 0.0, 1, 0.5, 0.0, 2;
  const Matrix k = gram(spec, 0, x, false);
  Vector r0(1), r1(1);
  r0 << 0.0;
  r1 << 0.5;
  CHECK(k(0, 1) == doctest::Approx(se_kernel(r0, r1, Vector::Zero(1), 0.0)).epsilon(1e-14));
  CHECK(k(0, 2) == 0.0);
  CHECK(k(1, 2) == 0.0);
  CHECK(spec.components[0].form() == KernelForm::product);

  Matrix bad = x;
  bad(1, 2) = 0.5;
  CHECK_THROWS_AS(gram(spec, 0, bad, false), InvalidCategory);
}

TEST_CASE("gram examples") {
  const KernelSpec se({{{"rot"}, {}, {}, {}}}, 1, mixed_schema());
  Matrix one(1, 3);
  one << 0.7, 0.1, 0;
  const Matrix k = gram(se, 0, one, false);
  REQUIRE(k.rows() == 1);
  CHECK(k(0, 0) == 1.0);

  Rng rng(1);
  KernelSpec spec = mixed_spec();
  randomise(spec, rng);
  const Matrix x = random_rows(rng, 6);
  for (int l = 0; l < 2; ++l) {
    const Matrix k0 = gram(spec, l, x, false);
    const Matrix kn = gram(spec, l, x, true);
    const double noise = std::exp(spec.theta.at(KernelSpec::noise_key(l))(0, 0));
    CHECK((kn - k0 - noise * Matrix::Identity(6, 6)).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((k0 - k0.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
    for (Index i = 0; i < 6; ++i)
      for (Index j = 0; j < 6; ++j) CHECK(std::abs(k0(i, j) - pair_oracle(spec, l, x, i, x, j)) < 1e-12);
    ad::Tape t;
    CHECK_NOTHROW(ad::cholesky(t.constant(kn)));
  }

  const Matrix y = random_rows(rng, 4);
  const Matrix kxy = gram(spec, 1, x, y);
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 4; ++j) CHECK(std::abs(kxy(i, j) - pair_oracle(spec, 1, x, i, y, j)) < 1e-12);

  CHECK_THROWS_AS(gram(spec, 0, x, Matrix(random_rows(rng, 2).leftCols(2))), DimensionMismatch);
  CHECK_THROWS_AS(gram(spec, 2, x, false), DimensionMismatch);
}

TEST_CASE("gram is PSD and additive over components") {
  Rng rng(2);
  for (int trial = 0; trial < 25; ++trial) {
    KernelSpec spec = mixed_spec(1);
    randomise(spec, rng);
    const Index n = 2 + static_cast<Index>(rng.index(11));
    const Matrix x = random_rows(rng, n);
    const Matrix k = gram(spec, 0, x, false);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(k);
    CHECK(eig.eigenvalues().minCoeff() >= -1e-8);

    Matrix summed = Matrix::Zero(n, n);
    for (int r = 0; r < spec.size(); ++r) summed += gram_components(spec, spec.theta, 0, x, x, {r});
    CHECK((summed - k).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("gram_bundle") {
  Rng rng(3);
  KernelSpec spec = mixed_spec(1);
  randomise(spec, rng);

  SUBCASE("inducing rows equal to data rows") {
    const Matrix x = random_rows(rng, 5);
    const GramBundle g = gram_bundle(spec, 0, x, x);
    const Matrix kxx = gram(spec, 0, x, false);
    const Vector raw = (kxx - g.kxs * g.kss.inverse() * g.kxs.transpose()).diagonal();
    CHECK(raw.cwiseAbs().maxCoeff() <= 1e-8);
    CHECK(g.nystrom_diag.maxCoeff() <= 1e-8);
    CHECK(g.nystrom_diag.minCoeff() >= 0.0);
  }

  SUBCASE("one far inducing point") {
    const KernelSpec se({{{"rot", "shift"}, {}, {}, {}}}, 1, mixed_schema());
    const Matrix x = random_rows(rng, 6);
    Matrix s(1, 3);
    s << 40.0, 40.0, 0;
    const GramBundle g = gram_bundle(se, 0, x, s);
    CHECK((g.nystrom_diag - g.kxx_diag).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("dense oracle and dominance") {
    for (int trial = 0; trial < 10; ++trial) {
      const Matrix x = random_rows(rng, 8);
      const Matrix s = random_rows(rng, 3);
      const GramBundle g = gram_bundle(spec, 0, x, s);
      const Matrix kxx = gram(spec, 0, x, false);
      const Vector dense = (kxx - g.kxs * g.kss.inverse() * g.kxs.transpose()).diagonal();
      CHECK((dense.cwiseMax(0.0) - g.nystrom_diag).cwiseAbs().maxCoeff() < 1e-8);
      CHECK((g.kxx_diag - kxx.diagonal()).cwiseAbs().maxCoeff() < 1e-14);
      CHECK((g.nystrom_diag.array() <= g.kxx_diag.array() + 1e-8).all());
      CHECK((g.kss - g.kss.transpose()).cwiseAbs().maxCoeff() == 0.0);
    }
  }

  CHECK_THROWS_AS(gram_bundle(spec, 0, random_rows(rng, 3), Matrix(0, 3)), DimensionMismatch);
}

TEST_CASE("longitudinal index and blocks") {
  const CovariateSchema schema({{"t", ColumnKind::continuous, 0, {}, ColumnRole::time},
                                {"id", ColumnKind::categorical, 4, {}, ColumnRole::instance}});
  Matrix v(5, 2);
  v << 0.3, 2, 0.1, 0, 0.5, 2, 0.2, 0, 0.4, 1;
  const CovariateTable x = CovariateTable::fully_observed(v);
  const std::vector<int> order = canonical_order(x, schema);
  CHECK(order == std::vector<int>{1, 3, 4, 0, 2});
  CHECK_THROWS_AS(build_longitudinal_index(x, schema), DataError);

  const CovariateTable sorted = x.select_rows(order);
  const LongitudinalIndex idx = build_longitudinal_index(sorted, schema);
  CHECK(idx.instances() == 3);
  CHECK(idx.count == std::vector<int>{2, 1, 2});
  CHECK(idx.instance_ids == std::vector<int>{0, 1, 2});
  CHECK(idx.rows_of(2) == std::vector<int>{3, 4});

  SUBCASE("single instance without shared components") {
    const KernelSpec spec({{{"t"}, {"id"}, {}, {}}}, 1, schema, 0);
    Matrix w(3, 2);
    w << 0.0, 1, 0.4, 1, 0.9, 1;
    const CovariateTable one = CovariateTable::fully_observed(w);
    const LongitudinalBlocks b = longitudinal_blocks(spec, spec.theta, 0, build_longitudinal_index(one, schema), w, w);
    REQUIRE(b.sigma_factors.size() == 1);
    const Matrix& l = b.sigma_factors[0];
    CHECK((l * l.transpose() - gram(spec, 0, w, true)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(b.shared_cross[0].size() == 0);
    CHECK(b.shared_inducing.size() == 0);
  }

  SUBCASE("block-diagonal assembly") {
    Rng rng(6);
    KernelSpec spec({{{"t"}, {}, {}, {}}, {{"t"}, {"id"}, {}, {}}}, 1, schema, 1);
    randomise(spec, rng);
    const Matrix& xs = sorted.values;
    Matrix s(2, 2);
    s << 0.15, 0, 0.45, 2;
    const LongitudinalBlocks b = longitudinal_blocks(spec, spec.theta, 0, idx, xs, s);
    Matrix dense = gram_components(spec, spec.theta, 0, xs, xs, {1});
    dense.diagonal().array() += std::exp(spec.theta.at(KernelSpec::noise_key(0))(0, 0));
    Matrix assembled = Matrix::Zero(5, 5);
    double logdet_sum = 0.0;
    for (int p = 0; p < idx.instances(); ++p) {
      const Matrix& l = b.sigma_factors[static_cast<std::size_t>(p)];
      assembled.block(idx.start[p], idx.start[p], idx.count[p], idx.count[p]) = l * l.transpose();
      logdet_sum += 2.0 * l.diagonal().array().log().sum();
      CHECK((b.shared_cross[static_cast<std::size_t>(p)] -
             gram_components(spec, spec.theta, 0, xs.middleRows(idx.start[p], idx.count[p]), s, {0}))
                .cwiseAbs()
                .maxCoeff() < 1e-14);
    }
    CHECK((assembled - dense).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs(logdet_sum - std::log(dense.determinant())) < 1e-10);
  }
}

TEST_CASE("kernel hyperparameters are differentiable") {
  Rng rng(7);
  KernelSpec spec = mixed_spec(2);
  randomise(spec, rng);
  const Matrix x = random_rows(rng, 5);
  const Matrix s = random_rows(rng, 3);
  ad::ParameterSet ps = spec.theta;
  ps.set("xc", x.leftCols(2));
  const Matrix w = rng.normal_matrix(5, 5);
  ad::DifferentiableGraph g(ps, [&spec, w, s, x](ad::Binding& b) {
    ad::Tape& t = b.tape();
    ad::Var xv = ad::hconcat({b["xc"], t.constant(Matrix(x.rightCols(1)))});
    ad::Var k = ad_kernel::gram(spec, 1, b, xv, true);
    ad::Var c = ad_kernel::cross(spec, 0, b, xv, t.constant(s));
    return ad::sum(ad::cwise_mul(k, t.constant(w))) + ad::sum(ad::square(c));
  });
  CHECK(ad::gradient_check(g) < 1e-4);
}
