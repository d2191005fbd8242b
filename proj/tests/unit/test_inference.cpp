#include "smokecausal/errors.hpp"
#include "smokecausal/inference.hpp"
#include "smokecausal/rng.hpp"

#include <doctest.h>

#include <cmath>

using namespace smokecausal;
using namespace smokecausal::inference;

namespace {

spatial::Coords random_coords(int n, double extent, std::uint64_t seed) {
  rng::Philox4x32 g(seed, rng::Tag::Test);
  spatial::Coords xy(n, 2);
  for (int i = 0; i < n; ++i) xy.row(i) << extent * rng::uniform(g), extent * rng::uniform(g);
  return xy;
}

}  // namespace

TEST_CASE("type-7 quantiles and credible intervals") {
  const std::vector<double> v{1, 2, 3, 4, 5};
  CHECK(quantile_sorted(v, 0.0) == 1.0);
  CHECK(quantile_sorted(v, 1.0) == 5.0);
  CHECK(quantile_sorted(v, 0.1) == doctest::Approx(1.4));
  CHECK(quantile_sorted(v, 0.5) == 3.0);

  std::vector<double> d(101);
  for (int i = 0; i <= 100; ++i) d[static_cast<std::size_t>(i)] = i;
  const auto iv = credible_interval(d, 0.9);
  CHECK(iv.lo == doctest::Approx(5.0));
  CHECK(iv.hi == doctest::Approx(95.0));
  CHECK_FALSE(iv.from_range);

  const auto small = credible_interval(v, 0.95);
  CHECK(small.from_range);
  CHECK(small.lo == 1.0);
  CHECK(small.hi == 5.0);
}

TEST_CASE("kriging interpolates exactly at sources without a nugget") {
  const auto src = random_coords(15, 100.0, 1);
  rng::Philox4x32 g(2, rng::Tag::Test);
  const Eigen::VectorXd vals = rng::normal_vector(g, 15);
  const OrdinaryKriging ok(src, src, {2.0, 25.0, 0.0});
  CHECK((ok.predict(vals) - vals).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(ok.sd().maxCoeff() < 1e-6);
  CHECK((ok.weights().rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("far from the data kriging returns the generalized least squares mean") {
  const auto src = random_coords(12, 100.0, 3);
  rng::Philox4x32 g(4, rng::Tag::Test);
  const Eigen::VectorXd vals = Eigen::VectorXd::Constant(12, 5.0) + rng::normal_vector(g, 12);
  spatial::Coords far(1, 2);
  far << 1e6, 1e6;
  const KrigingKernel k{1.5, 20.0, 0.0};
  const OrdinaryKriging ok(src, far, k);
  CHECK(std::abs(ok.predict(vals)[0] - ok.global_mean(vals)) < 1e-6);

  // Independent GLS mean.
  Eigen::MatrixXd cov(12, 12);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 12; ++j) cov(i, j) = 1.5 * std::exp(-(src.row(i) - src.row(j)).norm() / 20.0);
  const Eigen::VectorXd w = cov.llt().solve(Eigen::VectorXd::Ones(12));
  CHECK(ok.global_mean(vals) == doctest::Approx(w.dot(vals) / w.sum()).epsilon(1e-10));
  // Far-field variance is the sill plus the variance of the mean estimate.
  CHECK(ok.sd()[0] == doctest::Approx(std::sqrt(1.5 + 1.0 / w.sum())).epsilon(1e-8));
}

TEST_CASE("symmetric layouts give symmetric weights") {
  spatial::Coords src(4, 2);
  src << -1, -1, 1, -1, 1, 1, -1, 1;
  spatial::Coords tg(2, 2);
  tg << 0, 0, 0.3, 0;
  const OrdinaryKriging ok(src, tg, {1.0, 3.0, 0.1});
  for (int i = 0; i < 4; ++i) CHECK(ok.weights()(0, i) == doctest::Approx(0.25).epsilon(1e-12));
  // Mirror symmetry about the x axis.
  CHECK(ok.weights()(1, 1) == doctest::Approx(ok.weights()(1, 2)).epsilon(1e-12));
  CHECK(ok.weights()(1, 0) == doctest::Approx(ok.weights()(1, 3)).epsilon(1e-12));
}

TEST_CASE("duplicate sources are rejected or averaged") {
  spatial::Coords src(3, 2);
  src << 0, 0, 0, 0, 5, 0;
  spatial::Coords tg(1, 2);
  tg << 0, 0;
  CHECK_THROWS_AS(OrdinaryKriging(src, tg, {1.0, 2.0, 0.0}), ValidationError);
  const OrdinaryKriging ok(src, tg, {1.0, 2.0, 0.0}, DuplicatePolicy::average);
  CHECK(ok.weights().cols() == 2);
  Eigen::Vector3d v(1.0, 3.0, 10.0);
  CHECK(ok.predict(v)[0] == doctest::Approx(2.0).epsilon(1e-9));
}

TEST_CASE("kernel fitting falls back on degenerate inputs") {
  const auto src = random_coords(3, 50.0, 5);
  const auto k = fit_kernel(Eigen::Vector3d(2.0, 2.0, 2.0), src, 0.0);
  CHECK(k.sill == 1.0);
  CHECK(k.range > 0.0);
}

TEST_CASE("causal effect from latent draws uses the supplied indicator") {
  gibbs::PosteriorSamples s;
  s.site_ids = {"a", "b"};
  Eigen::MatrixXd d1(2, 2), d2(2, 2);
  d1 << 1, 3, 2, 2;
  d2 << 3, 1, 4, 6;
  s.delta_draws = {d1, d2};
  s.theta_bar_draws = Eigen::MatrixXd::Ones(2, 2);
  data::Flags c(2, 2);
  c << 1, 0, 1, 1;
  const auto e = causal_effect(s, c);
  CHECK(e.draws(0, 0) == doctest::Approx(0.5));
  CHECK(e.draws(1, 1) == doctest::Approx(5.0));
  CHECK(e.mean[0] == doctest::Approx(1.0));
  CHECK(e.sd[1] == doctest::Approx(std::sqrt(4.5)));
}

TEST_CASE("percent of total handles sign and zero totals") {
  const auto p = percent_of_total(Eigen::Vector3d(1.0, -0.5, 1.0), Eigen::Vector3d(3.0, 2.0, -1.0));
  CHECK(p[0].percent == doctest::Approx(25.0));
  CHECK(p[0].flag == PercentFlag::ok);
  CHECK(p[1].flag == PercentFlag::negative_effect);
  CHECK(p[1].percent == doctest::Approx(-100.0 * 0.5 / 1.5));
  CHECK(std::isnan(p[2].percent));
  CHECK(std::string(to_string(p[2].flag)) == "nonpositive_total");
}
