#include "smokecausal/errors.hpp"
#include "smokecausal/synthetic.hpp"
#include "support/stats.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace smokecausal;
using namespace smokecausal::synth;

namespace {

spatial::SiteSet small_sites(int n, std::uint64_t seed) {
  SiteLayout layout;
  layout.sites_per_region = n;
  layout.extent_km = 200.0;
  return simulate_sites(layout, seed);
}

}  // namespace

TEST_CASE("site layout places regions side by side with unique ids") {
  SiteLayout layout;
  layout.regions = {"A", "B"};
  layout.sites_per_region = 10;
  layout.extent_km = 100.0;
  layout.region_gap_km = 500.0;
  const auto s = simulate_sites(layout, 3);
  REQUIRE(s.size() == 20);
  CHECK(std::set<std::string>(s.ids.begin(), s.ids.end()).size() == 20);
  double max_a = -1e9, min_b = 1e9;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto x = s.xy(static_cast<Eigen::Index>(i), 0);
    if (s.regions[i] == "A") max_a = std::max(max_a, x);
    else min_b = std::min(min_b, x);
  }
  CHECK(min_b - max_a > 500.0 - 1e-6);

  const auto grid = simulate_grid(layout, 25.0, 2, s.projection);
  CHECK(grid.size() == 32);
  CHECK(std::set<std::string>(grid.county_fips.begin(), grid.county_fips.end()).size() == 8);
}

TEST_CASE("panel simulation is deterministic and satisfies the observation identity") {
  const auto sites = small_sites(6, 1);
  TrueParams p;
  CovariateConfig cfg;
  cfg.missing_fraction = 0.1;
  const auto a = simulate_panel(sites, 50, p, cfg, 9);
  const auto b = simulate_panel(sites, 50, p, cfg, 9);
  const auto c = simulate_panel(sites, 50, p, cfg, 10);
  CHECK(a.data.theta_hat == b.data.theta_hat);
  CHECK(a.eps == b.eps);
  CHECK(a.e0 != c.e0);
  CHECK(a.data.n_missing() > 0);
  for (Eigen::Index i = 0; i < 6; ++i) {
    for (Eigen::Index t = 0; t < 50; ++t) {
      if (a.data.missing(i, t)) continue;
      const double cf = a.data.c(i, t);
      const double expect = a.bias.alpha0[i] + a.bias.beta0[i] * a.data.theta_hat(i, t) +
                            a.e0(i, t) +
                            cf * (a.bias.alpha1[i] + a.bias.beta1[i] * a.data.delta_hat(i, t) +
                                  a.e1(i, t)) +
                            a.eps(i, t);
      CHECK(a.data.y(i, t) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  CHECK((a.data.theta_hat.array() > 0.0).all());
  CHECK((a.data.delta_hat.array() >= 0.0).all());
}

TEST_CASE("bias fields have the prescribed mean and exponential covariance") {
  spatial::Coords xy(2, 2);
  xy << 0, 0, 30, 40;
  const auto sites = spatial::SiteSet::from_planar({"a", "b"}, xy, {"r", "r"});
  TrueParams p;
  p.sigma_alpha0_sq = 0.5;
  p.phi2 = 100.0;
  const int n = 20000;
  Eigen::MatrixXd draws(n, 2);
  for (int k = 0; k < n; ++k)
    draws.row(k) = simulate_bias_fields(sites, p, static_cast<std::uint64_t>(k)).alpha0;
  const auto m = testsupport::moments(draws);
  Eigen::Matrix2d cov;
  const double r = std::exp(-50.0 / 100.0);
  cov << 0.5, 0.5 * r, 0.5 * r, 0.5;
  CHECK(testsupport::max_mean_z(m, Eigen::Vector2d::Constant(p.mu_alpha0), cov, n) < 4.0);
  CHECK(testsupport::max_cov_z(m, cov, n) < 4.0);
}

TEST_CASE("error process has the bivariate covariance implied by gamma") {
  spatial::Coords xy(1, 2);
  xy << 0, 0;
  const auto sites = spatial::SiteSet::from_planar({"a"}, xy, {"r"});
  TrueParams p;
  p.sigma1_sq = 2.0;
  p.sigma2_sq = 0.5;
  p.gamma = -0.6;
  const int days = 20000;
  const Eigen::MatrixXd th = Eigen::MatrixXd::Ones(1, days);
  const Eigen::MatrixXd dh = Eigen::MatrixXd::Zero(1, days);
  const auto sim = simulate_panel(sites, th, dh, p, {}, 4);
  Eigen::MatrixXd draws(days, 2);
  draws.col(0) = sim.e0.row(0).transpose();
  draws.col(1) = sim.e1.row(0).transpose();
  const auto m = testsupport::moments(draws);
  Eigen::Matrix2d cov;
  const double s12 = -0.6 * std::sqrt(2.0 * 0.5);
  cov << 2.0, s12, s12, 0.5;
  CHECK(testsupport::max_mean_z(m, Eigen::Vector2d::Zero(), cov, days) < 4.0);
  CHECK(testsupport::max_cov_z(m, cov, days) < 4.0);
}

TEST_CASE("ordinary least squares recovers noiseless coefficients") {
  const auto sites = small_sites(5, 2);
  TrueParams p;
  p.sigma1_sq = p.sigma2_sq = p.sigma_sq = p.gamma = 0.0;
  CovariateConfig cfg;
  cfg.fire_rate = 1.0;
  const auto sim = simulate_panel(sites, 120, p, cfg, 3);
  for (Eigen::Index i = 0; i < 5; ++i) {
    const auto fit = ols_mean_recovery(sim.data, i);
    const Eigen::Vector4d truth(sim.bias.alpha0[i], sim.bias.beta0[i], sim.bias.alpha1[i],
                                sim.bias.beta1[i]);
    CHECK((fit.coef - truth).cwiseAbs().maxCoeff() < 1e-8);
  }
  const auto resid = ols_residual_field(sim.data);
  CHECK(resid.cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("ordinary least squares rejects sites without smoke days") {
  const auto sites = small_sites(2, 2);
  CovariateConfig cfg;
  cfg.fire_rate = 0.0;
  const auto sim = simulate_panel(sites, 30, TrueParams{}, cfg, 3);
  CHECK_THROWS_AS(ols_mean_recovery(sim.data, 0), RankDeficientError);
  CHECK(std::isfinite(ols_residual_field(sim.data)(0, 0)));
}

TEST_CASE("invalid truth is rejected") {
  TrueParams p;
  p.gamma = 1.5;
  CHECK_THROWS_AS(p.validate(), ValidationError);
  p = TrueParams{};
  p.phi1 = 0.0;
  CHECK_THROWS_AS(p.validate(), ValidationError);
}
