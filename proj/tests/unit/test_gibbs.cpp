#include "smokecausal/errors.hpp"
#include "smokecausal/gibbs.hpp"
#include "smokecausal/rng.hpp"
#include "smokecausal/synthetic.hpp"
#include "support/model_oracle.hpp"
#include "support/stats.hpp"
#include "support/tempdir.hpp"

#include <doctest.h>

#include <cmath>

using namespace smokecausal;
using namespace smokecausal::gibbs;

namespace {

synth::SimulatedPanel small_panel(int n_sites, int n_days, std::uint64_t seed,
                                  double missing_fraction = 0.0) {
  synth::SiteLayout layout;
  layout.sites_per_region = n_sites;
  layout.extent_km = 200.0;
  const auto sites = synth::simulate_sites(layout, seed);
  synth::CovariateConfig cfg;
  cfg.fire_rate = 0.6;
  cfg.missing_fraction = missing_fraction;
  return synth::simulate_panel(sites, n_days, synth::TrueParams{}, cfg, seed);
}

ChainConfig short_chain(int n_iter, int burn_in, int thin) {
  ChainConfig c;
  c.n_iter = n_iter;
  c.burn_in = burn_in;
  c.thin = thin;
  c.seed = 17;
  c.phi1 = 40.0;
  c.phi2 = 150.0;
  return c;
}

}  // namespace

TEST_CASE("full conditionals match the log-joint oracle") {
  const auto m = testsupport::tiny_instance(true);
  const auto checks = testsupport::check_full_conditionals(m, testsupport::tiny_state(), 20000, 3);
  CHECK(checks.size() == 19);
  for (const auto& c : checks) {
    INFO(c.name);
    CHECK(c.mean_z < 4.5);
    CHECK(c.cov_z < 4.5);
  }
}

TEST_CASE("oracle detects a perturbed conditional") {
  // Sanity check of the oracle itself: shifting the state after the draw
  // must be caught.
  const auto m = testsupport::tiny_instance(true);
  const auto base = testsupport::tiny_state();
  const auto oracle = testsupport::gaussian_conditional(
      base, m, 1, [](ModelState& s, const Eigen::VectorXd& x) { s.rho = x[0]; });
  const SamplerContext ctx(m.data, m.phi1, m.phi2, m.priors);
  std::vector<double> draws;
  for (int k = 0; k < 5000; ++k) {
    ModelState s = base;
    update_rho(s, ctx, SweepRng{1, 0, static_cast<std::uint32_t>(k + 1)});
    draws.push_back(s.rho + 0.1 * std::sqrt(oracle.cov(0, 0)));
  }
  const double z = std::abs(testsupport::mean(draws) - oracle.mean[0]) /
                   std::sqrt(oracle.cov(0, 0) / 5000.0);
  CHECK(z > 4.0);
}

TEST_CASE("coregionalization parameters round trip") {
  rng::Philox4x32 g(11, rng::Tag::Test);
  for (int k = 0; k < 2000; ++k) {
    const double s1 = 0.01 + 5.0 * rng::uniform(g);
    const double s2 = 0.01 + 5.0 * rng::uniform(g);
    const double gam = 2.0 * rng::uniform(g) - 1.0;
    const auto lmc = lmc_from_covariance(s1, s2, gam);
    const auto back = recover_sigma_gamma(lmc.s1_sq, lmc.s2_sq, lmc.rho);
    CHECK(back.sigma1_sq == doctest::Approx(s1).epsilon(1e-12));
    CHECK(back.sigma2_sq == doctest::Approx(s2).epsilon(1e-12));
    CHECK(std::abs(back.gamma - gam) < 1e-12);
    CHECK(back.sigma12 == doctest::Approx(gam * std::sqrt(s1 * s2)).epsilon(1e-12));
  }
  const auto big = recover_sigma_gamma(1.0, 1e-30, 1e6);
  CHECK(std::abs(big.gamma) <= 1.0);
  CHECK_THROWS_AS(recover_sigma_gamma(0.0, 1.0, 0.0), ValidationError);
}

TEST_CASE("chain schedule and validation") {
  ChainConfig c;
  c.phi1 = c.phi2 = 1.0;
  CHECK(c.kept_draws() == 250);
  int kept = 0;
  for (int it = 1; it <= c.n_iter; ++it) kept += c.is_kept(it) ? 1 : 0;
  CHECK(kept == 250);
  CHECK_NOTHROW(c.validate());
  c.burn_in = c.n_iter;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = ChainConfig{};
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("a panel without days is rejected") {
  auto sim = small_panel(3, 5, 1);
  data::PanelDataset empty = sim.data;
  empty.y.resize(3, 0);
  empty.theta_hat.resize(3, 0);
  empty.delta_hat.resize(3, 0);
  empty.c.resize(3, 0);
  empty.missing.resize(3, 0);
  CHECK_THROWS_AS(SamplerContext(empty, 1.0, 1.0, {}), ValidationError);
}

TEST_CASE("chains are reproducible and resumable bit for bit") {
  const auto sim = small_panel(6, 40, 2, 0.05);
  const auto cfg = short_chain(60, 10, 5);
  const auto a = run_chain(sim.data, cfg);
  const auto b = run_chain(sim.data, cfg);
  CHECK(a.size() == 10);
  CHECK(a.scalars.at("gamma") == b.scalars.at("gamma"));
  CHECK(a.effect_draws == b.effect_draws);

  auto other = cfg;
  other.chain_id = 1;
  CHECK(run_chain(sim.data, other).scalars.at("gamma") != a.scalars.at("gamma"));

  testsupport::TempDir dir;
  auto first = cfg;
  first.n_iter = 30;
  const auto head = run_chain(sim.data, first);
  Checkpoint cp;
  cp.iteration = 30;
  cp.seed = cfg.seed;
  cp.phi1 = cfg.phi1;
  cp.phi2 = cfg.phi2;
  cp.site_ids = sim.data.sites.ids;
  cp.state = head.final_state;
  write_checkpoint(dir / "cp.json", cp);
  const auto back = read_checkpoint(dir / "cp.json");
  CHECK(back.state.theta == cp.state.theta);
  CHECK(back.state.mu == cp.state.mu);
  CHECK(back.iteration == 30);

  const auto tail = run_chain_from(sim.data, cfg, back.state, back.iteration);
  REQUIRE(tail.size() == 6);
  for (std::size_t k = 0; k < tail.size(); ++k) {
    CHECK(tail.iterations[k] == a.iterations[k + 4]);
    CHECK(tail.scalars.at("sigma_sq")[k] == a.scalars.at("sigma_sq")[k + 4]);
    CHECK(tail.scalars.at("mu_beta1")[k] == a.scalars.at("mu_beta1")[k + 4]);
  }
  CHECK(tail.final_state.delta == a.final_state.delta);
}

TEST_CASE("effect draws are the time average of C times delta") {
  const auto sim = small_panel(4, 20, 3);
  auto cfg = short_chain(12, 2, 5);
  cfg.keep_latent_draws = true;
  const auto out = run_chain(sim.data, cfg);
  REQUIRE(out.size() == 2);
  REQUIRE(out.delta_draws.size() == 2);
  const Eigen::MatrixXd c = sim.data.c.cast<double>();
  for (std::size_t k = 0; k < 2; ++k) {
    const Eigen::VectorXd e = c.cwiseProduct(out.delta_draws[k]).rowwise().mean();
    CHECK((e.transpose() - out.effect_draws.row(static_cast<Eigen::Index>(k))).norm() < 1e-12);
    const Eigen::VectorXd tb = out.theta_draws[k].rowwise().mean();
    CHECK((tb.transpose() - out.theta_bar_draws.row(static_cast<Eigen::Index>(k))).norm() < 1e-12);
  }
  const Eigen::MatrixXd mean = 0.5 * (out.delta_draws[0] + out.delta_draws[1]);
  CHECK((mean - out.delta_mean).norm() < 1e-10);
}

TEST_CASE("imputed cells follow the observation model") {
  // Imputation at one fixed state: y ~ N(theta + C delta, sigma^2).
  const auto sim = small_panel(3, 10, 4, 0.3);
  const SamplerContext ctx(sim.data, 40.0, 150.0, {});
  ModelState s = initial_state(ctx, sim.data.y);
  s.sigma_sq = 0.8;
  Eigen::Index mi = -1, mt = -1;
  for (Eigen::Index i = 0; i < 3 && mi < 0; ++i)
    for (Eigen::Index t = 0; t < 10; ++t)
      if (sim.data.missing(i, t)) {
        mi = i;
        mt = t;
        break;
      }
  REQUIRE(mi >= 0);
  const double mean = s.theta(mi, mt) + ctx.c(mi, mt) * s.delta(mi, mt);
  std::vector<double> draws;
  for (int k = 0; k < 4000; ++k) {
    ModelState w = s;
    impute_missing(w, ctx, SweepRng{5, 0, static_cast<std::uint32_t>(k + 1)});
    draws.push_back(w.y(mi, mt));
    for (Eigen::Index i = 0; i < 3; ++i)
      for (Eigen::Index t = 0; t < 10; ++t)
        if (!sim.data.missing(i, t)) REQUIRE(w.y(i, t) == sim.data.y(i, t));
  }
  const double p = testsupport::ks_pvalue(
      draws, [&](double x) { return testsupport::normal_cdf(x, mean, std::sqrt(0.8)); });
  CHECK(p > 0.001);
}

TEST_CASE("range estimation returns positive ranges and falls back on tiny panels") {
  const auto sim = small_panel(20, 60, 5);
  const auto r = estimate_ranges(sim.data);
  CHECK(r.phi1 > 0.0);
  CHECK(r.phi2 > 0.0);
  const auto tiny = small_panel(2, 8, 6);
  const auto rt = estimate_ranges(tiny.data);
  CHECK(rt.phi1_fallback);
  CHECK(rt.phi1 > 0.0);
}

TEST_CASE("posterior predictions at a monitor reproduce its observations closely") {
  const auto sim = small_panel(8, 30, 7);
  auto cfg = short_chain(300, 100, 5);
  PredictionTargets tg;
  tg.xy = sim.data.sites.xy.topRows(1);
  tg.theta_hat = sim.data.theta_hat.topRows(1);
  tg.delta_hat = sim.data.delta_hat.topRows(1);
  tg.c = sim.data.c.topRows(1);
  const auto out = run_chain(sim.data, cfg, &tg);
  REQUIRE(out.pred_mean.rows() == 1);
  // At a monitor the kriging terms collapse onto the site's own latents.
  const Eigen::MatrixXd c = sim.data.c.cast<double>();
  const Eigen::RowVectorXd latent_mean =
      out.theta_mean.row(0) + c.row(0).cwiseProduct(out.delta_mean.row(0));
  CHECK((out.pred_mean.row(0) - latent_mean).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((out.pred_var.row(0).array() > 0.0).all());
}

TEST_CASE("tiny nugget with smoke everywhere pins theta plus delta to the data") {
  auto sim = small_panel(3, 6, 8);
  sim.data.delta_hat.array() += 20.0;
  sim.data.c = data::smoke_indicator(sim.data.delta_hat, 1.0);
  const SamplerContext ctx(sim.data, 40.0, 150.0, {});
  ModelState s = initial_state(ctx, sim.data.y);
  s.sigma_sq = 1e-8;
  update_latents(s, ctx, SweepRng{1, 0, 1});
  CHECK((s.theta + s.delta - sim.data.y).cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("zero residuals give the inverse-gamma mean for the nugget") {
  const auto sim = small_panel(5, 40, 9);
  const SamplerContext ctx(sim.data, 40.0, 150.0, {});
  ModelState s = initial_state(ctx, sim.data.y);
  s.y = s.theta + ctx.c.cwiseProduct(s.delta);
  const double nm = 5.0 * 40.0;
  std::vector<double> draws;
  for (int k = 0; k < 20000; ++k) {
    ModelState w = s;
    update_sigma_sq(w, ctx, SweepRng{2, 0, static_cast<std::uint32_t>(k + 1)});
    draws.push_back(w.sigma_sq);
  }
  const double a = nm / 2 + 0.1, b = 0.1;
  const double mean = b / (a - 1.0), sd = mean / std::sqrt(a - 2.0);
  CHECK(std::abs(testsupport::mean(draws) - mean) < 4.0 * sd / std::sqrt(20000.0));
}

TEST_CASE("single-site bias field matches the scalar conjugate update") {
  auto sim = small_panel(1, 12, 10);
  const SamplerContext ctx(sim.data, 40.0, 150.0, {});
  ModelState s = initial_state(ctx, sim.data.y);
  s.rho = 0.3;
  s.s2_sq = 0.6;
  s.s1_sq = 1.1;
  s.mu[kAlpha1] = 0.4;
  s.bias_var[kAlpha1] = 0.5;
  s.delta.array() += 0.7;
  double sum = 0.0;
  for (Eigen::Index t = 0; t < 12; ++t) {
    const double e0 = s.theta(0, t) - s.bias[kAlpha0][0] - s.bias[kBeta0][0] * ctx.theta_hat(0, t);
    sum += s.delta(0, t) - s.bias[kBeta1][0] * ctx.delta_hat(0, t) - s.rho * e0;
  }
  const double prec = 12.0 / 0.6 + 1.0 / 0.5;
  const double mean = (sum / 0.6 + 0.4 / 0.5) / prec;
  std::vector<double> draws;
  for (int k = 0; k < 20000; ++k) {
    ModelState w = s;
    update_bias_field(w, ctx, kAlpha1, SweepRng{3, 0, static_cast<std::uint32_t>(k + 1)});
    draws.push_back(w.bias[kAlpha1][0]);
  }
  const double sd = 1.0 / std::sqrt(prec);
  CHECK(std::abs(testsupport::mean(draws) - mean) < 4.0 * sd / std::sqrt(20000.0));
  CHECK(std::sqrt(testsupport::variance(draws)) == doctest::Approx(sd).epsilon(0.03));
}

TEST_CASE("hyper mean without field information has the prior spread") {
  const auto sim = small_panel(2, 5, 11);
  Priors pr;
  const SamplerContext ctx(sim.data, 40.0, 150.0, pr);
  ModelState s = initial_state(ctx, sim.data.y);
  s.bias_var[kBeta0] = 1e12;
  std::vector<double> draws;
  for (int k = 0; k < 20000; ++k) {
    ModelState w = s;
    update_hyper_mean(w, ctx, kBeta0, SweepRng{4, 0, static_cast<std::uint32_t>(k + 1)});
    draws.push_back(w.mu[kBeta0]);
  }
  CHECK(std::sqrt(testsupport::variance(draws)) == doctest::Approx(100.0).epsilon(0.03));
}

TEST_CASE("with every observation masked the background latent follows its prior mean") {
  auto sim = small_panel(3, 5, 12);
  sim.data.missing.setOnes();
  sim.data.y.setConstant(std::numeric_limits<double>::quiet_NaN());
  auto cfg = short_chain(8000, 1000, 5);
  cfg.priors.ig_shape = 3.0;
  cfg.priors.ig_rate = 2.0;
  cfg.priors.mu_prior_var = 4.0;
  cfg.keep_latent_draws = true;
  const auto out = run_chain(sim.data, cfg);
  std::vector<double> e0;
  for (std::size_t k = 0; k < out.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    Eigen::MatrixXd b0 = sim.data.theta_hat.array().colwise() *
                         out.bias_draws[kBeta0].row(r).transpose().array();
    b0.colwise() += out.bias_draws[kAlpha0].row(r).transpose();
    e0.push_back((out.theta_draws[k] - b0).mean());
  }
  const double se = testsupport::batch_mean_se(e0, 20);
  CHECK(std::abs(testsupport::mean(e0)) < 4.0 * se + 1e-3);
}
