#pragma once

// Independent reference for the sampler: the unnormalized log joint density
// written directly from the model, and exact full conditionals recovered
// from it by finite differences (Gaussian blocks) or by matching the
// inverse-gamma kernel (variance parameters).

#include "smokecausal/gibbs.hpp"
#include "smokecausal/panel.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace testsupport {

using Eigen::MatrixXd;
using Eigen::VectorXd;
namespace gibbs = smokecausal::gibbs;
namespace data = smokecausal::data;

inline double mvn_logpdf(const VectorXd& x, const VectorXd& mean, const MatrixXd& cov) {
  Eigen::LLT<MatrixXd> llt(cov);
  const VectorXd z = llt.matrixL().solve(x - mean);
  const MatrixXd l = llt.matrixL();
  const double logdet = 2.0 * l.diagonal().array().log().sum();
  return -0.5 * (z.squaredNorm() + logdet + static_cast<double>(x.size()) * std::log(2 * M_PI));
}

inline double ig_logpdf(double v, double a, double b) {
  return a * std::log(b) - std::lgamma(a) - (a + 1.0) * std::log(v) - b / v;
}

inline double normal_logpdf(double x, double mean, double var) {
  return -0.5 * (std::log(2 * M_PI * var) + (x - mean) * (x - mean) / var);
}

// exp(-|s_i - s_j| / phi) from planar coordinates, element by element.
inline MatrixXd exp_corr(const data::PanelDataset& d, double phi) {
  const auto n = d.n_sites();
  MatrixXd r(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      r(i, j) = std::exp(-(d.sites.xy.row(i) - d.sites.xy.row(j)).norm() / phi);
  return r;
}

struct ModelSpec {
  data::PanelDataset data;
  double phi1 = 1.0;
  double phi2 = 1.0;
  gibbs::Priors priors;
};

// log p(y, theta, delta, bias, mu, variances, rho) with every y cell taken
// from s.y (observed or currently imputed).
inline double log_joint(const gibbs::ModelState& s, const ModelSpec& m) {
  const auto& d = m.data;
  const auto n = d.n_sites(), T = d.n_days();
  const MatrixXd r1 = exp_corr(d, m.phi1), r2 = exp_corr(d, m.phi2);
  const auto& pr = m.priors;
  double lp = 0.0;
  for (Eigen::Index t = 0; t < T; ++t) {
    VectorXd b0(n), b1(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      b0[i] = s.bias[0][i] + s.bias[1][i] * d.theta_hat(i, t);
      b1[i] = s.bias[2][i] + s.bias[3][i] * d.delta_hat(i, t);
      const double c = d.c(i, t);
      lp += normal_logpdf(s.y(i, t), s.theta(i, t) + c * s.delta(i, t), s.sigma_sq);
    }
    const VectorXd th = s.theta.col(t), de = s.delta.col(t);
    lp += mvn_logpdf(th, b0, s.s1_sq * r1);
    lp += mvn_logpdf(de, b1 + s.rho * (th - b0), s.s2_sq * r1);
  }
  for (int f = 0; f < 4; ++f) {
    lp += mvn_logpdf(s.bias[f], VectorXd::Constant(n, s.mu[f]), s.bias_var[f] * r2);
    lp += normal_logpdf(s.mu[f], 0.0, pr.mu_prior_var);
    lp += ig_logpdf(s.bias_var[f], pr.ig_shape, pr.ig_rate);
  }
  lp += ig_logpdf(s.sigma_sq, pr.ig_shape, pr.ig_rate);
  lp += ig_logpdf(s.s1_sq, pr.ig_shape, pr.ig_rate);
  lp += ig_logpdf(s.s2_sq, pr.ig_shape, pr.ig_rate);
  lp += normal_logpdf(s.rho, 0.0, pr.rho_prior_var);
  return lp;
}

struct GaussianConditional {
  VectorXd mean;
  MatrixXd cov;
};

using BlockSetter = std::function<void(gibbs::ModelState&, const VectorXd&)>;

// Exact for a log density quadratic in the block: the Hessian and gradient
// at zero come from central differences with unit steps.
inline GaussianConditional gaussian_conditional(const gibbs::ModelState& base, const ModelSpec& m,
                                                int dim, const BlockSetter& set) {
  auto f = [&](const VectorXd& x) {
    gibbs::ModelState s = base;
    set(s, x);
    return log_joint(s, m);
  };
  const double h = 1.0;
  MatrixXd prec(dim, dim);
  VectorXd grad(dim);
  for (int i = 0; i < dim; ++i) {
    VectorXd ei = VectorXd::Zero(dim);
    ei[i] = h;
    grad[i] = (f(ei) - f(-ei)) / (2 * h);
    for (int j = 0; j <= i; ++j) {
      VectorXd ej = VectorXd::Zero(dim);
      ej[j] = h;
      const double hij = (f(ei + ej) - f(ei - ej) - f(-ei + ej) + f(-ei - ej)) / (4 * h * h);
      prec(i, j) = prec(j, i) = -hij;
    }
  }
  GaussianConditional out;
  out.cov = prec.inverse();
  out.mean = out.cov * grad;
  return out;
}

struct InverseGammaConditional {
  double shape = 0.0;
  double rate = 0.0;
};

// Matches g(v) = -(a + 1) log v - b / v + const at three points.
inline InverseGammaConditional ig_conditional(const gibbs::ModelState& base, const ModelSpec& m,
                                              const std::function<void(gibbs::ModelState&, double)>& set) {
  const double v[3] = {0.5, 1.0, 2.0};
  Eigen::Matrix3d a;
  Eigen::Vector3d g;
  for (int k = 0; k < 3; ++k) {
    gibbs::ModelState s = base;
    set(s, v[k]);
    g[k] = log_joint(s, m);
    a.row(k) << -std::log(v[k]), -1.0 / v[k], 1.0;
  }
  const Eigen::Vector3d x = a.partialPivLu().solve(g);
  return {x[0] - 1.0, x[1]};
}

// Two sites, three days, mixed smoke patterns and one masked cell.
inline ModelSpec tiny_instance(bool informative_priors) {
  ModelSpec m;
  smokecausal::spatial::Coords xy(2, 2);
  xy << 0.0, 0.0, 12.0, 5.0;
  m.data.sites = smokecausal::spatial::SiteSet::from_planar({"s1", "s2"}, xy, {"r", "r"});
  m.data.theta_hat.resize(2, 3);
  m.data.theta_hat << 2.0, 3.5, 1.2, 2.6, 1.8, 3.1;
  m.data.delta_hat.resize(2, 3);
  m.data.delta_hat << 0.0, 4.0, 2.5, 3.0, 0.2, 6.0;
  m.data.tau = 1.0;
  m.data.c = data::smoke_indicator(m.data.delta_hat, 1.0);
  m.data.y.resize(2, 3);
  m.data.y << 3.1, 8.4, 4.9, 4.0, 2.2, NAN;
  m.data.missing = m.data.y.array().isNaN().cast<std::uint8_t>();
  m.phi1 = 10.0;
  m.phi2 = 20.0;
  if (informative_priors) {
    m.priors.ig_shape = 3.0;
    m.priors.ig_rate = 2.0;
    m.priors.mu_prior_var = 4.0;
    m.priors.rho_prior_var = 1.0;
  }
  return m;
}

// Fixed conditioning values for the tiny instance.
inline gibbs::ModelState tiny_state() {
  gibbs::ModelState s;
  s.theta.resize(2, 3);
  s.theta << 2.9, 4.1, 2.0, 3.3, 2.5, 3.6;
  s.delta.resize(2, 3);
  s.delta << 0.3, 3.9, 2.1, 1.2, -0.4, 5.0;
  s.bias[0] = Eigen::Vector2d(0.8, 1.1);
  s.bias[1] = Eigen::Vector2d(0.9, 0.7);
  s.bias[2] = Eigen::Vector2d(0.4, -0.2);
  s.bias[3] = Eigen::Vector2d(0.8, 0.6);
  s.rho = 0.35;
  s.s1_sq = 1.3;
  s.s2_sq = 0.7;
  s.sigma_sq = 0.45;
  s.mu = {1.0, 0.8, 0.2, 0.7};
  s.bias_var = {0.6, 0.2, 0.9, 0.3};
  s.y.resize(2, 3);
  s.y << 3.1, 8.4, 4.9, 4.0, 2.2, 9.5;
  return s;
}

struct ConditionalCheck {
  std::string name;
  double mean_z = 0.0;
  double cov_z = 0.0;
};

namespace detail {

inline VectorXd flatten(const MatrixXd& m) {
  return Eigen::Map<const VectorXd>(m.data(), m.size());
}

inline double max_abs_z_mean(const MatrixXd& draws, const GaussianConditional& g) {
  const double n = static_cast<double>(draws.rows());
  const VectorXd mean = draws.colwise().mean().transpose();
  double z = 0.0;
  for (Eigen::Index i = 0; i < mean.size(); ++i)
    z = std::max(z, std::abs(mean[i] - g.mean[i]) / std::sqrt(g.cov(i, i) / n));
  return z;
}

inline double max_abs_z_cov(const MatrixXd& draws, const GaussianConditional& g) {
  const double n = static_cast<double>(draws.rows());
  const VectorXd mean = draws.colwise().mean().transpose();
  const MatrixXd c = draws.rowwise() - mean.transpose();
  const MatrixXd cov = c.transpose() * c / (n - 1.0);
  double z = 0.0;
  for (Eigen::Index i = 0; i < cov.rows(); ++i)
    for (Eigen::Index j = 0; j < cov.cols(); ++j) {
      const auto& s = g.cov;
      const double se = std::sqrt((s(i, i) * s(j, j) + s(i, j) * s(i, j)) / n);
      z = std::max(z, std::abs(cov(i, j) - s(i, j)) / se);
    }
  return z;
}

}  // namespace detail

// Runs every full-conditional update `n_draws` times from the same
// conditioning state and compares moments with the oracle.
inline std::vector<ConditionalCheck> check_full_conditionals(const ModelSpec& m,
                                                             const gibbs::ModelState& base,
                                                             int n_draws, std::uint64_t seed) {
  using gibbs::ModelState;
  const gibbs::SamplerContext ctx(m.data, m.phi1, m.phi2, m.priors);
  std::vector<ConditionalCheck> out;
  const auto n = m.data.n_sites(), T = m.data.n_days();

  auto gaussian = [&](const std::string& name, int dim, const BlockSetter& set,
                      const std::function<void(ModelState&, const gibbs::SweepRng&)>& update,
                      const std::function<VectorXd(const ModelState&)>& get) {
    const auto oracle = gaussian_conditional(base, m, dim, set);
    MatrixXd draws(n_draws, dim);
    for (int k = 0; k < n_draws; ++k) {
      ModelState s = base;
      update(s, gibbs::SweepRng{seed, 0, static_cast<std::uint32_t>(k + 1)});
      draws.row(k) = get(s).transpose();
    }
    out.push_back({name, detail::max_abs_z_mean(draws, oracle), detail::max_abs_z_cov(draws, oracle)});
  };

  auto inverse_gamma = [&](const std::string& name,
                           const std::function<void(ModelState&, double)>& set,
                           const std::function<void(ModelState&, const gibbs::SweepRng&)>& update,
                           const std::function<double(const ModelState&)>& get) {
    const auto ig = ig_conditional(base, m, set);
    // Precision 1/v ~ Gamma(shape, rate).
    const double mu = ig.shape / ig.rate, var = ig.shape / (ig.rate * ig.rate);
    double s1 = 0.0, s2 = 0.0;
    std::vector<double> p(static_cast<std::size_t>(n_draws));
    for (int k = 0; k < n_draws; ++k) {
      ModelState s = base;
      update(s, gibbs::SweepRng{seed, 0, static_cast<std::uint32_t>(k + 1)});
      p[static_cast<std::size_t>(k)] = 1.0 / get(s);
      s1 += p[static_cast<std::size_t>(k)];
    }
    const double nd = static_cast<double>(n_draws);
    const double mean = s1 / nd;
    for (double x : p) s2 += (x - mean) * (x - mean);
    const double v = s2 / (nd - 1.0);
    const double var_se = var * std::sqrt((2.0 + 6.0 / ig.shape) / nd);
    out.push_back({name, std::abs(mean - mu) / std::sqrt(var / nd), std::abs(v - var) / var_se});
  };

  gaussian(
      "theta", static_cast<int>(n * T),
      [&](ModelState& s, const VectorXd& x) { s.theta = Eigen::Map<const MatrixXd>(x.data(), n, T); },
      [&](ModelState& s, const gibbs::SweepRng& r) { gibbs::update_theta(s, ctx, r); },
      [](const ModelState& s) { return detail::flatten(s.theta); });
  gaussian(
      "delta", static_cast<int>(n * T),
      [&](ModelState& s, const VectorXd& x) { s.delta = Eigen::Map<const MatrixXd>(x.data(), n, T); },
      [&](ModelState& s, const gibbs::SweepRng& r) { gibbs::update_delta(s, ctx, r); },
      [](const ModelState& s) { return detail::flatten(s.delta); });
  for (int f = 0; f < 4; ++f) {
    gaussian(
        std::string(gibbs::kFieldNames[f]), static_cast<int>(n),
        [f](ModelState& s, const VectorXd& x) { s.bias[f] = x; },
        [&, f](ModelState& s, const gibbs::SweepRng& r) {
          gibbs::update_bias_field(s, ctx, static_cast<gibbs::Field>(f), r);
        },
        [f](const ModelState& s) { return s.bias[f]; });
    gaussian(
        std::string("mu_") + gibbs::kFieldNames[f], 1,
        [f](ModelState& s, const VectorXd& x) { s.mu[f] = x[0]; },
        [&, f](ModelState& s, const gibbs::SweepRng& r) {
          gibbs::update_hyper_mean(s, ctx, static_cast<gibbs::Field>(f), r);
        },
        [f](const ModelState& s) { return VectorXd::Constant(1, s.mu[f]); });
    inverse_gamma(
        std::string("sig_") + gibbs::kFieldNames[f] + "_sq",
        [f](ModelState& s, double v) { s.bias_var[f] = v; },
        [&, f](ModelState& s, const gibbs::SweepRng& r) {
          gibbs::update_hyper_variance(s, ctx, static_cast<gibbs::Field>(f), r);
        },
        [f](const ModelState& s) { return s.bias_var[f]; });
  }
  gaussian(
      "rho", 1, [](ModelState& s, const VectorXd& x) { s.rho = x[0]; },
      [&](ModelState& s, const gibbs::SweepRng& r) { gibbs::update_rho(s, ctx, r); },
      [](const ModelState& s) { return VectorXd::Constant(1, s.rho); });
  inverse_gamma(
      "sigma_sq", [](ModelState& s, double v) { s.sigma_sq = v; },
      [&](ModelState& s, const gibbs::SweepRng& r) { gibbs::update_sigma_sq(s, ctx, r); },
      [](const ModelState& s) { return s.sigma_sq; });
  inverse_gamma(
      "s1_sq", [](ModelState& s, double v) { s.s1_sq = v; },
      [&](ModelState& s, const gibbs::SweepRng& r) { gibbs::update_s1_sq(s, ctx, r); },
      [](const ModelState& s) { return s.s1_sq; });
  inverse_gamma(
      "s2_sq", [](ModelState& s, double v) { s.s2_sq = v; },
      [&](ModelState& s, const gibbs::SweepRng& r) { gibbs::update_s2_sq(s, ctx, r); },
      [](const ModelState& s) { return s.s2_sq; });

  std::vector<std::pair<Eigen::Index, Eigen::Index>> cells;
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index i = 0; i < n; ++i)
      if (m.data.missing(i, t)) cells.emplace_back(i, t);
  if (!cells.empty()) {
    gaussian(
        "impute", static_cast<int>(cells.size()),
        [cells](ModelState& s, const VectorXd& x) {
          for (std::size_t k = 0; k < cells.size(); ++k)
            s.y(cells[k].first, cells[k].second) = x[static_cast<Eigen::Index>(k)];
        },
        [&](ModelState& s, const gibbs::SweepRng& r) { gibbs::impute_missing(s, ctx, r); },
        [cells](const ModelState& s) {
          VectorXd v(static_cast<Eigen::Index>(cells.size()));
          for (std::size_t k = 0; k < cells.size(); ++k)
            v[static_cast<Eigen::Index>(k)] = s.y(cells[k].first, cells[k].second);
          return v;
        });
  }
  return out;
}

}  // namespace testsupport
