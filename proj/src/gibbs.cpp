#include "smokecausal/gibbs.hpp"

#include "smokecausal/csv.hpp"
#include "smokecausal/errors.hpp"
#include "smokecausal/linalg.hpp"
#include "smokecausal/synthetic.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace smokecausal::gibbs {

namespace {

using rng::Tag;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ValidationError(msg);
}

bool positive_finite(double x) { return std::isfinite(x) && x > 0.0; }

// alpha + beta * cov, row-wise per site.
MatrixXd linear_mean(const VectorXd& alpha, const VectorXd& beta, const MatrixXd& cov) {
  MatrixXd out = cov.array().colwise() * beta.array();
  out.colwise() += alpha;
  return out;
}

MatrixXd b0(const ModelState& s, const SamplerContext& ctx) {
  return linear_mean(s.bias[kAlpha0], s.bias[kBeta0], ctx.theta_hat);
}

MatrixXd b1(const ModelState& s, const SamplerContext& ctx) {
  return linear_mean(s.bias[kAlpha1], s.bias[kBeta1], ctx.delta_hat);
}

// tr(A^T Rinv B)
double quad_trace(const MatrixXd& rinv, const MatrixXd& a, const MatrixXd& b) {
  return (a.array() * (rinv * b).array()).sum();
}

}  // namespace

void ChainConfig::validate() const {
  require(n_iter >= 1, "n_iter must be >= 1");
  require(burn_in >= 0 && burn_in < n_iter, "burn_in must satisfy 0 <= burn_in < n_iter");
  require(thin >= 1, "thin must be >= 1");
  require(positive_finite(phi1), "phi1 must be positive (estimate ranges first)");
  require(positive_finite(phi2), "phi2 must be positive (estimate ranges first)");
  require(positive_finite(priors.ig_shape) && positive_finite(priors.ig_rate),
          "inverse-gamma prior constants must be positive");
  require(positive_finite(priors.mu_prior_var), "mean prior variance must be positive");
  require(positive_finite(priors.rho_prior_var), "rho prior variance must be positive");
}

void ModelState::validate() const {
  require(positive_finite(s1_sq), "s1_sq must be positive");
  require(positive_finite(s2_sq), "s2_sq must be positive");
  require(positive_finite(sigma_sq), "sigma_sq must be positive");
  require(std::isfinite(rho), "rho must be finite");
  for (int f = 0; f < 4; ++f) {
    require(positive_finite(bias_var[f]),
            std::string("bias variance for ") + kFieldNames[f] + " must be positive");
    require(std::isfinite(mu[f]), "bias means must be finite");
    require(bias[f].allFinite(), std::string(kFieldNames[f]) + " must be finite");
  }
  require(theta.allFinite() && delta.allFinite(), "theta and delta must be finite");
}

CovarianceSummary recover_sigma_gamma(double s1_sq, double s2_sq, double rho) {
  if (!(s1_sq > 0.0) || !std::isfinite(s1_sq)) throw ValidationError("s1_sq must be > 0");
  if (!(s2_sq >= 0.0) || !std::isfinite(s2_sq)) throw ValidationError("s2_sq must be >= 0");
  CovarianceSummary out;
  out.sigma1_sq = s1_sq;
  out.sigma12 = rho * s1_sq;
  out.sigma2_sq = rho * rho * s1_sq + s2_sq;
  out.gamma = out.sigma2_sq > 0.0 ? rho * std::sqrt(s1_sq) / std::sqrt(out.sigma2_sq) : 0.0;
  out.gamma = std::clamp(out.gamma, -1.0, 1.0);
  return out;
}

LmcParams lmc_from_covariance(double sigma1_sq, double sigma2_sq, double gamma) {
  if (!(sigma1_sq > 0.0)) throw ValidationError("sigma1_sq must be > 0");
  if (!(sigma2_sq >= 0.0)) throw ValidationError("sigma2_sq must be >= 0");
  if (!(std::abs(gamma) <= 1.0)) throw ValidationError("gamma must lie in [-1, 1]");
  LmcParams out;
  out.s1_sq = sigma1_sq;
  out.rho = gamma * std::sqrt(sigma2_sq) / std::sqrt(sigma1_sq);
  out.s2_sq = sigma2_sq * (1.0 - gamma * gamma);
  return out;
}

SamplerContext::SamplerContext(const data::PanelDataset& data, double phi1_, double phi2_,
                               Priors priors_)
    : theta_hat(data.theta_hat),
      delta_hat(data.delta_hat),
      c(data.c.cast<double>()),
      missing(data.missing),
      phi1(phi1_),
      phi2(phi2_),
      priors(priors_) {
  require(data.n_sites() >= 1, "panel has no sites");
  require(data.n_days() >= 1, "panel has no days; a prior-only chain is not supported");
  const MatrixXd dist = spatial::distance_matrix(data.sites.xy);
  corr1 = spatial::exp_correlation(dist, phi1);
  corr2 = spatial::exp_correlation(dist, phi2);

  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(corr1);
  if (eig.info() != Eigen::Success || !(eig.eigenvalues().minCoeff() > 0.0)) {
    throw NumericalError(
        "error correlation matrix is not positive definite; check for duplicate site "
        "locations or reduce phi1");
  }
  corr1_eigvecs = eig.eigenvectors();
  corr1_eigvals = eig.eigenvalues();
  corr1_inv = corr1_eigvecs * corr1_eigvals.cwiseInverse().asDiagonal() *
              corr1_eigvecs.transpose();
  corr2_inv = linalg::spd_inverse(corr2, "bias-field correlation");

  theta_hat_outer = theta_hat * theta_hat.transpose();
  delta_hat_outer = delta_hat * delta_hat.transpose();
  corr2_inv_ones = corr2_inv.rowwise().sum();
  ones_corr2_inv_ones = corr2_inv_ones.sum();
}

rng::Philox4x32 SweepRng::stream(Tag tag, std::uint32_t index) const {
  const std::uint64_t key = seed ^ (static_cast<std::uint64_t>(chain_id) * 0x9E3779B97F4A7C15ULL);
  return rng::Philox4x32(key, tag, iteration, index);
}

MatrixXd background_residual(const ModelState& s, const SamplerContext& ctx) {
  return s.theta - b0(s, ctx);
}

MatrixXd fire_residual(const ModelState& s, const SamplerContext& ctx) {
  return s.delta - b1(s, ctx);
}

ModelState initial_state(const SamplerContext& ctx, const MatrixXd& y_observed) {
  const Eigen::Index n = ctx.n(), m = ctx.days();
  require(y_observed.rows() == n && y_observed.cols() == m, "observation shape mismatch");

  // Per-site minimum-norm least squares on observed days.
  MatrixXd coef = MatrixXd::Constant(n, 4, std::numeric_limits<double>::quiet_NaN());
  std::vector<bool> full_rank(n, false);
  double rss = 0.0;
  long dof = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<Eigen::Index> days;
    for (Eigen::Index t = 0; t < m; ++t)
      if (!ctx.missing(i, t)) days.push_back(t);
    if (days.empty()) continue;
    MatrixXd x(days.size(), 4);
    VectorXd y(days.size());
    for (std::size_t k = 0; k < days.size(); ++k) {
      const Eigen::Index t = days[k];
      const double c = ctx.c(i, t);
      x.row(k) << 1.0, ctx.theta_hat(i, t), c, c * ctx.delta_hat(i, t);
      y[k] = y_observed(i, t);
    }
    Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod(x);
    coef.row(i) = cod.solve(y).transpose();
    full_rank[i] = cod.rank() == 4 && x.rows() > 4;
    rss += (y - x * coef.row(i).transpose()).squaredNorm();
    dof += static_cast<long>(x.rows()) - cod.rank();
  }

  ModelState s;
  const std::array<double, 4> fallback_mu{0.0, 1.0, 0.0, 1.0};
  for (int f = 0; f < 4; ++f) {
    std::vector<double> vals;
    for (Eigen::Index i = 0; i < n; ++i)
      if (full_rank[i]) vals.push_back(coef(i, f));
    double mu = fallback_mu[f];
    double var = 1.0;
    if (!vals.empty()) {
      mu = std::accumulate(vals.begin(), vals.end(), 0.0) / vals.size();
      if (vals.size() > 1) {
        double ss = 0.0;
        for (double v : vals) ss += (v - mu) * (v - mu);
        var = ss / (vals.size() - 1);
      }
    }
    s.mu[f] = mu;
    s.bias_var[f] = std::max(var, 1e-4);
    s.bias[f] = VectorXd::Constant(n, mu);
    for (Eigen::Index i = 0; i < n; ++i)
      if (full_rank[i]) s.bias[f][i] = coef(i, f);
  }

  const double resid_var = dof > 0 ? std::max(rss / dof, 1e-3) : 1.0;
  s.sigma_sq = 0.5 * resid_var;
  s.s1_sq = 0.5 * resid_var;
  s.s2_sq = resid_var;
  s.rho = 0.0;
  s.theta = b0(s, ctx);
  s.delta = b1(s, ctx);
  s.y = y_observed;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index t = 0; t < m; ++t)
      if (ctx.missing(i, t)) s.y(i, t) = s.theta(i, t) + ctx.c(i, t) * s.delta(i, t);
  return s;
}

void update_theta(ModelState& s, const SamplerContext& ctx, const SweepRng& r) {
  const Eigen::Index n = ctx.n(), m = ctx.days();
  const double kappa = 1.0 / s.s1_sq + s.rho * s.rho / s.s2_sq;
  const MatrixXd bias0 = b0(s, ctx);
  const MatrixXd bias1 = b1(s, ctx);
  const MatrixXd prior_lin =
      bias0 / s.s1_sq + s.rho * (s.delta - bias1 + s.rho * bias0) / s.s2_sq;
  const MatrixXd& u = ctx.corr1_eigvecs;
  const VectorXd& lambda = ctx.corr1_eigvals;

  // Precision I / sigma^2 + kappa R^{-1} is diagonal in R's eigenbasis.
  MatrixXd rot = u.transpose() * ((s.y - ctx.c.cwiseProduct(s.delta)) / s.sigma_sq);
  rot += lambda.cwiseInverse().asDiagonal() * (u.transpose() * prior_lin);
  const VectorXd d = (1.0 / s.sigma_sq + kappa * lambda.cwiseInverse().array()).matrix();

  MatrixXd z(n, m);
  for (Eigen::Index t = 0; t < m; ++t) {
    auto g = r.stream(Tag::LatentTheta, static_cast<std::uint32_t>(t));
    z.col(t) = rng::normal_vector(g, n);
  }
  const MatrixXd coords = d.cwiseInverse().asDiagonal() * rot +
                          d.cwiseSqrt().cwiseInverse().asDiagonal() * z;
  s.theta = u * coords;
}

void update_delta(ModelState& s, const SamplerContext& ctx, const SweepRng& r) {
  const Eigen::Index n = ctx.n(), m = ctx.days();
  const MatrixXd prior_mean = b1(s, ctx) + s.rho * background_residual(s, ctx);
  const MatrixXd prior_lin = ctx.corr1_inv * prior_mean / s.s2_sq;
  const MatrixXd base = ctx.corr1_inv / s.s2_sq;

  std::map<std::vector<std::uint8_t>, Eigen::LLT<MatrixXd>> cache;
  for (Eigen::Index t = 0; t < m; ++t) {
    std::vector<std::uint8_t> key(n);
    for (Eigen::Index i = 0; i < n; ++i) key[i] = ctx.c(i, t) > 0.5 ? 1 : 0;
    auto it = cache.find(key);
    if (it == cache.end()) {
      MatrixXd prec = base;
      for (Eigen::Index i = 0; i < n; ++i)
        if (key[i]) prec(i, i) += 1.0 / s.sigma_sq;
      it = cache.emplace(key, linalg::cholesky_with_jitter(prec, "fire-latent precision")).first;
    }
    VectorXd b = prior_lin.col(t);
    b += (ctx.c.col(t).array() * (s.y.col(t) - s.theta.col(t)).array()).matrix() / s.sigma_sq;
    auto g = r.stream(Tag::LatentDelta, static_cast<std::uint32_t>(t));
    s.delta.col(t) = linalg::draw_from_precision(it->second, b, g);
  }
}

void update_latents(ModelState& s, const SamplerContext& ctx, const SweepRng& r) {
  update_theta(s, ctx, r);
  update_delta(s, ctx, r);
}

void update_bias_field(ModelState& s, const SamplerContext& ctx, Field f, const SweepRng& r) {
  const Eigen::Index m = ctx.days();
  const MatrixXd& rinv = ctx.corr1_inv;
  const double kappa = 1.0 / s.s1_sq + s.rho * s.rho / s.s2_sq;
  MatrixXd prec;
  VectorXd lin;

  switch (f) {
    case kAlpha0: {
      const MatrixXd u = s.theta - (ctx.theta_hat.array().colwise() * s.bias[kBeta0].array()).matrix();
      const MatrixXd v = s.delta - b1(s, ctx);
      const VectorXd sum = (u / s.s1_sq + s.rho * (s.rho * u - v) / s.s2_sq).rowwise().sum();
      prec = static_cast<double>(m) * kappa * rinv;
      lin = rinv * sum;
      break;
    }
    case kBeta0: {
      MatrixXd x = s.theta;
      x.colwise() -= s.bias[kAlpha0];
      const MatrixXd v = s.delta - b1(s, ctx);
      const MatrixXd xx = x / s.s1_sq + s.rho * (s.rho * x - v) / s.s2_sq;
      prec = kappa * rinv.cwiseProduct(ctx.theta_hat_outer);
      lin = ctx.theta_hat.cwiseProduct(rinv * xx).rowwise().sum();
      break;
    }
    case kAlpha1: {
      const MatrixXd e0 = background_residual(s, ctx);
      const MatrixXd x = s.delta -
                         (ctx.delta_hat.array().colwise() * s.bias[kBeta1].array()).matrix() -
                         s.rho * e0;
      prec = static_cast<double>(m) / s.s2_sq * rinv;
      lin = rinv * x.rowwise().sum() / s.s2_sq;
      break;
    }
    case kBeta1: {
      const MatrixXd e0 = background_residual(s, ctx);
      MatrixXd x = s.delta - s.rho * e0;
      x.colwise() -= s.bias[kAlpha1];
      prec = rinv.cwiseProduct(ctx.delta_hat_outer) / s.s2_sq;
      lin = ctx.delta_hat.cwiseProduct(rinv * x).rowwise().sum() / s.s2_sq;
      break;
    }
  }
  prec += ctx.corr2_inv / s.bias_var[f];
  lin += ctx.corr2_inv_ones * (s.mu[f] / s.bias_var[f]);
  const auto llt = linalg::cholesky_with_jitter(
      prec, std::string(kFieldNames[f]) + " full-conditional precision");
  auto g = r.stream(Tag::BiasField, static_cast<std::uint32_t>(f));
  s.bias[f] = linalg::draw_from_precision(llt, lin, g);
}

void update_bias_fields(ModelState& s, const SamplerContext& ctx, const SweepRng& r) {
  for (Field f : {kAlpha0, kBeta0, kAlpha1, kBeta1}) update_bias_field(s, ctx, f, r);
}

void update_sigma_sq(ModelState& s, const SamplerContext& ctx, const SweepRng& r) {
  const double nm = static_cast<double>(ctx.n() * ctx.days());
  const double ss = (s.y - s.theta - ctx.c.cwiseProduct(s.delta)).squaredNorm();
  auto g = r.stream(Tag::NuggetVariance);
  s.sigma_sq = rng::inverse_gamma(g, 0.5 * nm + ctx.priors.ig_shape, ctx.priors.ig_rate + 0.5 * ss);
}

void update_s1_sq(ModelState& s, const SamplerContext& ctx, const SweepRng& r) {
  const double nm = static_cast<double>(ctx.n() * ctx.days());
  const MatrixXd e0 = background_residual(s, ctx);
  const double q = quad_trace(ctx.corr1_inv, e0, e0);
  auto g = r.stream(Tag::ThetaVariance);
  s.s1_sq = rng::inverse_gamma(g, 0.5 * nm + ctx.priors.ig_shape, ctx.priors.ig_rate + 0.5 * q);
}

void update_rho(ModelState& s, const SamplerContext& ctx, const SweepRng& r) {
  const MatrixXd e0 = background_residual(s, ctx);
  const MatrixXd w = fire_residual(s, ctx);
  const MatrixXd re0 = ctx.corr1_inv * e0;
  const double q00 = (e0.array() * re0.array()).sum();
  const double q0w = (w.array() * re0.array()).sum();
  const double prec = 1.0 / ctx.priors.rho_prior_var + q00 / s.s2_sq;
  const double mean = (q0w / s.s2_sq) / prec;
  auto g = r.stream(Tag::Rho);
  s.rho = mean + rng::normal(g) / std::sqrt(prec);
}

void update_s2_sq(ModelState& s, const SamplerContext& ctx, const SweepRng& r) {
  const double nm = static_cast<double>(ctx.n() * ctx.days());
  const MatrixXd eta = fire_residual(s, ctx) - s.rho * background_residual(s, ctx);
  const double q = quad_trace(ctx.corr1_inv, eta, eta);
  auto g = r.stream(Tag::DeltaVariance);
  s.s2_sq = rng::inverse_gamma(g, 0.5 * nm + ctx.priors.ig_shape, ctx.priors.ig_rate + 0.5 * q);
}

void update_variances_and_rho(ModelState& s, const SamplerContext& ctx, const SweepRng& r) {
  update_sigma_sq(s, ctx, r);
  update_s1_sq(s, ctx, r);
  update_rho(s, ctx, r);
  update_s2_sq(s, ctx, r);
}

void update_hyper_mean(ModelState& s, const SamplerContext& ctx, Field f, const SweepRng& r) {
  const double prec = ctx.ones_corr2_inv_ones / s.bias_var[f] + 1.0 / ctx.priors.mu_prior_var;
  const double mean = (ctx.corr2_inv_ones.dot(s.bias[f]) / s.bias_var[f]) / prec;
  auto g = r.stream(Tag::HyperMean, static_cast<std::uint32_t>(f));
  s.mu[f] = mean + rng::normal(g) / std::sqrt(prec);
}

void update_hyper_variance(ModelState& s, const SamplerContext& ctx, Field f,
                           const SweepRng& r) {
  const VectorXd dev = s.bias[f].array() - s.mu[f];
  const double q = dev.dot(ctx.corr2_inv * dev);
  auto g = r.stream(Tag::HyperVariance, static_cast<std::uint32_t>(f));
  s.bias_var[f] = rng::inverse_gamma(g, 0.5 * static_cast<double>(ctx.n()) + ctx.priors.ig_shape,
                                     ctx.priors.ig_rate + 0.5 * q);
}

void update_hyperparameters(ModelState& s, const SamplerContext& ctx, const SweepRng& r) {
  for (Field f : {kAlpha0, kBeta0, kAlpha1, kBeta1}) {
    update_hyper_mean(s, ctx, f, r);
    update_hyper_variance(s, ctx, f, r);
  }
}

void impute_missing(ModelState& s, const SamplerContext& ctx, const SweepRng& r) {
  const double sd = std::sqrt(s.sigma_sq);
  for (Eigen::Index t = 0; t < ctx.days(); ++t) {
    if (!ctx.missing.col(t).any()) continue;
    auto g = r.stream(Tag::Impute, static_cast<std::uint32_t>(t));
    const VectorXd z = rng::normal_vector(g, ctx.n());
    for (Eigen::Index i = 0; i < ctx.n(); ++i)
      if (ctx.missing(i, t))
        s.y(i, t) = s.theta(i, t) + ctx.c(i, t) * s.delta(i, t) + sd * z[i];
  }
}

void sweep(ModelState& s, const SamplerContext& ctx, const SweepRng& r) {
  update_latents(s, ctx, r);
  update_bias_fields(s, ctx, r);
  update_variances_and_rho(s, ctx, r);
  update_hyperparameters(s, ctx, r);
  impute_missing(s, ctx, r);
}

RangeEstimate estimate_ranges(const data::PanelDataset& data) {
  RangeEstimate out;
  const MatrixXd dist = spatial::distance_matrix(data.sites.xy);
  const double max_dist = dist.size() > 0 ? dist.maxCoeff() : 0.0;
  const double fallback = max_dist > 0.0 ? max_dist / 3.0 : 1.0;

  auto fit = [&](const MatrixXd& field, const char* name, double& phi,
                 std::optional<spatial::VariogramFit>& slot, bool& fell_back) {
    try {
      const auto vg = spatial::empirical_variogram(field, dist);
      const auto vf = spatial::fit_range(vg);
      slot = vf;
      phi = vf.range;
      if (vf.degenerate || vf.at_lower_bound) {
        out.warnings.push_back(fmt::format(
            "{}: variogram shows no spatial structure; range {:.4g} km is at its lower bound",
            name, vf.range));
      } else if (vf.at_upper_bound) {
        out.warnings.push_back(
            fmt::format("{}: fitted range {:.4g} km is at its upper bound", name, vf.range));
      }
    } catch (const ValidationError& e) {
      phi = fallback;
      fell_back = true;
      out.warnings.push_back(fmt::format(
          "{}: variogram fit failed ({}); using one third of the maximum site distance, "
          "{:.4g} km",
          name, e.what(), fallback));
    }
  };

  fit(synth::ols_residual_field(data), "phi1", out.phi1, out.fit1, out.phi1_fallback);

  MatrixXd beta0 = MatrixXd::Constant(data.n_sites(), 1, std::numeric_limits<double>::quiet_NaN());
  for (Eigen::Index i = 0; i < data.n_sites(); ++i) {
    const MatrixXd x = data::site_design(data, i);
    if (x.rows() < 2) continue;
    const VectorXd y = data::site_response(data, i);
    beta0(i, 0) = Eigen::CompleteOrthogonalDecomposition<MatrixXd>(x).solve(y)[1];
  }
  fit(beta0, "phi2", out.phi2, out.fit2, out.phi2_fallback);

  for (const auto& w : out.warnings) spdlog::warn("{}", w);
  return out;
}

double PosteriorSamples::posterior_mean(const std::string& scalar) const {
  const auto it = scalars.find(scalar);
  if (it == scalars.end()) throw ValidationError("unknown scalar parameter: " + scalar);
  if (it->second.empty()) throw InsufficientDataError("no kept draws");
  return std::accumulate(it->second.begin(), it->second.end(), 0.0) / it->second.size();
}

namespace {

// Conditional-GP kriging quantities from sites to prediction targets.
struct TargetKernel {
  MatrixXd w1, w2;  // R^{-1} k, sites x targets
  VectorXd v1, v2;  // 1 - k^T R^{-1} k
};

TargetKernel make_target_kernel(const data::PanelDataset& data, const SamplerContext& ctx,
                                const PredictionTargets& tg) {
  const MatrixXd cross = spatial::cross_distance(data.sites.xy, tg.xy);
  const MatrixXd k1 = spatial::exp_correlation(cross, ctx.phi1);
  const MatrixXd k2 = spatial::exp_correlation(cross, ctx.phi2);
  TargetKernel tk;
  tk.w1 = ctx.corr1_inv * k1;
  tk.w2 = ctx.corr2_inv * k2;
  tk.v1 = (1.0 - k1.cwiseProduct(tk.w1).colwise().sum().array()).max(0.0).matrix().transpose();
  tk.v2 = (1.0 - k2.cwiseProduct(tk.w2).colwise().sum().array()).max(0.0).matrix().transpose();
  return tk;
}

void record_scalars(PosteriorSamples& out, const ModelState& s) {
  const auto cov = recover_sigma_gamma(s.s1_sq, s.s2_sq, s.rho);
  const std::array<double, 16> vals{s.sigma_sq,    s.s1_sq,       s.s2_sq,       s.rho,
                                    cov.sigma1_sq, cov.sigma2_sq, cov.sigma12,   cov.gamma,
                                    s.mu[0],       s.mu[1],       s.mu[2],       s.mu[3],
                                    s.bias_var[0], s.bias_var[1], s.bias_var[2], s.bias_var[3]};
  for (std::size_t k = 0; k < vals.size(); ++k) out.scalars[kScalarNames[k]].push_back(vals[k]);
}

}  // namespace

PosteriorSamples run_chain(const data::PanelDataset& data, const ChainConfig& config,
                           const PredictionTargets* targets) {
  config.validate();
  data.validate();
  const SamplerContext ctx(data, config.phi1, config.phi2, config.priors);
  MatrixXd y = data.y;
  ModelState state = initial_state(ctx, y);
  return run_chain_from(data, config, std::move(state), 0, targets);
}

PosteriorSamples run_chain_from(const data::PanelDataset& data, const ChainConfig& config,
                                ModelState state, int start_iteration,
                                const PredictionTargets* targets) {
  config.validate();
  require(start_iteration >= 0 && start_iteration <= config.n_iter,
          "start iteration outside the chain");
  state.validate();
  const SamplerContext ctx(data, config.phi1, config.phi2, config.priors);
  const Eigen::Index n = ctx.n(), m = ctx.days();
  require(state.theta.rows() == n && state.theta.cols() == m, "state does not match the panel");

  PosteriorSamples out;
  out.site_ids = data.sites.ids;
  out.phi1 = config.phi1;
  out.phi2 = config.phi2;
  const int kept = std::max(0, config.kept_draws());
  for (const auto& name : kScalarNames) out.scalars[name].reserve(kept);
  for (auto& b : out.bias_draws) b.resize(0, n);
  out.theta_mean = MatrixXd::Zero(n, m);
  out.theta_var = MatrixXd::Zero(n, m);
  out.delta_mean = MatrixXd::Zero(n, m);
  out.delta_var = MatrixXd::Zero(n, m);

  std::vector<std::vector<double>> bias_rows(4), effect_rows, theta_bar_rows;
  std::optional<TargetKernel> tk;
  MatrixXd pred_sum, pred_sq_sum;
  if (targets) {
    require(targets->theta_hat.rows() == targets->xy.rows() &&
                targets->theta_hat.cols() == m && targets->delta_hat.cols() == m &&
                targets->c.rows() == targets->xy.rows() && targets->c.cols() == m,
            "prediction targets do not match the panel");
    tk = make_target_kernel(data, ctx, *targets);
    pred_sum = MatrixXd::Zero(targets->xy.rows(), m);
    pred_sq_sum = MatrixXd::Zero(targets->xy.rows(), m);
  }

  std::optional<csv::Writer> latent_stream;
  if (config.latent_stream_path)
    latent_stream.emplace(*config.latent_stream_path,
                          std::vector<std::string>{"iter", "site_id", "day", "theta", "delta"});

  const MatrixXd& cmat = ctx.c;
  long count = 0;
  for (int it = start_iteration + 1; it <= config.n_iter; ++it) {
    const SweepRng r{config.seed, config.chain_id, static_cast<std::uint32_t>(it)};
    std::optional<ModelState> last_complete;
    if (config.checkpoint_path) last_complete = state;
    try {
      sweep(state, ctx, r);
      if (!state.theta.allFinite() || !state.delta.allFinite() || !std::isfinite(state.rho))
        throw NumericalError("non-finite latent values");
    } catch (const NumericalError& e) {
      if (config.checkpoint_path) {
        Checkpoint cp;
        cp.iteration = it - 1;
        cp.seed = config.seed;
        cp.chain_id = config.chain_id;
        cp.phi1 = config.phi1;
        cp.phi2 = config.phi2;
        cp.site_ids = data.sites.ids;
        cp.state = std::move(*last_complete);
        try {
          write_checkpoint(*config.checkpoint_path, cp);
        } catch (const std::exception& w) {
          spdlog::error("could not write checkpoint: {}", w.what());
        }
      }
      throw NumericalError(fmt::format("sampler failed at iteration {}: {}", it, e.what()));
    }
    if (!config.is_kept(it)) continue;

    ++count;
    out.iterations.push_back(it);
    record_scalars(out, state);
    for (int f = 0; f < 4; ++f)
      bias_rows[f].insert(bias_rows[f].end(), state.bias[f].data(), state.bias[f].data() + n);
    const VectorXd effect = cmat.cwiseProduct(state.delta).rowwise().mean();
    const VectorXd theta_bar = state.theta.rowwise().mean();
    effect_rows.emplace_back(effect.data(), effect.data() + n);
    theta_bar_rows.emplace_back(theta_bar.data(), theta_bar.data() + n);

    // Welford updates of the latent summaries.
    const double w = 1.0 / static_cast<double>(count);
    MatrixXd d = state.theta - out.theta_mean;
    out.theta_mean += w * d;
    out.theta_var += d.cwiseProduct(state.theta - out.theta_mean);
    d = state.delta - out.delta_mean;
    out.delta_mean += w * d;
    out.delta_var += d.cwiseProduct(state.delta - out.delta_mean);

    if (config.keep_latent_draws) {
      out.theta_draws.push_back(state.theta);
      out.delta_draws.push_back(state.delta);
    }
    if (latent_stream) {
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index t = 0; t < m; ++t) {
          *latent_stream << it << data.sites.ids[i] << static_cast<long>(t + 1)
                         << state.theta(i, t) << state.delta(i, t);
          latent_stream->end_row();
        }
    }

    if (tk) {
      const MatrixXd e0 = background_residual(state, ctx);
      const MatrixXd eta = fire_residual(state, ctx) - state.rho * e0;
      const MatrixXd e0_t = tk->w1.transpose() * e0;
      const MatrixXd eta_t = tk->w1.transpose() * eta;
      std::array<VectorXd, 4> fm, fv;
      for (int f = 0; f < 4; ++f) {
        fm[f] = (tk->w2.transpose() * (state.bias[f].array() - state.mu[f]).matrix()).array() +
                state.mu[f];
        fv[f] = state.bias_var[f] * tk->v2;
      }
      const Eigen::Index k = targets->xy.rows();
      for (Eigen::Index j = 0; j < k; ++j)
        for (Eigen::Index t = 0; t < m; ++t) {
          const double th = targets->theta_hat(j, t), dh = targets->delta_hat(j, t);
          const double c = targets->c(j, t) ? 1.0 : 0.0;
          const double mean = fm[0][j] + fm[1][j] * th + e0_t(j, t) +
                              c * (fm[2][j] + fm[3][j] * dh + state.rho * e0_t(j, t) + eta_t(j, t));
          const double one_rho = 1.0 + c * state.rho;
          const double var = fv[0][j] + th * th * fv[1][j] +
                             c * (fv[2][j] + dh * dh * fv[3][j]) +
                             one_rho * one_rho * state.s1_sq * tk->v1[j] +
                             c * state.s2_sq * tk->v1[j] + state.sigma_sq;
          pred_sum(j, t) += mean;
          pred_sq_sum(j, t) += var + mean * mean;
        }
    }
  }

  if (count > 1) {
    out.theta_var /= static_cast<double>(count - 1);
    out.delta_var /= static_cast<double>(count - 1);
  } else {
    out.theta_var.setZero();
    out.delta_var.setZero();
  }
  const auto to_matrix = [n](const std::vector<double>& flat) {
    MatrixXd mtx(static_cast<Eigen::Index>(flat.size()) / std::max<Eigen::Index>(n, 1), n);
    for (Eigen::Index r = 0; r < mtx.rows(); ++r)
      for (Eigen::Index i = 0; i < n; ++i) mtx(r, i) = flat[r * n + i];
    return mtx;
  };
  for (int f = 0; f < 4; ++f) out.bias_draws[f] = to_matrix(bias_rows[f]);
  std::vector<double> flat_e, flat_t;
  for (const auto& row : effect_rows) flat_e.insert(flat_e.end(), row.begin(), row.end());
  for (const auto& row : theta_bar_rows) flat_t.insert(flat_t.end(), row.begin(), row.end());
  out.effect_draws = to_matrix(flat_e);
  out.theta_bar_draws = to_matrix(flat_t);
  if (tk && count > 0) {
    out.pred_mean = pred_sum / static_cast<double>(count);
    out.pred_var = (pred_sq_sum / static_cast<double>(count) -
                    out.pred_mean.cwiseProduct(out.pred_mean))
                       .cwiseMax(0.0);
  }
  out.final_state = std::move(state);
  return out;
}

namespace {

nlohmann::json matrix_json(const MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> row(m.cols());
    for (Eigen::Index j = 0; j < m.cols(); ++j) row[j] = m(i, j);
    rows.push_back(row);
  }
  return rows;
}

MatrixXd json_matrix(const nlohmann::json& j) {
  const Eigen::Index r = static_cast<Eigen::Index>(j.size());
  const Eigen::Index c = r > 0 ? static_cast<Eigen::Index>(j[0].size()) : 0;
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    if (static_cast<Eigen::Index>(j[i].size()) != c) throw IoError("ragged matrix in checkpoint");
    for (Eigen::Index k = 0; k < c; ++k) m(i, k) = j[i][k].get<double>();
  }
  return m;
}

}  // namespace

// Checkpoint format (JSON, version 1): {version, iteration, seed, chain_id,
// phi1, phi2, site_ids, state: {theta, delta, y (row-major nested arrays),
// bias: {alpha0: [...], ...}, rho, s1_sq, s2_sq, sigma_sq, mu: [4],
// bias_var: [4]}}. Random streams are keyed by iteration, so the iteration
// index is the complete generator state.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& cp) {
  nlohmann::json j;
  j["version"] = cp.version;
  j["iteration"] = cp.iteration;
  j["seed"] = cp.seed;
  j["chain_id"] = cp.chain_id;
  j["phi1"] = cp.phi1;
  j["phi2"] = cp.phi2;
  j["site_ids"] = cp.site_ids;
  auto& s = j["state"];
  s["theta"] = matrix_json(cp.state.theta);
  s["delta"] = matrix_json(cp.state.delta);
  // NaN is not representable in JSON; y is complete once imputed.
  s["y"] = matrix_json(cp.state.y);
  for (int f = 0; f < 4; ++f)
    s["bias"][kFieldNames[f]] =
        std::vector<double>(cp.state.bias[f].data(), cp.state.bias[f].data() + cp.state.bias[f].size());
  s["rho"] = cp.state.rho;
  s["s1_sq"] = cp.state.s1_sq;
  s["s2_sq"] = cp.state.s2_sq;
  s["sigma_sq"] = cp.state.sigma_sq;
  s["mu"] = std::vector<double>(cp.state.mu.begin(), cp.state.mu.end());
  s["bias_var"] = std::vector<double>(cp.state.bias_var.begin(), cp.state.bias_var.end());

  std::ofstream os(path);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os << j.dump(1) << '\n';
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  Checkpoint cp;
  try {
    const auto j = nlohmann::json::parse(is);
    cp.version = j.at("version").get<int>();
    if (cp.version != 1) throw IoError("unsupported checkpoint version " + std::to_string(cp.version));
    cp.iteration = j.at("iteration").get<int>();
    cp.seed = j.at("seed").get<std::uint64_t>();
    cp.chain_id = j.at("chain_id").get<std::uint32_t>();
    cp.phi1 = j.at("phi1").get<double>();
    cp.phi2 = j.at("phi2").get<double>();
    cp.site_ids = j.at("site_ids").get<std::vector<std::string>>();
    const auto& s = j.at("state");
    cp.state.theta = json_matrix(s.at("theta"));
    cp.state.delta = json_matrix(s.at("delta"));
    cp.state.y = json_matrix(s.at("y"));
    for (int f = 0; f < 4; ++f) {
      const auto v = s.at("bias").at(kFieldNames[f]).get<std::vector<double>>();
      cp.state.bias[f] = Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
    cp.state.rho = s.at("rho").get<double>();
    cp.state.s1_sq = s.at("s1_sq").get<double>();
    cp.state.s2_sq = s.at("s2_sq").get<double>();
    cp.state.sigma_sq = s.at("sigma_sq").get<double>();
    const auto mu = s.at("mu").get<std::vector<double>>();
    const auto bv = s.at("bias_var").get<std::vector<double>>();
    if (mu.size() != 4 || bv.size() != 4) throw IoError("checkpoint hyperparameters malformed");
    std::copy(mu.begin(), mu.end(), cp.state.mu.begin());
    std::copy(bv.begin(), bv.end(), cp.state.bias_var.begin());
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint " + path.string() + ": " + e.what());
  }
  return cp;
}

}  // namespace smokecausal::gibbs
