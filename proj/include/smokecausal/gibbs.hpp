#pragma once

// Gibbs sampler for the fire/no-fire downscaler.
//
// Model, per day t over n sites:
//   y_t        ~ N(theta_t + C_t delta_t, sigma^2 I)
//   theta_t    ~ N(alpha0 + beta0 * theta_hat_t, s1^2 R1)
//   delta_t    ~ N(alpha1 + beta1 * delta_hat_t + rho (theta_t - B0_t), s2^2 R1)
//   field f    ~ N(mu_f 1, sigma_f^2 R2)   for f in {alpha0, beta0, alpha1, beta1}
// with R_k = exp(-D / phi_k). The (s1^2, rho, s2^2) coordinates are the
// coregionalization form of the bivariate error covariance; see
// recover_sigma_gamma for the map back to (sigma1^2, sigma2^2, gamma).
//
// One sweep updates, in order: latents (theta then delta, per day), the four
// bias fields, sigma^2, s1^2, rho, s2^2, the bias-field means and variances,
// then imputes masked observations. Random draws come from counter-based
// streams keyed by (seed, chain, update, iteration, index), so a chain is
// bit-reproducible and resumable from any checkpointed iteration.

#include "smokecausal/panel.hpp"
#include "smokecausal/rng.hpp"
#include "smokecausal/spatial.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace smokecausal::gibbs {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum Field : int { kAlpha0 = 0, kBeta0 = 1, kAlpha1 = 2, kBeta1 = 3 };
inline constexpr std::array<const char*, 4> kFieldNames{"alpha0", "beta0", "alpha1", "beta1"};

struct Priors {
  double ig_shape = 0.1;         // every inverse-gamma prior
  double ig_rate = 0.1;
  double mu_prior_var = 1.0e4;   // N(0, 100^2) on the bias-field means
  double rho_prior_var = 100.0;  // N(0, 100) on rho
  // log(phi2) ~ N(0, 500) in the full model; ranges are fixed from variograms
  // and this prior is carried only for reporting.
  double log_phi2_prior_var = 500.0;
};

struct ChainConfig {
  int n_iter = 30000;
  int burn_in = 5000;
  int thin = 100;
  std::uint64_t seed = 0;
  std::uint32_t chain_id = 0;
  double phi1 = 0.0;  // km, fixed for the whole chain
  double phi2 = 0.0;
  Priors priors;
  bool keep_latent_draws = false;
  // Kept per-(site, day) draws streamed as `iter,site_id,day,theta,delta`.
  std::optional<std::filesystem::path> latent_stream_path;
  std::optional<std::filesystem::path> checkpoint_path;  // written on numerical failure

  void validate() const;
  int kept_draws() const { return (n_iter - burn_in) / thin; }
  bool is_kept(int iteration) const {
    return iteration > burn_in && (iteration - burn_in) % thin == 0;
  }
};

struct ModelState {
  MatrixXd theta;  // sites x days
  MatrixXd delta;
  std::array<VectorXd, 4> bias;
  double rho = 0.0;
  double s1_sq = 1.0;
  double s2_sq = 1.0;
  double sigma_sq = 1.0;
  std::array<double, 4> mu{};
  std::array<double, 4> bias_var{1.0, 1.0, 1.0, 1.0};
  MatrixXd y;  // observations, with the current imputation at masked cells

  void validate() const;
};

struct CovarianceSummary {
  double sigma1_sq = 0.0;
  double sigma2_sq = 0.0;
  double sigma12 = 0.0;
  double gamma = 0.0;
};

// (s1^2, s2^2, rho) -> (sigma1^2, sigma2^2, sigma12, gamma); |gamma| <= 1.
CovarianceSummary recover_sigma_gamma(double s1_sq, double s2_sq, double rho);

struct LmcParams {
  double s1_sq = 0.0;
  double s2_sq = 0.0;
  double rho = 0.0;
};
// Inverse of recover_sigma_gamma.
LmcParams lmc_from_covariance(double sigma1_sq, double sigma2_sq, double gamma);

// Fixed quantities for one (data, phi1, phi2): correlation matrices, their
// inverses, the eigen decomposition of R1 and covariate outer products.
class SamplerContext {
 public:
  SamplerContext(const data::PanelDataset& data, double phi1, double phi2, Priors priors);

  Eigen::Index n() const { return theta_hat.rows(); }
  Eigen::Index days() const { return theta_hat.cols(); }

  MatrixXd theta_hat, delta_hat, c;  // c as 0/1 doubles
  data::Flags missing;
  MatrixXd corr1, corr1_inv, corr2, corr2_inv;
  MatrixXd corr1_eigvecs;
  VectorXd corr1_eigvals;
  MatrixXd theta_hat_outer;  // sum_t theta_hat_t theta_hat_t^T
  MatrixXd delta_hat_outer;
  VectorXd corr2_inv_ones;
  double ones_corr2_inv_ones = 0.0;
  double phi1, phi2;
  Priors priors;
};

// Draw source for one sweep.
struct SweepRng {
  std::uint64_t seed = 0;
  std::uint32_t chain_id = 0;
  std::uint32_t iteration = 0;

  rng::Philox4x32 stream(rng::Tag tag, std::uint32_t index = 0) const;
};

// Deterministic start: per-site least squares for the bias fields.
ModelState initial_state(const SamplerContext& ctx, const MatrixXd& y_observed);

void update_theta(ModelState& s, const SamplerContext& ctx, const SweepRng& r);
void update_delta(ModelState& s, const SamplerContext& ctx, const SweepRng& r);
void update_latents(ModelState& s, const SamplerContext& ctx, const SweepRng& r);
void update_bias_field(ModelState& s, const SamplerContext& ctx, Field f, const SweepRng& r);
void update_bias_fields(ModelState& s, const SamplerContext& ctx, const SweepRng& r);
void update_sigma_sq(ModelState& s, const SamplerContext& ctx, const SweepRng& r);
void update_s1_sq(ModelState& s, const SamplerContext& ctx, const SweepRng& r);
void update_rho(ModelState& s, const SamplerContext& ctx, const SweepRng& r);
void update_s2_sq(ModelState& s, const SamplerContext& ctx, const SweepRng& r);
void update_variances_and_rho(ModelState& s, const SamplerContext& ctx, const SweepRng& r);
void update_hyper_mean(ModelState& s, const SamplerContext& ctx, Field f, const SweepRng& r);
void update_hyper_variance(ModelState& s, const SamplerContext& ctx, Field f,
                           const SweepRng& r);
void update_hyperparameters(ModelState& s, const SamplerContext& ctx, const SweepRng& r);
void impute_missing(ModelState& s, const SamplerContext& ctx, const SweepRng& r);

void sweep(ModelState& s, const SamplerContext& ctx, const SweepRng& r);

// Residual fields e0 = theta - B0 and w = delta - B1 (sites x days).
MatrixXd background_residual(const ModelState& s, const SamplerContext& ctx);
MatrixXd fire_residual(const ModelState& s, const SamplerContext& ctx);

struct RangeEstimate {
  double phi1 = 0.0;
  double phi2 = 0.0;
  std::optional<spatial::VariogramFit> fit1, fit2;
  bool phi1_fallback = false;
  bool phi2_fallback = false;
  std::vector<std::string> warnings;
};

// phi1 from the variogram of per-site OLS residuals pooled over days, phi2
// from the variogram of per-site OLS beta0 estimates. A failed fit falls back
// to one third of the largest site distance.
RangeEstimate estimate_ranges(const data::PanelDataset& data);

// Unmonitored locations at which to accumulate the posterior predictive of y.
struct PredictionTargets {
  spatial::Coords xy;
  MatrixXd theta_hat, delta_hat;  // targets x days
  data::Flags c;
};

struct PosteriorSamples {
  std::vector<std::string> site_ids;
  std::vector<int> iterations;  // 1-based iteration index of each kept draw
  // Scalar draws in kScalarNames order.
  std::map<std::string, std::vector<double>> scalars;
  std::array<MatrixXd, 4> bias_draws;  // draws x sites
  MatrixXd effect_draws;               // draws x sites: T^{-1} sum_t C_t(s) delta_t(s)
  MatrixXd theta_bar_draws;            // draws x sites: T^{-1} sum_t theta_t(s)
  MatrixXd theta_mean, theta_var, delta_mean, delta_var;  // sites x days
  std::vector<MatrixXd> theta_draws, delta_draws;  // only with keep_latent_draws
  MatrixXd pred_mean, pred_var;                    // targets x days, if requested
  ModelState final_state;
  double phi1 = 0.0;
  double phi2 = 0.0;

  std::size_t size() const { return iterations.size(); }
  double posterior_mean(const std::string& scalar) const;
};

inline const std::vector<std::string> kScalarNames{
    "sigma_sq",   "s1_sq",       "s2_sq",        "rho",         "sigma1_sq",
    "sigma2_sq",  "sigma12",     "gamma",        "mu_alpha0",   "mu_beta0",
    "mu_alpha1",  "mu_beta1",    "sig_alpha0_sq", "sig_beta0_sq", "sig_alpha1_sq",
    "sig_beta1_sq"};

PosteriorSamples run_chain(const data::PanelDataset& data, const ChainConfig& config,
                           const PredictionTargets* targets = nullptr);

// Continue a chain from a checkpointed state; draws after `start_iteration`
// are identical to those of an uninterrupted run.
PosteriorSamples run_chain_from(const data::PanelDataset& data, const ChainConfig& config,
                                ModelState state, int start_iteration,
                                const PredictionTargets* targets = nullptr);

struct Checkpoint {
  int version = 1;
  int iteration = 0;  // last completed iteration
  std::uint64_t seed = 0;
  std::uint32_t chain_id = 0;
  double phi1 = 0.0, phi2 = 0.0;
  std::vector<std::string> site_ids;
  ModelState state;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& cp);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace smokecausal::gibbs
