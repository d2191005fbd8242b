#pragma once

// Posterior causal effect, ordinary kriging of posterior summaries to grid
// cells, credible intervals and percent-of-total summaries.

#include "smokecausal/gibbs.hpp"
#include "smokecausal/panel.hpp"
#include "smokecausal/spatial.hpp"

#include <Eigen/Dense>

#include <span>
#include <string>
#include <vector>

namespace smokecausal::inference {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool from_range = false;  // fewer than 20 draws: (min, max) returned
};

// Type-7 (linear interpolation) quantile of sorted values.
double quantile_sorted(const std::vector<double>& sorted, double p);

// Equal-tailed interval at `level`. Warns and returns (min, max) below 20 draws.
Interval credible_interval(std::span<const double> draws, double level = 0.95);

struct CausalEffectPosterior {
  std::vector<std::string> site_ids;
  MatrixXd draws;  // draws x sites
  VectorXd mean, sd, lo95, hi95;
  VectorXd theta_bar_mean, theta_bar_sd;
};

// Delta(s) = T^{-1} sum_t C_t(s) delta_t(s) per kept draw. Uses retained
// latent draws when present, otherwise the per-draw effects built during
// sampling (which used the chain's own C).
CausalEffectPosterior causal_effect(const gibbs::PosteriorSamples& samples, const data::Flags& c);

struct KrigingKernel {
  double sill = 1.0;
  double range = 1.0;   // km
  double nugget = 0.0;  // added on the source diagonal only
};

enum class DuplicatePolicy { error, average };

// Ordinary kriging of the noise-free signal with an exponential covariance.
// Weights depend only on geometry and kernel, so one instance serves any
// number of value vectors on the same sources.
class OrdinaryKriging {
 public:
  OrdinaryKriging(const spatial::Coords& sources, const spatial::Coords& targets,
                  const KrigingKernel& kernel, DuplicatePolicy dup = DuplicatePolicy::error);

  VectorXd predict(const VectorXd& values) const;
  // values: sources x k; returns targets x k.
  MatrixXd predict_columns(const MatrixXd& values) const;
  // GLS estimate of the constant mean.
  double global_mean(const VectorXd& values) const;

  const MatrixXd& weights() const { return weights_; }  // targets x unique sources
  const VectorXd& sd() const { return sd_; }            // kriging standard deviation

 private:
  MatrixXd collapse(const MatrixXd& values) const;

  std::vector<std::vector<Eigen::Index>> groups_;  // duplicate-merged sources
  Eigen::Index n_sources_ = 0;
  MatrixXd weights_;
  VectorXd sd_;
  VectorXd mean_weights_;  // K^{-1} 1 / (1^T K^{-1} 1)
};

// Kernel from a variogram fit of one field over the sources; falls back to
// (sample variance, max distance / 3) when the fit is not possible.
KrigingKernel fit_kernel(const VectorXd& values, const spatial::Coords& sources, double nugget);

struct SurfaceField {
  std::string field;
  KrigingKernel kernel;
  VectorXd mean;      // kriged posterior means
  VectorXd sd;        // kriged posterior sds, clamped at 0
  VectorXd krige_sd;  // kriging standard deviation of the mean surface
};

struct KrigedSurface {
  std::vector<std::string> cell_ids;
  std::vector<SurfaceField> fields;

  const SurfaceField& get(const std::string& name) const;
};

inline const std::vector<std::string> kSurfaceFields{"delta",  "theta_bar", "alpha0",
                                                     "beta0",  "alpha1",    "beta1"};

// Kriges posterior means and sds of the causal effect, the background mean
// and the four bias fields. The nugget for theta_bar is sigma^2 / T; the
// others are kriged without one.
KrigedSurface krige_posterior(const gibbs::PosteriorSamples& samples,
                              const CausalEffectPosterior& effect, const spatial::Coords& sites,
                              const std::vector<std::string>& cell_ids,
                              const spatial::Coords& cells, Eigen::Index n_days,
                              DuplicatePolicy dup = DuplicatePolicy::error);

enum class PercentFlag { ok, negative_effect, nonpositive_total };
const char* to_string(PercentFlag f);

struct PercentCell {
  double percent = 0.0;  // NaN when the total is not positive
  PercentFlag flag = PercentFlag::ok;
};

// 100 * delta / (theta_bar + delta), clamped to [-100, 100].
std::vector<PercentCell> percent_of_total(const VectorXd& delta, const VectorXd& theta_bar);

}  // namespace smokecausal::inference
