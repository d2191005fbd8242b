#include "smokecausal/inference.hpp"

#include "smokecausal/errors.hpp"
#include "smokecausal/linalg.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>

namespace smokecausal::inference {

double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw InsufficientDataError("quantile of no values");
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("quantile probability outside [0, 1]");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

Interval credible_interval(std::span<const double> draws, double level) {
  if (!(level > 0.0 && level < 1.0)) throw ValidationError("interval level must be in (0, 1)");
  if (draws.empty()) throw InsufficientDataError("credible interval of no draws");
  std::vector<double> v(draws.begin(), draws.end());
  std::sort(v.begin(), v.end());
  Interval out;
  if (v.size() < 20) {
    spdlog::warn("only {} draws; reporting (min, max) as the interval", v.size());
    out.lo = v.front();
    out.hi = v.back();
    out.from_range = true;
    return out;
  }
  const double tail = 0.5 * (1.0 - level);
  out.lo = quantile_sorted(v, tail);
  out.hi = quantile_sorted(v, 1.0 - tail);
  return out;
}

namespace {

void summarize_columns(const MatrixXd& draws, VectorXd& mean, VectorXd& sd, VectorXd* lo,
                       VectorXd* hi) {
  const Eigen::Index k = draws.rows(), n = draws.cols();
  mean = VectorXd::Zero(n);
  sd = VectorXd::Zero(n);
  if (lo) *lo = VectorXd::Zero(n);
  if (hi) *hi = VectorXd::Zero(n);
  if (k == 0) return;
  mean = draws.colwise().mean().transpose();
  if (k > 1)
    sd = ((draws.rowwise() - mean.transpose()).colwise().squaredNorm() / double(k - 1))
             .cwiseSqrt()
             .transpose();
  if (lo && hi) {
    for (Eigen::Index i = 0; i < n; ++i) {
      std::vector<double> col(k);
      for (Eigen::Index r = 0; r < k; ++r) col[r] = draws(r, i);
      const auto iv = credible_interval(col, 0.95);
      (*lo)[i] = iv.lo;
      (*hi)[i] = iv.hi;
    }
  }
}

}  // namespace

CausalEffectPosterior causal_effect(const gibbs::PosteriorSamples& samples, const data::Flags& c) {
  CausalEffectPosterior out;
  out.site_ids = samples.site_ids;
  const auto n = static_cast<Eigen::Index>(samples.site_ids.size());
  if (!samples.delta_draws.empty()) {
    const auto& first = samples.delta_draws.front();
    if (c.rows() != first.rows() || c.cols() != first.cols())
      throw ValidationError("smoke indicator does not match the latent draws");
    const MatrixXd cd = c.cast<double>();
    out.draws.resize(static_cast<Eigen::Index>(samples.delta_draws.size()), n);
    for (std::size_t r = 0; r < samples.delta_draws.size(); ++r)
      out.draws.row(r) = cd.cwiseProduct(samples.delta_draws[r]).rowwise().mean().transpose();
  } else {
    if (c.rows() != n) throw ValidationError("smoke indicator does not match the sites");
    out.draws = samples.effect_draws;
  }
  summarize_columns(out.draws, out.mean, out.sd, &out.lo95, &out.hi95);
  summarize_columns(samples.theta_bar_draws, out.theta_bar_mean, out.theta_bar_sd, nullptr,
                    nullptr);
  return out;
}

OrdinaryKriging::OrdinaryKriging(const spatial::Coords& sources, const spatial::Coords& targets,
                                 const KrigingKernel& kernel, DuplicatePolicy dup)
    : n_sources_(sources.rows()) {
  if (sources.rows() < 1) throw InsufficientDataError("kriging needs at least one source");
  if (!(kernel.sill > 0.0) || !(kernel.range > 0.0) || !(kernel.nugget >= 0.0))
    throw ValidationError("kriging kernel needs sill > 0, range > 0, nugget >= 0");

  constexpr double kSameLocationKm = 1e-9;
  std::vector<Eigen::Index> rep;
  for (Eigen::Index i = 0; i < sources.rows(); ++i) {
    bool merged = false;
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      if ((sources.row(i) - sources.row(rep[g])).norm() <= kSameLocationKm) {
        if (dup == DuplicatePolicy::error)
          throw ValidationError(fmt::format(
              "kriging sources {} and {} share a location; deduplicate or use the average "
              "policy",
              rep[g], i));
        groups_[g].push_back(i);
        merged = true;
        break;
      }
    }
    if (!merged) {
      groups_.push_back({i});
      rep.push_back(i);
    }
  }
  const auto m = static_cast<Eigen::Index>(rep.size());
  spatial::Coords src(m, 2);
  for (Eigen::Index g = 0; g < m; ++g) src.row(g) = sources.row(rep[g]);

  MatrixXd k_src = kernel.sill * spatial::exp_correlation(spatial::distance_matrix(src), kernel.range);
  k_src.diagonal().array() += kernel.nugget;
  const MatrixXd k_cross =
      kernel.sill * spatial::exp_correlation(spatial::cross_distance(src, targets), kernel.range);

  const auto llt = linalg::cholesky_with_jitter(k_src, "kriging covariance");
  const VectorXd kinv_one = llt.solve(VectorXd::Ones(m));
  const double denom = kinv_one.sum();
  const MatrixXd kinv_k = llt.solve(k_cross);  // m x targets
  const Eigen::RowVectorXd lagrange = (kinv_k.colwise().sum().array() - 1.0) / denom;
  const MatrixXd lambda = kinv_k - kinv_one * lagrange;  // m x targets
  weights_ = lambda.transpose();
  mean_weights_ = kinv_one / denom;

  const Eigen::ArrayXd var =
      kernel.sill - lambda.cwiseProduct(k_cross).colwise().sum().transpose().array() -
      lagrange.transpose().array();
  sd_ = var.max(0.0).sqrt().matrix();
}

MatrixXd OrdinaryKriging::collapse(const MatrixXd& values) const {
  if (values.rows() != n_sources_)
    throw ValidationError("kriging values do not match the number of sources");
  MatrixXd out(static_cast<Eigen::Index>(groups_.size()), values.cols());
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    out.row(g).setZero();
    for (Eigen::Index i : groups_[g]) out.row(g) += values.row(i);
    out.row(g) /= static_cast<double>(groups_[g].size());
  }
  return out;
}

VectorXd OrdinaryKriging::predict(const VectorXd& values) const {
  return weights_ * collapse(values);
}

MatrixXd OrdinaryKriging::predict_columns(const MatrixXd& values) const {
  return weights_ * collapse(values);
}

double OrdinaryKriging::global_mean(const VectorXd& values) const {
  return mean_weights_.dot(collapse(values).col(0));
}

KrigingKernel fit_kernel(const VectorXd& values, const spatial::Coords& sources, double nugget) {
  const MatrixXd dist = spatial::distance_matrix(sources);
  const double max_dist = dist.size() > 0 ? dist.maxCoeff() : 0.0;
  KrigingKernel k;
  k.nugget = nugget;
  const double mean = values.size() > 0 ? values.mean() : 0.0;
  const double var = values.size() > 1
                         ? (values.array() - mean).square().sum() / double(values.size() - 1)
                         : 0.0;
  k.sill = var;
  k.range = max_dist > 0.0 ? max_dist / 3.0 : 1.0;
  try {
    const MatrixXd field = values;
    const auto fit = spatial::fit_range(spatial::empirical_variogram(field, dist));
    if (!fit.degenerate && fit.sill > 0.0) {
      k.sill = fit.sill;
      k.range = fit.range;
    }
  } catch (const ValidationError& e) {
    spdlog::debug("kriging kernel fit failed ({}); using sample variance and max distance / 3",
                  e.what());
  }
  if (!(k.sill > 0.0)) k.sill = 1.0;  // constant field: any positive sill gives the same mean
  return k;
}

const SurfaceField& KrigedSurface::get(const std::string& name) const {
  for (const auto& f : fields)
    if (f.field == name) return f;
  throw ValidationError("no kriged field named " + name);
}

KrigedSurface krige_posterior(const gibbs::PosteriorSamples& samples,
                              const CausalEffectPosterior& effect, const spatial::Coords& sites,
                              const std::vector<std::string>& cell_ids,
                              const spatial::Coords& cells, Eigen::Index n_days,
                              DuplicatePolicy dup) {
  if (static_cast<std::size_t>(cells.rows()) != cell_ids.size())
    throw ValidationError("cell ids do not match cell coordinates");
  if (n_days < 1) throw ValidationError("n_days must be >= 1");
  KrigedSurface out;
  out.cell_ids = cell_ids;
  const double sigma_sq = samples.posterior_mean("sigma_sq");

  auto add = [&](const std::string& name, const VectorXd& mean, const VectorXd& sd,
                 double nugget) {
    SurfaceField f;
    f.field = name;
    f.kernel = fit_kernel(mean, sites, nugget);
    const OrdinaryKriging ok(sites, cells, f.kernel, dup);
    f.mean = ok.predict(mean);
    f.sd = ok.predict(sd).cwiseMax(0.0);
    f.krige_sd = ok.sd();
    out.fields.push_back(std::move(f));
  };

  add("delta", effect.mean, effect.sd, 0.0);
  add("theta_bar", effect.theta_bar_mean, effect.theta_bar_sd,
      sigma_sq / static_cast<double>(n_days));
  for (int f = 0; f < 4; ++f) {
    VectorXd mean, sd;
    summarize_columns(samples.bias_draws[f], mean, sd, nullptr, nullptr);
    add(gibbs::kFieldNames[f], mean, sd, 0.0);
  }
  return out;
}

const char* to_string(PercentFlag f) {
  switch (f) {
    case PercentFlag::ok: return "ok";
    case PercentFlag::negative_effect: return "negative_effect";
    case PercentFlag::nonpositive_total: return "nonpositive_total";
  }
  return "ok";
}

std::vector<PercentCell> percent_of_total(const VectorXd& delta, const VectorXd& theta_bar) {
  if (delta.size() != theta_bar.size())
    throw ValidationError("delta and theta_bar surfaces differ in size");
  std::vector<PercentCell> out(delta.size());
  for (Eigen::Index i = 0; i < delta.size(); ++i) {
    const double total = theta_bar[i] + delta[i];
    auto& cell = out[i];
    if (!(total > 0.0)) {
      cell.percent = std::numeric_limits<double>::quiet_NaN();
      cell.flag = PercentFlag::nonpositive_total;
      continue;
    }
    cell.percent = std::clamp(100.0 * delta[i] / total, -100.0, 100.0);
    if (delta[i] < 0.0) cell.flag = PercentFlag::negative_effect;
  }
  return out;
}

}  // namespace smokecausal::inference
