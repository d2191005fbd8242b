#include "smokecausal/crossval.hpp"

#include "smokecausal/errors.hpp"
#include "smokecausal/rng.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>

namespace smokecausal::cv {

std::vector<std::vector<std::size_t>> kfold_split(std::size_t n_sites, int k, std::uint64_t seed) {
  if (k < 1) throw ValidationError("number of folds must be >= 1");
  if (static_cast<std::size_t>(k) > n_sites)
    throw ValidationError(fmt::format("{} folds requested for {} sites", k, n_sites));
  std::vector<std::size_t> idx(n_sites);
  std::iota(idx.begin(), idx.end(), 0);
  rng::Philox4x32 g(seed, rng::Tag::Folds);
  std::shuffle(idx.begin(), idx.end(), g);

  std::vector<std::vector<std::size_t>> folds(k);
  const std::size_t base = n_sites / k, extra = n_sites % k;
  std::size_t pos = 0;
  for (int f = 0; f < k; ++f) {
    const std::size_t size = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
    folds[f].assign(idx.begin() + pos, idx.begin() + pos + size);
    std::sort(folds[f].begin(), folds[f].end());
    pos += size;
  }
  return folds;
}

Metrics cv_metrics(std::span<const double> pred_mean, std::span<const double> pred_sd,
                   std::span<const double> obs, double z) {
  if (pred_mean.size() != obs.size() || pred_sd.size() != obs.size())
    throw ValidationError("prediction, sd and observation lengths differ");
  if (obs.empty()) throw InsufficientDataError("no observations to score");
  Metrics m;
  m.n = obs.size();
  const double n = static_cast<double>(m.n);
  double se = 0.0, ae = 0.0, mean = 0.0;
  long covered = 0;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const double e = pred_mean[i] - obs[i];
    se += e * e;
    ae += std::abs(e);
    mean += pred_mean[i];
    if (std::abs(e) <= z * pred_sd[i]) ++covered;
  }
  mean /= n;
  double ss = 0.0;
  for (double p : pred_mean) ss += (p - mean) * (p - mean);
  m.mse = se / n;
  m.rmse = std::sqrt(m.mse);
  m.mad = ae / n;
  m.sd = m.n > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  m.coverage = static_cast<double>(covered) / n;
  return m;
}

gibbs::ChainConfig default_cv_chain() {
  gibbs::ChainConfig c;
  c.n_iter = 6000;
  c.burn_in = 1000;
  c.thin = 10;
  return c;
}

const CvRow& CvTable::pooled(double tau) const {
  for (const auto& r : rows)
    if (r.fold == 0 && r.tau == tau) return r;
  throw ValidationError(fmt::format("no pooled row for tau {}", tau));
}

namespace {

struct FoldResult {
  std::vector<double> mean, sd, obs;
  bool skipped = false;
  std::string note;
};

FoldResult run_fold(const data::PanelDataset& data, const std::vector<std::size_t>& test,
                    int fold_index, const gibbs::ChainConfig& base_chain) {
  FoldResult out;
  std::vector<std::size_t> train;
  for (std::size_t i = 0; i < static_cast<std::size_t>(data.n_sites()); ++i)
    if (!std::binary_search(test.begin(), test.end(), i)) train.push_back(i);
  try {
    if (train.empty()) throw InsufficientDataError("no training sites");
    const auto train_data = data.subset_sites(train);
    const auto test_data = data.subset_sites(test);
    gibbs::ChainConfig chain = base_chain;
    chain.chain_id = static_cast<std::uint32_t>(fold_index);
    if (!(chain.phi1 > 0.0) || !(chain.phi2 > 0.0)) {
      const auto ranges = gibbs::estimate_ranges(train_data);
      if (!(chain.phi1 > 0.0)) chain.phi1 = ranges.phi1;
      if (!(chain.phi2 > 0.0)) chain.phi2 = ranges.phi2;
    }
    gibbs::PredictionTargets tg;
    tg.xy = test_data.sites.xy;
    tg.theta_hat = test_data.theta_hat;
    tg.delta_hat = test_data.delta_hat;
    tg.c = test_data.c;
    const auto samples = gibbs::run_chain(train_data, chain, &tg);
    for (Eigen::Index j = 0; j < test_data.n_sites(); ++j)
      for (Eigen::Index t = 0; t < test_data.n_days(); ++t) {
        if (test_data.missing(j, t)) continue;
        out.mean.push_back(samples.pred_mean(j, t));
        out.sd.push_back(std::sqrt(samples.pred_var(j, t)));
        out.obs.push_back(test_data.y(j, t));
      }
    if (out.obs.empty()) throw InsufficientDataError("held-out sites have no observations");
  } catch (const ValidationError& e) {
    out = FoldResult{};
    out.skipped = true;
    out.note = e.what();
  } catch (const NumericalError& e) {
    out = FoldResult{};
    out.skipped = true;
    out.note = e.what();
  }
  return out;
}

}  // namespace

CvTable tau_selection(const data::PanelDataset& data, const std::vector<double>& tau_grid,
                      const CvConfig& cv_config, const gibbs::ChainConfig& chain) {
  if (tau_grid.empty()) throw ValidationError("tau grid is empty");
  for (double t : tau_grid)
    if (!std::isfinite(t)) throw ValidationError("tau grid contains a non-finite value");
  const auto folds = kfold_split(static_cast<std::size_t>(data.n_sites()), cv_config.folds,
                                 cv_config.seed);

  std::vector<data::PanelDataset> by_tau;
  for (double t : tau_grid) by_tau.push_back(data.with_tau(t));

  const std::size_t n_tasks = tau_grid.size() * folds.size();
  std::vector<FoldResult> results(n_tasks);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t task = next++; task < n_tasks; task = next++) {
      const std::size_t ti = task / folds.size(), fi = task % folds.size();
      spdlog::info("cv: tau {} fold {}/{}", tau_grid[ti], fi + 1, folds.size());
      results[task] = run_fold(by_tau[ti], folds[fi], static_cast<int>(fi) + 1, chain);
    }
  };
  const int jobs = std::max(1, std::min<int>(cv_config.jobs, static_cast<int>(n_tasks)));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  CvTable table;
  double best = std::numeric_limits<double>::infinity();
  bool have_best = false;
  for (std::size_t ti = 0; ti < tau_grid.size(); ++ti) {
    std::vector<double> all_mean, all_sd, all_obs;
    for (std::size_t fi = 0; fi < folds.size(); ++fi) {
      const auto& r = results[ti * folds.size() + fi];
      CvRow row;
      row.tau = tau_grid[ti];
      row.fold = static_cast<int>(fi) + 1;
      if (r.skipped) {
        row.skipped = true;
        row.note = r.note;
        table.notes.push_back(
            fmt::format("tau {} fold {} skipped: {}", row.tau, row.fold, r.note));
        spdlog::warn("{}", table.notes.back());
      } else {
        row.metrics = cv_metrics(r.mean, r.sd, r.obs);
        all_mean.insert(all_mean.end(), r.mean.begin(), r.mean.end());
        all_sd.insert(all_sd.end(), r.sd.begin(), r.sd.end());
        all_obs.insert(all_obs.end(), r.obs.begin(), r.obs.end());
      }
      table.rows.push_back(row);
    }
    CvRow pooled;
    pooled.tau = tau_grid[ti];
    pooled.fold = 0;
    if (all_obs.empty()) {
      pooled.skipped = true;
      pooled.note = "every fold skipped";
    } else {
      pooled.metrics = cv_metrics(all_mean, all_sd, all_obs);
      const double mse = pooled.metrics.mse;
      if (!have_best || mse < best || (mse == best && pooled.tau < table.recommended_tau)) {
        best = mse;
        table.recommended_tau = pooled.tau;
        have_best = true;
      }
    }
    table.rows.push_back(pooled);
  }
  if (!have_best) throw InsufficientDataError("cross-validation produced no scored folds");
  return table;
}

}  // namespace smokecausal::cv
