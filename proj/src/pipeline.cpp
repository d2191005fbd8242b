#include "smokecausal/pipeline.hpp"

#include "smokecausal/csv.hpp"
#include "smokecausal/diagnostics.hpp"
#include "smokecausal/errors.hpp"
#include "smokecausal/rng.hpp"

#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <set>
#include <thread>

namespace smokecausal::pipeline {

namespace {

using nlohmann::json;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void require_input(const fs::path& p, const char* flag) {
  if (p.empty()) throw ValidationError(std::string(flag) + " is required");
  if (!fs::exists(p)) throw ValidationError("input file not found: " + p.string());
}

void require_out(const RunConfig& cfg) {
  if (cfg.out.empty()) throw ValidationError("--out is required");
  std::error_code ec;
  fs::create_directories(cfg.out, ec);
  if (ec) throw IoError("cannot create output directory " + cfg.out.string() + ": " + ec.message());
}

std::string dir_name(const std::string& region) {
  std::string s = region;
  for (char& ch : s)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '+' ||
          ch == '.'))
      ch = '_';
  if (s.empty() || s == "." || s == "..") s = "_" + s;
  return s;
}

fs::path region_dir(const fs::path& out, const std::string& region) {
  fs::path d = out / dir_name(region);
  std::error_code ec;
  fs::create_directories(d, ec);
  if (ec) throw IoError("cannot create " + d.string() + ": " + ec.message());
  return d;
}

std::string qualify(const std::string& qualifier, const std::string& name) {
  return qualifier.empty() ? name : qualifier + ":" + name;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

gibbs::ChainConfig chain_json_overlay(gibbs::ChainConfig c, const json& j) {
  for (const auto& [k, v] : j.items()) {
    if (k == "iters") c.n_iter = v.get<int>();
    else if (k == "burnin") c.burn_in = v.get<int>();
    else if (k == "thin") c.thin = v.get<int>();
    else throw ValidationError("unknown chain config key: " + k);
  }
  return c;
}

json chain_json(const gibbs::ChainConfig& c) {
  return json{{"iters", c.n_iter},
              {"burnin", c.burn_in},
              {"thin", c.thin},
              {"priors",
               {{"ig_shape", c.priors.ig_shape},
                {"ig_rate", c.priors.ig_rate},
                {"mu_prior_var", c.priors.mu_prior_var},
                {"rho_prior_var", c.priors.rho_prior_var},
                {"log_phi2_prior_var", c.priors.log_phi2_prior_var}}}};
}

// Grid cells belonging to a (possibly merged) region block.
std::vector<std::size_t> cells_for_block(const data::Grid& grid, const std::string& block,
                                         const RunConfig& cfg) {
  const std::string merged = cfg.merge_regions.empty() ? "" : merged_label(cfg.merge_regions);
  const std::set<std::string> members(cfg.merge_regions.begin(), cfg.merge_regions.end());
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const std::string& r = grid.regions[k];
    const std::string label = (!merged.empty() && members.count(r)) ? merged : r;
    if (label == block) idx.push_back(k);
  }
  return idx;
}

spatial::CovarianceParams posterior_covariance(const gibbs::PosteriorSamples& s) {
  spatial::CovarianceParams p;
  p.sigma1_sq = s.posterior_mean("sigma1_sq");
  p.sigma2_sq = s.posterior_mean("sigma2_sq");
  p.gamma = std::clamp(s.posterior_mean("gamma"), -1.0, 1.0);
  p.phi1 = s.phi1;
  p.sigma_sq = s.posterior_mean("sigma_sq");
  return p;
}

Eigen::VectorXd column_mean(const MatrixXd& draws) {
  if (draws.rows() == 0) return Eigen::VectorXd::Zero(draws.cols());
  return draws.colwise().mean().transpose();
}

// y minus the posterior-mean bias-corrected model output; NaN where missing.
MatrixXd posterior_mean_residual(const data::PanelDataset& d, const gibbs::PosteriorSamples& s) {
  const Eigen::VectorXd a0 = column_mean(s.bias_draws[0]), b0 = column_mean(s.bias_draws[1]);
  const Eigen::VectorXd a1 = column_mean(s.bias_draws[2]), b1 = column_mean(s.bias_draws[3]);
  MatrixXd r(d.n_sites(), d.n_days());
  for (Eigen::Index i = 0; i < d.n_sites(); ++i)
    for (Eigen::Index t = 0; t < d.n_days(); ++t) {
      if (d.missing(i, t)) {
        r(i, t) = kNaN;
        continue;
      }
      const double c = d.c(i, t) ? 1.0 : 0.0;
      r(i, t) = d.y(i, t) - (a0[i] + b0[i] * d.theta_hat(i, t) +
                             c * (a1[i] + b1[i] * d.delta_hat(i, t)));
    }
  return r;
}

// Row writers shared by per-region and merged outputs.

void append_effect(csv::Writer& w, const inference::CausalEffectPosterior& e) {
  for (std::size_t i = 0; i < e.site_ids.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    w << e.site_ids[i] << e.mean[k] << e.sd[k] << e.lo95[k] << e.hi95[k];
    w.end_row();
  }
}

void append_latents(csv::Writer& w, const gibbs::PosteriorSamples& s) {
  for (std::size_t i = 0; i < s.site_ids.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    for (Eigen::Index t = 0; t < s.theta_mean.cols(); ++t) {
      w << s.site_ids[i] << static_cast<long>(t + 1) << s.theta_mean(k, t)
        << std::sqrt(s.theta_var(k, t)) << s.delta_mean(k, t) << std::sqrt(s.delta_var(k, t));
      w.end_row();
    }
  }
}

void append_samples(csv::Writer& w, const gibbs::PosteriorSamples& s,
                    const std::string& qualifier) {
  for (std::size_t r = 0; r < s.size(); ++r) {
    const long it = s.iterations[r];
    const auto rr = static_cast<Eigen::Index>(r);
    for (const auto& name : gibbs::kScalarNames) {
      w << it << qualify(qualifier, name) << "" << s.scalars.at(name)[r];
      w.end_row();
    }
    auto site_rows = [&](const std::string& name, const MatrixXd& draws) {
      for (std::size_t i = 0; i < s.site_ids.size(); ++i) {
        w << it << name << s.site_ids[i] << draws(rr, static_cast<Eigen::Index>(i));
        w.end_row();
      }
    };
    for (int f = 0; f < 4; ++f) site_rows(gibbs::kFieldNames[f], s.bias_draws[f]);
    site_rows("effect", s.effect_draws);
    site_rows("theta_bar", s.theta_bar_draws);
  }
}

void append_ess(csv::Writer& w, const gibbs::PosteriorSamples& s,
                const inference::CausalEffectPosterior& e, const std::string& qualifier) {
  auto row = [&](const std::string& target, const std::string& site, const std::vector<double>& d) {
    w << target << site;
    if (d.size() < 10) {
      w << kNaN << d.size() << "thinned;insufficient_draws";
    } else {
      const auto r = diag::ess(d);
      w << r.ess << r.n << (r.constant ? "thinned;constant_chain" : "thinned");
    }
    w.end_row();
  };
  for (const auto& name : gibbs::kScalarNames) row(qualify(qualifier, name), "", s.scalars.at(name));
  for (std::size_t i = 0; i < e.site_ids.size(); ++i) {
    std::vector<double> d(static_cast<std::size_t>(e.draws.rows()));
    for (Eigen::Index r = 0; r < e.draws.rows(); ++r) d[r] = e.draws(r, static_cast<Eigen::Index>(i));
    row("effect", e.site_ids[i], d);
  }
}

void append_trace(csv::Writer& w, const gibbs::PosteriorSamples& s,
                  const std::vector<std::string>& params, const std::string& qualifier) {
  for (const auto& p : params) {
    const auto it = s.scalars.find(p);
    if (it == s.scalars.end()) throw ValidationError("unknown trace parameter: " + p);
    for (std::size_t r = 0; r < s.size(); ++r) {
      w << static_cast<long>(s.iterations[r]) << qualify(qualifier, p) << "" << it->second[r];
      w.end_row();
    }
  }
}

struct DiagWriters {
  csv::Writer ess, acf, gof, trace, curves;
  explicit DiagWriters(const fs::path& d)
      : ess(d / "ess.csv", {"target", "site_id", "ess", "n_draws", "flag"}),
        acf(d / "acf.csv", {"region", "site_id", "lag", "acf"}),
        gof(d / "variogram_gof.csv", {"group", "bin_center_km", "empirical", "fitted", "count"}),
        trace(d / "trace.csv", {"iter", "param", "site_id", "value"}),
        curves(d / "covariance_curves.csv", {"h_km", "c00", "c01", "c11"}) {}
};

json write_diagnostics(std::vector<DiagWriters*> outs, const RegionFit& fit, const RunConfig& cfg,
                       bool qualify_top) {
  json notes = json::array();
  const auto& s = fit.samples;
  const auto params = posterior_covariance(s);
  const auto residuals = synth::ols_residual_field(fit.data);
  const auto racf = diag::residual_acf(residuals, fit.data.sites.ids, cfg.acf_max_lag);
  for (const auto& w : racf.warnings) notes.push_back(fit.region + ": " + w);
  const MatrixXd dist = spatial::distance_matrix(fit.data.sites.xy);
  std::optional<diag::VariogramGof> gof;
  try {
    gof = diag::variogram_gof(posterior_mean_residual(fit.data, s), fit.data.c, dist, params);
    for (const auto& n : gof->notes) notes.push_back(fit.region + ": " + n);
  } catch (const InsufficientDataError& e) {
    notes.push_back(fit.region + ": variogram goodness of fit skipped: " + e.what());
  }
  const double hmax = dist.size() > 0 && dist.maxCoeff() > 0.0 ? dist.maxCoeff() : 3.0 * s.phi1;
  std::vector<double> hgrid;
  for (int k = 0; k <= 50; ++k) hgrid.push_back(hmax * k / 50.0);
  const auto curves = diag::covariance_curves(params, hgrid);

  for (std::size_t o = 0; o < outs.size(); ++o) {
    auto& w = *outs[o];
    const std::string q = (qualify_top && o > 0) ? fit.region : "";
    append_ess(w.ess, s, fit.effect, q);
    for (std::size_t i = 0; i < racf.per_site.size(); ++i)
      for (int k = 0; k <= racf.max_lag; ++k) {
        w.acf << fit.region << racf.site_ids[i] << k << racf.per_site[i].acf[k];
        w.acf.end_row();
      }
    for (int k = 0; k <= racf.max_lag; ++k) {
      w.acf << fit.region << "pooled" << k << racf.pooled.acf[k];
      w.acf.end_row();
    }
    if (gof)
      for (const auto& g : gof->groups)
        for (std::size_t b = 0; b < g.empirical.size(); ++b) {
          w.gof << qualify(q, g.label) << g.empirical.bin_centers[b]
                << (g.empirical.empty_bin(b) ? kNaN : g.empirical.semivariances[b])
                << g.fitted[b] << g.empirical.bin_counts[b];
          w.gof.end_row();
        }
    append_trace(w.trace, s, cfg.trace_params, q);
    if (o == 0)
      for (std::size_t k = 0; k < hgrid.size(); ++k) {
        w.curves << curves.h[k] << curves.c00[k] << curves.c01[k] << curves.c11[k];
        w.curves.end_row();
      }
  }
  return notes;
}

json ranges_json(const RegionFit& f) {
  json j{{"region", f.region},
         {"phi1", f.samples.phi1},
         {"phi2", f.samples.phi2},
         {"phi1_fallback", f.ranges.phi1_fallback},
         {"phi2_fallback", f.ranges.phi2_fallback},
         {"warnings", f.ranges.warnings}};
  return j;
}

std::vector<RegionFit> fit_all(const RunConfig& cfg) {
  const auto blocks = load_blocks(cfg);
  std::vector<RegionFit> fits(blocks.size());
  std::vector<std::exception_ptr> errors(blocks.size());
  const int jobs = std::clamp<int>(cfg.jobs > 0 ? cfg.jobs : static_cast<int>(blocks.size()), 1,
                                   static_cast<int>(blocks.size()));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t b = next++; b < blocks.size(); b = next++) {
      try {
        fits[b] = fit_region(blocks[b], cfg);
      } catch (...) {
        errors[b] = std::current_exception();
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return fits;
}

json write_fit_outputs(const std::vector<RegionFit>& fits, const RunConfig& cfg) {
  const std::vector<std::string> sample_header{"iter", "param", "site_id", "value"};
  const std::vector<std::string> effect_header{"site_id", "delta_mean", "delta_sd", "lo95", "hi95"};
  const std::vector<std::string> latent_header{"site_id",    "day",        "theta_mean",
                                               "theta_sd",   "delta_mean", "delta_sd"};
  csv::Writer top_samples(cfg.out / "samples.csv", sample_header);
  csv::Writer top_effect(cfg.out / "effect.csv", effect_header);
  csv::Writer top_latents(cfg.out / "latents.csv", latent_header);
  json extra{{"regions", json::array()}, {"notes", json::array()}};
  for (const auto& f : fits) {
    const auto d = region_dir(cfg.out, f.region);
    {
      csv::Writer w(d / "samples.csv", sample_header);
      append_samples(w, f.samples, "");
      csv::Writer e(d / "effect.csv", effect_header);
      append_effect(e, f.effect);
      csv::Writer l(d / "latents.csv", latent_header);
      append_latents(l, f.samples);
    }
    append_samples(top_samples, f.samples, f.region);
    append_effect(top_effect, f.effect);
    append_latents(top_latents, f.samples);
    write_json(d / "ranges.json", ranges_json(f));
    extra["regions"].push_back(ranges_json(f));
  }
  return extra;
}

json write_diagnostic_outputs(const std::vector<RegionFit>& fits, const RunConfig& cfg) {
  json notes = json::array();
  DiagWriters top(cfg.out);
  for (const auto& f : fits) {
    DiagWriters region(region_dir(cfg.out, f.region));
    for (auto& n : write_diagnostics({&region, &top}, f, cfg, true)) notes.push_back(n);
  }
  return json{{"notes", notes}};
}

std::vector<RegionFit> load_fits(const RunConfig& cfg) {
  std::vector<RegionFit> fits;
  for (const auto& b : load_blocks(cfg)) {
    RegionFit f;
    f.region = b.region;
    f.data = b.data;
    const fs::path d = cfg.out / dir_name(b.region);
    const fs::path sp = d / "samples.csv";
    if (!fs::exists(sp))
      throw ValidationError("no fit found for region " + b.region + " (expected " + sp.string() +
                            "); run `fit` first");
    f.samples = read_samples(sp, b.data.sites.ids);
    const json r = read_json(d / "ranges.json");
    f.samples.phi1 = r.at("phi1").get<double>();
    f.samples.phi2 = r.at("phi2").get<double>();
    f.ranges.phi1 = f.samples.phi1;
    f.ranges.phi2 = f.samples.phi2;
    f.effect = inference::causal_effect(f.samples, f.data.c);
    fits.push_back(std::move(f));
  }
  return fits;
}

json write_predict_outputs(const std::vector<RegionFit>& fits, const data::Grid& grid,
                           const RunConfig& cfg) {
  csv::Writer top_surface(cfg.out / "surface.csv", {"cell_id", "field", "mean", "sd"});
  csv::Writer top_percent(cfg.out / "percent.csv", {"cell_id", "percent", "flag"});
  json extra{{"kriging", json::array()}};
  for (const auto& f : fits) {
    const auto idx = cells_for_block(grid, f.region, cfg);
    if (idx.empty()) {
      spdlog::warn("region {} has no grid cells; nothing to predict", f.region);
      continue;
    }
    const auto cells = grid.subset(idx);
    const auto surf = inference::krige_posterior(f.samples, f.effect, f.data.sites.xy,
                                                 cells.cell_ids, cells.xy, f.data.n_days(),
                                                 cfg.duplicates);
    const auto d = region_dir(cfg.out, f.region);
    csv::Writer ws(d / "surface.csv", {"cell_id", "field", "mean", "sd"});
    csv::Writer wp(d / "percent.csv", {"cell_id", "percent", "flag"});
    for (const auto& fld : surf.fields) {
      for (std::size_t k = 0; k < cells.size(); ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        for (auto* w : {&ws, &top_surface}) {
          *w << cells.cell_ids[k] << fld.field << fld.mean[kk] << fld.sd[kk];
          w->end_row();
        }
      }
      extra["kriging"].push_back({{"region", f.region},
                                  {"field", fld.field},
                                  {"sill", fld.kernel.sill},
                                  {"range_km", fld.kernel.range},
                                  {"nugget", fld.kernel.nugget}});
    }
    const auto pct = inference::percent_of_total(surf.get("delta").mean, surf.get("theta_bar").mean);
    for (std::size_t k = 0; k < cells.size(); ++k)
      for (auto* w : {&wp, &top_percent}) {
        *w << cells.cell_ids[k] << pct[k].percent << inference::to_string(pct[k].flag);
        w->end_row();
      }
  }
  return extra;
}

json write_burden_outputs(const std::vector<RegionFit>& fits, const data::Grid& grid,
                          const RunConfig& cfg) {
  require_input(cfg.counties, "--counties");
  require_input(cfg.rates, "--rates");
  const auto table = health::load_rates(cfg.rates, cfg.age_groups, cfg.rr_increment);
  auto counties = health::load_counties(cfg.counties, table.groups.size());

  std::vector<std::size_t> covered;
  std::vector<MatrixXd> parts;
  Eigen::Index n_draws = -1;
  for (const auto& f : fits) {
    const auto idx = cells_for_block(grid, f.region, cfg);
    if (idx.empty()) continue;
    const auto cells = grid.subset(idx);
    parts.push_back(krige_effect_draws(f, cells.xy, cfg.duplicates));
    if (n_draws >= 0 && parts.back().cols() != n_draws)
      throw ValidationError("regions have different numbers of kept draws");
    n_draws = parts.back().cols();
    covered.insert(covered.end(), idx.begin(), idx.end());
  }
  if (covered.empty()) throw ValidationError("no grid cell lies in a fitted region");
  MatrixXd cell_draws(static_cast<Eigen::Index>(covered.size()), n_draws);
  Eigen::Index row = 0;
  for (const auto& p : parts) {
    cell_draws.middleRows(row, p.rows()) = p;
    row += p.rows();
  }
  const auto sub = grid.subset(covered);
  health::assign_cells(counties, sub);
  std::vector<std::size_t> kept;
  const MatrixXd exposure = health::county_exposure(cell_draws, counties, &kept);
  std::vector<health::County> used;
  for (std::size_t i : kept) used.push_back(counties[i]);
  const auto rows = health::burden_table(exposure, used, table);

  csv::Writer w(cfg.out / "burden.csv", {"fips", "age_group", "mean", "lo95", "hi95"});
  for (const auto& r : rows) {
    w << r.key << r.age_group << r.summary.mean << r.summary.lo95 << r.summary.hi95;
    w.end_row();
  }
  csv::Writer we(cfg.out / "county_exposure.csv", {"fips", "delta_mean", "lo95", "hi95"});
  for (std::size_t i = 0; i < used.size(); ++i) {
    std::vector<double> d(static_cast<std::size_t>(exposure.cols()));
    for (Eigen::Index k = 0; k < exposure.cols(); ++k) d[k] = exposure(static_cast<Eigen::Index>(i), k);
    const auto s = health::summarize(d);
    we << used[i].fips << s.mean << s.lo95 << s.hi95;
    we.end_row();
  }
  json excluded = json::array();
  for (const auto& c : counties)
    if (c.cells.empty()) excluded.push_back(c.fips);
  return json{{"counties_used", used.size()},
              {"counties_excluded", excluded},
              {"rr_increment", table.increment},
              {"interval", "95% posterior credible interval"}};
}

void merge_extra(json& into, const json& from) {
  for (const auto& [k, v] : from.items()) into[k] = v;
}

std::string hex(const unsigned char* p, unsigned n) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (unsigned i = 0; i < n; ++i) {
    s.push_back(digits[p[i] >> 4]);
    s.push_back(digits[p[i] & 15]);
  }
  return s;
}

}  // namespace

nlohmann::json RunConfig::to_json() const {
  json j;
  j["sites"] = sites.string();
  j["panel"] = panel.string();
  j["grid"] = grid.string();
  j["counties"] = counties.string();
  j["rates"] = rates.string();
  j["out"] = out.string();
  j["tau"] = tau;
  j["tau_grid"] = tau_grid;
  j["chain"] = chain_json(chain);
  j["cv"] = chain_json(cv_chain);
  j["folds"] = folds;
  j["seed"] = seed;
  j["jobs"] = jobs;
  j["merge_regions"] = merge_regions;
  j["phi1"] = phi1;
  j["phi2"] = phi2;
  json ages = json::array();
  for (const auto& [label, rr] : age_groups) ages.push_back({{"label", label}, {"relative_rate", rr}});
  j["age_groups"] = ages;
  j["rr_increment"] = rr_increment;
  j["acf_max_lag"] = acf_max_lag;
  j["trace_params"] = trace_params;
  j["duplicate_sites"] = duplicates == inference::DuplicatePolicy::error ? "error" : "average";
  const auto& sim = simulate;
  const auto& t = sim.truth;
  j["simulate"] = {
      {"regions", sim.layout.regions},
      {"sites_per_region", sim.layout.sites_per_region},
      {"extent_km", sim.layout.extent_km},
      {"region_gap_km", sim.layout.region_gap_km},
      {"n_days", sim.n_days},
      {"grid_spacing_km", sim.grid_spacing_km},
      {"county_block", sim.county_block},
      {"missing_fraction", sim.covariates.missing_fraction},
      {"baseline_rates", sim.baseline_rates},
      {"age_shares", sim.age_shares},
      {"truth",
       {{"mu_alpha0", t.mu_alpha0},         {"mu_beta0", t.mu_beta0},
        {"mu_alpha1", t.mu_alpha1},         {"mu_beta1", t.mu_beta1},
        {"sigma_alpha0_sq", t.sigma_alpha0_sq}, {"sigma_beta0_sq", t.sigma_beta0_sq},
        {"sigma_alpha1_sq", t.sigma_alpha1_sq}, {"sigma_beta1_sq", t.sigma_beta1_sq},
        {"phi2", t.phi2},                   {"sigma1_sq", t.sigma1_sq},
        {"sigma2_sq", t.sigma2_sq},         {"gamma", t.gamma},
        {"phi1", t.phi1},                   {"sigma_sq", t.sigma_sq},
        {"tau", t.tau}}}};
  return j;
}

void apply_config_json(RunConfig& cfg, const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "sites") cfg.sites = v.get<std::string>();
      else if (k == "panel") cfg.panel = v.get<std::string>();
      else if (k == "grid") cfg.grid = v.get<std::string>();
      else if (k == "counties") cfg.counties = v.get<std::string>();
      else if (k == "rates") cfg.rates = v.get<std::string>();
      else if (k == "out") cfg.out = v.get<std::string>();
      else if (k == "tau") cfg.tau = v.get<double>();
      else if (k == "tau_grid") cfg.tau_grid = v.get<std::vector<double>>();
      else if (k == "iters") cfg.chain.n_iter = v.get<int>();
      else if (k == "burnin") cfg.chain.burn_in = v.get<int>();
      else if (k == "thin") cfg.chain.thin = v.get<int>();
      else if (k == "cv") cfg.cv_chain = chain_json_overlay(cfg.cv_chain, v);
      else if (k == "folds") cfg.folds = v.get<int>();
      else if (k == "seed") cfg.seed = v.get<std::uint64_t>();
      else if (k == "jobs") cfg.jobs = v.get<int>();
      else if (k == "merge_regions") cfg.merge_regions = v.get<std::vector<std::string>>();
      else if (k == "phi1") cfg.phi1 = v.get<double>();
      else if (k == "phi2") cfg.phi2 = v.get<double>();
      else if (k == "rr_increment") cfg.rr_increment = v.get<double>();
      else if (k == "acf_max_lag") cfg.acf_max_lag = v.get<int>();
      else if (k == "trace_params") cfg.trace_params = v.get<std::vector<std::string>>();
      else if (k == "duplicate_sites") {
        const auto s = v.get<std::string>();
        if (s == "error") cfg.duplicates = inference::DuplicatePolicy::error;
        else if (s == "average") cfg.duplicates = inference::DuplicatePolicy::average;
        else throw ValidationError("duplicate_sites must be \"error\" or \"average\"");
      } else if (k == "priors") {
        for (const auto& [pk, pv] : v.items()) {
          auto& p = cfg.chain.priors;
          if (pk == "ig_shape") p.ig_shape = pv.get<double>();
          else if (pk == "ig_rate") p.ig_rate = pv.get<double>();
          else if (pk == "mu_prior_var") p.mu_prior_var = pv.get<double>();
          else if (pk == "rho_prior_var") p.rho_prior_var = pv.get<double>();
          else throw ValidationError("unknown prior key: " + pk);
        }
        cfg.cv_chain.priors = cfg.chain.priors;
      } else if (k == "age_groups") {
        cfg.age_groups.clear();
        for (const auto& g : v)
          cfg.age_groups.emplace_back(g.at("label").get<std::string>(),
                                      g.at("relative_rate").get<double>());
      } else if (k == "simulate") {
        auto& s = cfg.simulate;
        for (const auto& [sk, sv] : v.items()) {
          if (sk == "regions") s.layout.regions = sv.get<std::vector<std::string>>();
          else if (sk == "sites_per_region") s.layout.sites_per_region = sv.get<int>();
          else if (sk == "extent_km") s.layout.extent_km = sv.get<double>();
          else if (sk == "region_gap_km") s.layout.region_gap_km = sv.get<double>();
          else if (sk == "n_days") s.n_days = sv.get<Eigen::Index>();
          else if (sk == "grid_spacing_km") s.grid_spacing_km = sv.get<double>();
          else if (sk == "county_block") s.county_block = sv.get<int>();
          else if (sk == "missing_fraction") s.covariates.missing_fraction = sv.get<double>();
          else if (sk == "baseline_rates") s.baseline_rates = sv.get<std::vector<double>>();
          else if (sk == "age_shares") s.age_shares = sv.get<std::vector<double>>();
          else if (sk == "truth") {
            auto& t = s.truth;
            const std::map<std::string, double*> fields{
                {"mu_alpha0", &t.mu_alpha0},         {"mu_beta0", &t.mu_beta0},
                {"mu_alpha1", &t.mu_alpha1},         {"mu_beta1", &t.mu_beta1},
                {"sigma_alpha0_sq", &t.sigma_alpha0_sq}, {"sigma_beta0_sq", &t.sigma_beta0_sq},
                {"sigma_alpha1_sq", &t.sigma_alpha1_sq}, {"sigma_beta1_sq", &t.sigma_beta1_sq},
                {"phi2", &t.phi2},                   {"sigma1_sq", &t.sigma1_sq},
                {"sigma2_sq", &t.sigma2_sq},         {"gamma", &t.gamma},
                {"phi1", &t.phi1},                   {"sigma_sq", &t.sigma_sq},
                {"tau", &t.tau}};
            for (const auto& [tk, tv] : sv.items()) {
              const auto it = fields.find(tk);
              if (it == fields.end()) throw ValidationError("unknown truth key: " + tk);
              *it->second = tv.get<double>();
            }
          } else {
            throw ValidationError("unknown simulate key: " + sk);
          }
        }
      } else {
        throw ValidationError("unknown config key: " + k);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config value has the wrong type: ") + e.what());
  }
}

std::string merged_label(const std::vector<std::string>& regions) {
  std::vector<std::string> sorted(regions);
  std::sort(sorted.begin(), sorted.end());
  std::string s;
  for (const auto& r : sorted) s += (s.empty() ? "" : "+") + r;
  return s;
}

std::uint32_t region_chain_id(const std::string& region) {
  std::uint32_t h = 2166136261u;
  for (unsigned char ch : region) {
    h ^= ch;
    h *= 16777619u;
  }
  return h;
}

std::vector<data::RegionBlock> load_blocks(const RunConfig& cfg) {
  require_input(cfg.sites, "--sites");
  require_input(cfg.panel, "--panel");
  data::LoadOptions opts;
  opts.tau = cfg.tau;
  auto panel = data::load_panel(cfg.sites, cfg.panel, opts);
  if (!cfg.merge_regions.empty()) {
    const std::set<std::string> present(panel.sites.regions.begin(), panel.sites.regions.end());
    const std::set<std::string> wanted(cfg.merge_regions.begin(), cfg.merge_regions.end());
    if (wanted.size() != cfg.merge_regions.size())
      throw ValidationError("--merge-regions lists a region more than once");
    if (wanted.size() < 2) throw ValidationError("--merge-regions needs at least two regions");
    for (const auto& r : wanted)
      if (!present.count(r)) throw ValidationError("--merge-regions: unknown region " + r);
    panel = data::merge_regions(panel, cfg.merge_regions, merged_label(cfg.merge_regions));
  }
  return data::partition_regions(panel);
}

RegionFit fit_region(const data::RegionBlock& block, const RunConfig& cfg) {
  RegionFit f;
  f.region = block.region;
  f.data = block.data;
  spdlog::info("region {}: {} sites, {} days, {} masked cells", f.region, f.data.n_sites(),
               f.data.n_days(), f.data.n_missing());
  if (cfg.phi1 > 0.0 && cfg.phi2 > 0.0) {
    f.ranges.phi1 = cfg.phi1;
    f.ranges.phi2 = cfg.phi2;
  } else {
    f.ranges = gibbs::estimate_ranges(f.data);
    if (cfg.phi1 > 0.0) f.ranges.phi1 = cfg.phi1;
    if (cfg.phi2 > 0.0) f.ranges.phi2 = cfg.phi2;
  }
  gibbs::ChainConfig chain = cfg.chain;
  chain.seed = cfg.seed;
  chain.chain_id = region_chain_id(f.region);
  chain.phi1 = f.ranges.phi1;
  chain.phi2 = f.ranges.phi2;
  if (!cfg.out.empty()) chain.checkpoint_path = region_dir(cfg.out, f.region) / "checkpoint.json";
  spdlog::info("region {}: phi1 {:.4g} km, phi2 {:.4g} km, {} iterations", f.region, chain.phi1,
               chain.phi2, chain.n_iter);
  f.samples = gibbs::run_chain(f.data, chain);
  f.effect = inference::causal_effect(f.samples, f.data.c);
  return f;
}

void write_samples(const fs::path& path, const gibbs::PosteriorSamples& s,
                   const std::string& qualifier) {
  csv::Writer w(path, {"iter", "param", "site_id", "value"});
  append_samples(w, s, qualifier);
}

gibbs::PosteriorSamples read_samples(const fs::path& path,
                                     const std::vector<std::string>& site_ids) {
  const auto t = csv::read(path);
  csv::require_header(t, {"iter", "param", "site_id", "value"});
  gibbs::PosteriorSamples s;
  s.site_ids = site_ids;
  std::map<std::string, Eigen::Index> site_index;
  for (std::size_t i = 0; i < site_ids.size(); ++i)
    site_index[site_ids[i]] = static_cast<Eigen::Index>(i);
  std::map<long, std::size_t> draw_index;
  std::map<std::string, std::map<std::size_t, std::vector<double>>> site_values;
  const std::set<std::string> scalar_names(gibbs::kScalarNames.begin(), gibbs::kScalarNames.end());
  const auto n = static_cast<Eigen::Index>(site_ids.size());

  for (const auto& row : t.rows) {
    const long it = csv::parse_int(t, row, 0);
    auto [pos, inserted] = draw_index.emplace(it, draw_index.size());
    if (inserted) s.iterations.push_back(static_cast<int>(it));
    const std::string& param = row.fields[1];
    const double v = row.fields[3] == "NA" ? kNaN : csv::parse_double(t, row, 3);
    if (row.fields[2].empty()) {
      if (!scalar_names.count(param))
        throw ValidationError(fmt::format("{}:{}: unknown parameter {}", path.string(), row.line, param));
      s.scalars[param].push_back(v);
    } else {
      const auto si = site_index.find(row.fields[2]);
      if (si == site_index.end())
        throw ValidationError(
            fmt::format("{}:{}: unknown site {}", path.string(), row.line, row.fields[2]));
      auto& vec = site_values[param][pos->second];
      if (vec.empty()) vec.assign(static_cast<std::size_t>(n), kNaN);
      vec[static_cast<std::size_t>(si->second)] = v;
    }
  }
  const auto draws = static_cast<Eigen::Index>(s.iterations.size());
  for (const auto& name : gibbs::kScalarNames)
    if (static_cast<Eigen::Index>(s.scalars[name].size()) != draws)
      throw ValidationError(path.string() + ": parameter " + name + " has missing draws");
  auto to_matrix = [&](const std::string& param) {
    MatrixXd m(draws, n);
    const auto& by_draw = site_values[param];
    for (Eigen::Index r = 0; r < draws; ++r) {
      const auto it = by_draw.find(static_cast<std::size_t>(r));
      if (it == by_draw.end())
        throw ValidationError(path.string() + ": parameter " + param + " has missing draws");
      for (Eigen::Index i = 0; i < n; ++i) m(r, i) = it->second[static_cast<std::size_t>(i)];
    }
    if (!m.allFinite())
      throw ValidationError(path.string() + ": parameter " + param + " is missing sites");
    return m;
  };
  for (int f = 0; f < 4; ++f) s.bias_draws[f] = to_matrix(gibbs::kFieldNames[f]);
  s.effect_draws = to_matrix("effect");
  s.theta_bar_draws = to_matrix("theta_bar");
  return s;
}

MatrixXd krige_effect_draws(const RegionFit& fit, const spatial::Coords& cells,
                            inference::DuplicatePolicy dup) {
  const auto kernel = inference::fit_kernel(fit.effect.mean, fit.data.sites.xy, 0.0);
  const inference::OrdinaryKriging ok(fit.data.sites.xy, cells, kernel, dup);
  return ok.predict_columns(fit.effect.draws.transpose());
}

BlockingResult blocking_sensitivity(const data::PanelDataset& data, const data::Grid& grid,
                                    const std::string& region_a, const std::string& region_b,
                                    const RunConfig& cfg) {
  if (region_a == region_b) throw ValidationError("blocking needs two different regions");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.sites.size(); ++i)
    if (data.sites.regions[i] == region_a || data.sites.regions[i] == region_b) idx.push_back(i);
  const auto ab = data.subset_sites(idx);
  const std::set<std::string> present(ab.sites.regions.begin(), ab.sites.regions.end());
  for (const auto& r : {region_a, region_b})
    if (!present.count(r)) throw ValidationError("blocking: region " + r + " has no sites");

  RunConfig run = cfg;
  run.out.clear();
  const auto blocks = data::partition_regions(ab);
  const std::string joint_label = merged_label({region_a, region_b});
  data::RegionBlock joint;
  joint.region = joint_label;
  joint.data = data::merge_regions(ab, {region_a, region_b}, joint_label);
  for (std::size_t i = 0; i < idx.size(); ++i) joint.site_indices.push_back(i);

  BlockingResult out;
  std::vector<std::size_t> cell_idx;
  for (std::size_t k = 0; k < grid.size(); ++k)
    if (grid.regions[k] == region_a || grid.regions[k] == region_b) cell_idx.push_back(k);
  if (cell_idx.empty()) throw ValidationError("blocking: no grid cells in the two regions");
  const auto cells = grid.subset(cell_idx);
  out.cell_ids = cells.cell_ids;
  out.regions = cells.regions;
  out.joint.resize(static_cast<Eigen::Index>(cells.size()));
  out.separate.resize(static_cast<Eigen::Index>(cells.size()));

  auto krige_mean = [&](const RegionFit& f, const spatial::Coords& xy) {
    const auto kernel = inference::fit_kernel(f.effect.mean, f.data.sites.xy, 0.0);
    return inference::OrdinaryKriging(f.data.sites.xy, xy, kernel, cfg.duplicates)
        .predict(f.effect.mean);
  };
  const auto jf = fit_region(joint, run);
  out.joint = krige_mean(jf, cells.xy);
  for (const auto& b : blocks) {
    const auto f = fit_region(b, run);
    std::vector<std::size_t> mine;
    for (std::size_t k = 0; k < cells.size(); ++k)
      if (cells.regions[k] == b.region) mine.push_back(k);
    if (mine.empty()) continue;
    const auto sub = cells.subset(mine);
    const Eigen::VectorXd pred = krige_mean(f, sub.xy);
    for (std::size_t k = 0; k < mine.size(); ++k)
      out.separate[static_cast<Eigen::Index>(mine[k])] = pred[static_cast<Eigen::Index>(k)];
  }
  const Eigen::VectorXd diff = out.joint - out.separate;
  out.max_abs_diff = diff.cwiseAbs().maxCoeff();
  const Eigen::ArrayXd a = out.joint.array() - out.joint.mean();
  const Eigen::ArrayXd b = out.separate.array() - out.separate.mean();
  const double den = std::sqrt((a * a).sum() * (b * b).sum());
  out.correlation = den > 0.0 ? (a * b).sum() / den : kNaN;
  return out;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw IoError("SHA-256 unavailable");
  }
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  return hex(md, len);
}

void write_manifest(const fs::path& out, const std::string& subcommand, const RunConfig& cfg,
                    const std::string& status, const nlohmann::json& extra,
                    const std::string& error) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(out)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), out).generic_string();
    if (rel == "manifest.json") continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  json artifacts = json::array();
  for (const auto& f : files)
    artifacts.push_back(
        {{"path", f}, {"sha256", sha256_file(out / f)}, {"bytes", fs::file_size(out / f)}});
  json j{{"tool", "smokecausal"},
         {"version", "1.0.0"},
         {"subcommand", subcommand},
         {"status", status},
         {"config", cfg.to_json()},
         {"artifacts", artifacts},
         {"details", extra}};
  if (!error.empty()) j["error"] = error;
  write_json(out / "manifest.json", j);
}

nlohmann::json cmd_simulate(const RunConfig& cfg) {
  require_out(cfg);
  const auto& sc = cfg.simulate;
  sc.truth.validate();
  if (sc.n_days < 1) throw ValidationError("simulate: n_days must be >= 1");
  const auto sites = synth::simulate_sites(sc.layout, cfg.seed);
  auto sim = synth::simulate_panel(sites, sc.n_days, sc.truth, sc.covariates, cfg.seed);
  const auto grid =
      synth::simulate_grid(sc.layout, sc.grid_spacing_km, sc.county_block, sites.projection);
  data::write_sites(cfg.out / "sites.csv", sites);
  data::write_panel(cfg.out / "panel.csv", sim.data);
  data::write_grid(cfg.out / "grid.csv", grid);

  const std::size_t n_groups = cfg.age_groups.size();
  std::vector<double> shares = sc.age_shares;
  if (shares.size() != n_groups) {
    shares.assign(n_groups, 1.0 / static_cast<double>(n_groups));
    double rest = 1.0;
    for (std::size_t g = 0; g + 1 < n_groups; ++g) rest -= shares[g];
    shares.back() = rest;
  }
  std::vector<std::string> header{"fips", "population"};
  for (std::size_t g = 1; g <= n_groups; ++g) header.push_back("share_g" + std::to_string(g));
  csv::Writer wc(cfg.out / "counties.csv", header);
  std::set<std::string> fips(grid.county_fips.begin(), grid.county_fips.end());
  rng::Philox4x32 g(cfg.seed, rng::Tag::SimSites, 1);
  for (const auto& f : fips) {
    wc << f << std::round(20000.0 + 180000.0 * rng::uniform(g));
    for (double s : shares) wc << s;
    wc.end_row();
  }
  csv::Writer wr(cfg.out / "baseline_rates.csv", {"age_group", "r0"});
  for (std::size_t k = 0; k < n_groups; ++k) {
    wr << cfg.age_groups[k].first
       << (k < sc.baseline_rates.size() ? sc.baseline_rates[k] : sc.baseline_rates.back());
    wr.end_row();
  }

  csv::Writer wt(cfg.out / "truth_sites.csv",
                 {"site_id", "alpha0", "beta0", "alpha1", "beta1", "delta_bar", "theta_bar"});
  const MatrixXd cd = sim.data.c.cast<double>();
  const Eigen::VectorXd effect = cd.cwiseProduct(sim.delta).rowwise().mean();
  const Eigen::VectorXd theta_bar = sim.theta.rowwise().mean();
  for (std::size_t i = 0; i < sites.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    wt << sites.ids[i] << sim.bias.alpha0[k] << sim.bias.beta0[k] << sim.bias.alpha1[k]
       << sim.bias.beta1[k] << effect[k] << theta_bar[k];
    wt.end_row();
  }
  return json{{"n_sites", sites.size()},
              {"n_days", sc.n_days},
              {"n_cells", grid.size()},
              {"n_counties", fips.size()},
              {"masked_cells", sim.data.n_missing()}};
}

nlohmann::json cmd_fit(const RunConfig& cfg) {
  require_out(cfg);
  const auto fits = fit_all(cfg);
  json extra = write_fit_outputs(fits, cfg);
  merge_extra(extra, write_diagnostic_outputs(fits, cfg));
  return extra;
}

nlohmann::json cmd_diagnose(const RunConfig& cfg) {
  require_out(cfg);
  return write_diagnostic_outputs(load_fits(cfg), cfg);
}

nlohmann::json cmd_predict(const RunConfig& cfg) {
  require_out(cfg);
  require_input(cfg.grid, "--grid");
  const auto fits = load_fits(cfg);
  const auto grid = data::load_grid(cfg.grid, fits.front().data.sites.projection);
  return write_predict_outputs(fits, grid, cfg);
}

nlohmann::json cmd_cv(const RunConfig& cfg) {
  require_out(cfg);
  require_input(cfg.sites, "--sites");
  require_input(cfg.panel, "--panel");
  data::LoadOptions opts;
  opts.tau = cfg.tau;
  const auto panel = data::load_panel(cfg.sites, cfg.panel, opts);
  cv::CvConfig cc;
  cc.folds = cfg.folds;
  cc.seed = cfg.seed;
  cc.jobs = cfg.jobs > 0 ? cfg.jobs : 1;
  gibbs::ChainConfig chain = cfg.cv_chain;
  chain.seed = cfg.seed;
  chain.priors = cfg.chain.priors;
  chain.phi1 = cfg.phi1;
  chain.phi2 = cfg.phi2;
  const auto table = cv::tau_selection(panel, cfg.tau_grid, cc, chain);
  csv::Writer w(cfg.out / "cv.csv", {"tau", "fold", "mse", "rmse", "mad", "sd", "coverage"});
  for (const auto& r : table.rows) {
    w << r.tau << (r.fold == 0 ? std::string("pooled") : std::to_string(r.fold));
    if (r.skipped) {
      w << kNaN << kNaN << kNaN << kNaN << kNaN;
    } else {
      w << r.metrics.mse << r.metrics.rmse << r.metrics.mad << r.metrics.sd << r.metrics.coverage;
    }
    w.end_row();
  }
  return json{{"recommended_tau", table.recommended_tau}, {"notes", table.notes}};
}

nlohmann::json cmd_burden(const RunConfig& cfg) {
  require_out(cfg);
  require_input(cfg.grid, "--grid");
  require_input(cfg.counties, "--counties");
  require_input(cfg.rates, "--rates");
  const auto fits = load_fits(cfg);
  const auto grid = data::load_grid(cfg.grid, fits.front().data.sites.projection);
  return write_burden_outputs(fits, grid, cfg);
}

nlohmann::json cmd_blocking(const RunConfig& cfg) {
  require_out(cfg);
  require_input(cfg.sites, "--sites");
  require_input(cfg.panel, "--panel");
  require_input(cfg.grid, "--grid");
  if (cfg.merge_regions.size() != 2)
    throw ValidationError("blocking needs exactly two regions in --merge-regions");
  data::LoadOptions opts;
  opts.tau = cfg.tau;
  const auto panel = data::load_panel(cfg.sites, cfg.panel, opts);
  const auto grid = data::load_grid(cfg.grid, panel.sites.projection);
  const auto r = blocking_sensitivity(panel, grid, cfg.merge_regions[0], cfg.merge_regions[1], cfg);
  csv::Writer w(cfg.out / "blocking.csv",
                {"cell_id", "region", "delta_joint", "delta_separate", "diff"});
  for (std::size_t k = 0; k < r.cell_ids.size(); ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    w << r.cell_ids[k] << r.regions[k] << r.joint[kk] << r.separate[kk]
      << r.joint[kk] - r.separate[kk];
    w.end_row();
  }
  const json summary{{"regions", cfg.merge_regions},
                     {"n_cells", r.cell_ids.size()},
                     {"max_abs_diff", r.max_abs_diff},
                     {"correlation", r.correlation}};
  write_json(cfg.out / "blocking_summary.json", summary);
  return summary;
}

nlohmann::json cmd_end_to_end(const RunConfig& cfg) {
  require_out(cfg);
  require_input(cfg.sites, "--sites");
  require_input(cfg.panel, "--panel");
  require_input(cfg.grid, "--grid");
  require_input(cfg.counties, "--counties");
  require_input(cfg.rates, "--rates");
  const auto fits = fit_all(cfg);
  json extra = write_fit_outputs(fits, cfg);
  merge_extra(extra, write_diagnostic_outputs(fits, cfg));
  const auto grid = data::load_grid(cfg.grid, fits.front().data.sites.projection);
  merge_extra(extra, write_predict_outputs(fits, grid, cfg));
  merge_extra(extra, write_burden_outputs(fits, grid, cfg));
  return extra;
}

void run_subcommand(const std::string& name, const RunConfig& cfg) {
  using Fn = nlohmann::json (*)(const RunConfig&);
  static const std::map<std::string, Fn> table{
      {"simulate", cmd_simulate}, {"fit", cmd_fit},       {"diagnose", cmd_diagnose},
      {"predict", cmd_predict},   {"cv", cmd_cv},         {"burden", cmd_burden},
      {"blocking", cmd_blocking}, {"e2e", cmd_end_to_end}};
  const auto it = table.find(name);
  if (it == table.end()) throw ValidationError("unknown subcommand: " + name);
  try {
    const json extra = it->second(cfg);
    write_manifest(cfg.out, name, cfg, "ok", extra);
  } catch (const std::exception& e) {
    if (!cfg.out.empty() && fs::is_directory(cfg.out)) {
      try {
        write_manifest(cfg.out, name, cfg, "failed", json::object(), e.what());
      } catch (const std::exception& m) {
        spdlog::error("could not write manifest: {}", m.what());
      }
    }
    throw;
  }
}

}  // namespace smokecausal::pipeline
