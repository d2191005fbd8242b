// smokecausal: command-line driver for the fire/no-fire spatial causal pipeline.

#include "smokecausal/errors.hpp"
#include "smokecausal/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

namespace sc = smokecausal;
namespace pl = smokecausal::pipeline;

namespace {

void configure_logging() {
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::info);
  const char* env = std::getenv("SMOKECAUSAL_LOG");
  if (!env) return;
  const std::string v = env;
  if (v == "error") spdlog::set_level(spdlog::level::err);
  else if (v == "warn") spdlog::set_level(spdlog::level::warn);
  else if (v == "info") spdlog::set_level(spdlog::level::info);
  else if (v == "debug") spdlog::set_level(spdlog::level::debug);
  else spdlog::warn("SMOKECAUSAL_LOG={} not recognised; using info", v);
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split(s)) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stod(item, &pos));
      if (pos != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw sc::ValidationError("--tau-grid: not a number: " + item);
    }
  }
  if (out.empty()) throw sc::ValidationError("--tau-grid is empty");
  return out;
}

struct Flags {
  std::string sites, panel, grid, counties, rates, out, config, tau_grid, merge, trace;
  double tau = 0.0;
  int iters = 0, burnin = 0, thin = 0, folds = 0, jobs = 0;
  std::uint64_t seed = 0;
};

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"Bayesian spatial causal inference for wildfire-attributable PM2.5"};
  app.require_subcommand(1, 1);
  Flags f;
  std::map<std::string, CLI::Option*> opt;

  const std::vector<std::pair<std::string, std::string>> subs{
      {"simulate", "write a synthetic dataset with known truth"},
      {"fit", "fit each region and write samples, effects and diagnostics"},
      {"diagnose", "recompute diagnostics from an existing fit"},
      {"predict", "krige posterior summaries to grid cells"},
      {"cv", "k-fold site cross-validation over a smoke-threshold grid"},
      {"burden", "excess hospitalizations from an existing fit"},
      {"blocking", "joint versus separate fits of two regions"},
      {"e2e", "fit, diagnose, predict and burden in one run"}};
  for (const auto& [name, help] : subs) {
    auto* s = app.add_subcommand(name, help);
    opt["sites"] = s->add_option("--sites", f.sites, "sites.csv");
    opt["panel"] = s->add_option("--panel", f.panel, "panel.csv");
    opt["grid"] = s->add_option("--grid", f.grid, "grid.csv");
    opt["counties"] = s->add_option("--counties", f.counties, "counties.csv");
    opt["rates"] = s->add_option("--rates", f.rates, "baseline_rates.csv");
    opt["out"] = s->add_option("--out", f.out, "output directory");
    opt["tau"] = s->add_option("--tau", f.tau, "smoke threshold (ug/m3)");
    opt["tau-grid"] = s->add_option("--tau-grid", f.tau_grid, "comma-separated thresholds for cv");
    opt["iters"] = s->add_option("--iters", f.iters, "total MCMC iterations");
    opt["burnin"] = s->add_option("--burnin", f.burnin, "burn-in iterations");
    opt["thin"] = s->add_option("--thin", f.thin, "keep every thin-th iteration");
    opt["folds"] = s->add_option("--folds", f.folds, "cross-validation folds");
    opt["seed"] = s->add_option("--seed", f.seed, "random seed");
    opt["jobs"] = s->add_option("--jobs", f.jobs, "parallel region or fold jobs");
    opt["config"] = s->add_option("--config", f.config, "JSON config file");
    opt["merge-regions"] =
        s->add_option("--merge-regions", f.merge, "comma-separated regions to fit jointly");
    opt["trace"] = s->add_option("--trace", f.trace, "comma-separated scalar parameters for trace.csv");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  auto* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  auto given = [&](const char* flag) { return sub->count(std::string("--") + flag) > 0; };

  try {
    pl::RunConfig cfg;
    if (given("config")) {
      std::ifstream is(f.config);
      if (!is) throw sc::ValidationError("config file not found: " + f.config);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(is);
      } catch (const nlohmann::json::exception& e) {
        throw sc::ValidationError("config " + f.config + " is not valid JSON: " + e.what());
      }
      pl::apply_config_json(cfg, j);
    }
    if (given("sites")) cfg.sites = f.sites;
    if (given("panel")) cfg.panel = f.panel;
    if (given("grid")) cfg.grid = f.grid;
    if (given("counties")) cfg.counties = f.counties;
    if (given("rates")) cfg.rates = f.rates;
    if (given("out")) cfg.out = f.out;
    if (given("tau")) cfg.tau = f.tau;
    if (given("tau-grid")) cfg.tau_grid = parse_grid(f.tau_grid);
    // Chain-length flags set the per-fold chains for cv and the main chain otherwise.
    auto& chain = name == "cv" ? cfg.cv_chain : cfg.chain;
    if (given("iters")) chain.n_iter = f.iters;
    if (given("burnin")) chain.burn_in = f.burnin;
    if (given("thin")) chain.thin = f.thin;
    if (given("folds")) cfg.folds = f.folds;
    if (given("seed")) cfg.seed = f.seed;
    if (given("jobs")) cfg.jobs = f.jobs;
    if (given("merge-regions")) cfg.merge_regions = split(f.merge);
    if (given("trace")) cfg.trace_params = split(f.trace);
    if (cfg.out.empty()) throw sc::ValidationError("--out is required");
    if (name != "blocking" && !cfg.merge_regions.empty() && cfg.merge_regions.size() < 2)
      throw sc::ValidationError("--merge-regions needs at least two regions");

    pl::run_subcommand(name, cfg);
    spdlog::info("{} finished; artifacts in {}", name, cfg.out.string());
    return 0;
  } catch (const sc::ValidationError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const sc::NumericalError& e) {
    spdlog::error("{}", e.what());
    return 3;
  } catch (const sc::IoError& e) {
    spdlog::error("{}", e.what());
    return 4;
  } catch (const std::filesystem::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return 4;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 3;
  }
}
