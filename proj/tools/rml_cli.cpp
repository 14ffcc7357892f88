#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "rml/config.hpp"
#include "rml/diagnostics.hpp"
#include "rml/oracle.hpp"
#include "rml/rml.hpp"

namespace fs = std::filesystem;
using namespace rml;

namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> particles;
  std::optional<std::size_t> steps;
  std::string study;
  std::string trace;
};

fs::path output_path(const Options& opt, const RunConfig& cfg, const char* command) {
  if (!opt.out.empty()) return opt.out;
  if (!cfg.io.output.empty()) return cfg.io.output;
  throw ConfigError("io.output", std::string(command) + " needs --out or io.output");
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

fs::path sibling(const fs::path& path, const std::string& suffix) {
  fs::path p = path;
  p.replace_filename(path.stem().string() + suffix + path.extension().string());
  return p;
}

int cmd_simulate(const Options& opt) {
  RunConfig cfg = load_config(opt.config);
  const std::size_t steps = opt.steps.value_or(cfg.simulate.steps);
  const std::uint64_t seed = opt.seed.value_or(cfg.simulate.seed);
  if (steps < 1) throw ConfigError("simulate.steps", "must be at least 1");
  fs::path out = opt.out;
  if (out.empty()) out = cfg.io.observations;
  if (out.empty()) throw ConfigError("io.observations", "simulate needs --out or io.observations");
  const auto model = make_model(cfg);
  const SimulatedPath path = simulate(*model, cfg.simulation_theta(), steps, RngStream(seed));
  write_rows(out, path.observations);
  write_rows(sibling(out, "_states"), path.states);
  std::cout << "wrote " << steps << " observations to " << out.string() << '\n';
  return 0;
}

Matrix load_fit_observations(const RunConfig& cfg, const StateSpaceModel& model) {
  if (cfg.io.observations.empty()) throw ConfigError("io.observations", "missing");
  Matrix obs = read_observations(cfg.io.observations);
  if (static_cast<std::size_t>(obs.rows()) != model.obs_dim()) {
    throw Error("observation file has " + std::to_string(obs.rows()) + " columns, model expects " +
                std::to_string(model.obs_dim()));
  }
  return obs;
}

RunTrace fit(const RunConfig& cfg, const StateSpaceModel& model, const Matrix& obs, std::size_t particles,
             std::uint64_t seed) {
  RmlOptions ro;
  ro.particles = particles;
  ro.seed = seed;
  return run(model, cfg.initial_point(), cfg.step_schedule(), obs, ro);
}

int cmd_fit(const Options& opt) {
  RunConfig cfg = load_config(opt.config);
  const auto model = make_model(cfg);
  Matrix obs = load_fit_observations(cfg, *model);
  if (opt.steps) obs.conservativeResize(Eigen::NoChange, std::min<Eigen::Index>(obs.cols(), *opt.steps));
  const fs::path out = output_path(opt, cfg, "fit");
  const RunTrace trace = fit(cfg, *model, obs, opt.particles.value_or(cfg.smc.particles), opt.seed.value_or(cfg.smc.seed));
  std::ofstream os = open_out(out);
  write_trace(os, trace);
  if (!os) throw Error("failed writing " + out.string());
  const Vector theta = trace.final_theta();
  std::cout << "theta";
  char buf[40];
  for (Eigen::Index k = 0; k < theta.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.17g", theta[k]);
    std::cout << ' ' << cfg.model.free[static_cast<std::size_t>(k)] << '=' << buf;
  }
  std::cout << "\nprojection_hits " << trace.projection_hits() << '\n';
  return 0;
}

// Data for the likelihood oracle: simulated at study.theta_true when given,
// otherwise the observation file.
Matrix oracle_data(const RunConfig& cfg, const StateSpaceModel& model) {
  const StudyConfig& st = *cfg.study;
  if (st.theta_true) return simulate(model, *st.theta_true, st.oracle_length, RngStream(st.oracle_seed)).observations;
  return load_fit_observations(cfg, model);
}

std::unique_ptr<diagnostics::LikelihoodOracle> make_oracle(const RunConfig& cfg,
                                                           const std::shared_ptr<StateSpaceModel>& model) {
  const Matrix data = oracle_data(cfg, *model);
  if (cfg.model.family == "ar1") {
    const Box& x = cfg.model.state_box;
    const double width = x.upper()[0] - x.lower()[0];
    oracle::LinearGaussModel lg{cfg.layout(), 0.5 * (x.lower()[0] + x.upper()[0]), width * width / 12.0};
    return std::make_unique<diagnostics::KalmanOracle>(lg, data);
  }
  if (cfg.model.family == "grid_ar1") {
    auto grid = std::static_pointer_cast<const oracle::GridModel>(model);
    return std::make_unique<diagnostics::GridOracle>(grid, grid->uniform_law(), data);
  }
  throw Error("unsupported study: no oracle for family '" + cfg.model.family + "'");
}

int study_bias(const Options& opt, const RunConfig& cfg, const std::shared_ptr<StateSpaceModel>& model,
               const fs::path& out) {
  const StudyConfig& st = *cfg.study;
  if (cfg.model.family != "grid_ar1") {
    throw Error("unsupported study: bias study needs an exact oracle (family grid_ar1), got '" + cfg.model.family + "'");
  }
  diagnostics::BiasStudyOptions bo;
  bo.particles = st.particles;
  if (opt.particles) bo.particles = {*opt.particles};
  if (bo.particles.empty()) throw ConfigError("study.particles", "bias study needs particle counts");
  bo.seeds = st.seeds;
  bo.steps = opt.steps.value_or(st.steps);
  bo.window = std::min(st.window, bo.steps);
  bo.first_seed = opt.seed.value_or(cfg.smc.seed);
  const Vector theta = st.theta.value_or(cfg.model.theta0);
  const auto& grid = static_cast<const oracle::GridModel&>(*model);
  const Matrix obs = simulate(grid, theta, bo.steps + 1, RngStream(st.oracle_seed)).observations;
  const auto result = diagnostics::bias_vs_particles(grid, {theta, cfg.model.theta_box}, obs, bo);
  std::ofstream table = open_out(out);
  diagnostics::write_bias_table(table, result);
  std::ofstream records = open_out(fs::path(out.string() + ".jsonl"));
  diagnostics::write_bias_records(records, result);
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", result.slope);
  std::cout << "slope " << buf << '\n';
  return 0;
}

int study_tail(const Options& opt, const RunConfig& cfg, const std::shared_ptr<StateSpaceModel>& model,
               const fs::path& out) {
  const StudyConfig& st = *cfg.study;
  std::vector<diagnostics::TailStudyResult> rows;
  if (!opt.trace.empty()) {
    std::ifstream in(opt.trace);
    if (!in) throw Error("cannot read trace " + opt.trace);
    const RunTrace trace = read_trace(in);
    const auto oracle = make_oracle(cfg, model);
    rows.push_back(diagnostics::tail_gradient_stats(trace, *oracle, st.tail_fraction, st.max_evaluations));
    rows.back().particles = opt.particles.value_or(cfg.smc.particles);
  } else {
    std::vector<std::size_t> counts = st.particles;
    if (opt.particles) counts = {*opt.particles};
    if (counts.empty()) {
      throw Error("tail study needs either --trace PATH or run parameters (study.particles)");
    }
    const auto oracle = make_oracle(cfg, model);
    Matrix obs = load_fit_observations(cfg, *model);
    if (opt.steps) obs.conservativeResize(Eigen::NoChange, std::min<Eigen::Index>(obs.cols(), *opt.steps));
    for (std::size_t n : counts) {
      const RunTrace trace = fit(cfg, *model, obs, n, opt.seed.value_or(cfg.smc.seed));
      rows.push_back(diagnostics::tail_gradient_stats(trace, *oracle, st.tail_fraction, st.max_evaluations));
      rows.back().particles = n;
    }
  }
  std::ofstream table = open_out(out);
  diagnostics::write_tail_table(table, rows);
  std::ofstream records = open_out(fs::path(out.string() + ".jsonl"));
  diagnostics::write_tail_records(records, rows);
  for (const auto& r : rows) {
    char buf[120];
    std::snprintf(buf, sizeof buf, "N=%zu tail_grad_norm %.6g stderr %.3g", r.particles, r.mean_gradient_norm, r.stderr);
    std::cout << buf << '\n';
  }
  return 0;
}

int cmd_study(const Options& opt) {
  RunConfig cfg = load_config(opt.config);
  if (!cfg.study) throw ConfigError("study", "missing (required by the study command)");
  const fs::path out = output_path(opt, cfg, "study");
  const auto model = make_model(cfg);
  if (opt.study == "bias") return study_bias(opt, cfg, model, out);
  return study_tail(opt, cfg, model, out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recursive maximum likelihood for state-space models"};
  app.require_subcommand(1);
  Options opt;

  auto common = [&opt](CLI::App* sub) {
    sub->add_option("--config", opt.config, "JSON run configuration")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", opt.out, "output path (overrides io.output)");
    sub->add_option("--seed", opt.seed, "random seed (overrides the config)");
    sub->add_option("--particles", opt.particles, "particle count (overrides the config)")
        ->check(CLI::PositiveNumber);
    sub->add_option("--steps", opt.steps, "number of time steps")->check(CLI::PositiveNumber);
  };
  auto* sim = app.add_subcommand("simulate", "simulate observations from the configured model");
  common(sim);
  auto* fit_cmd = app.add_subcommand("fit", "run the online estimator over an observation file");
  common(fit_cmd);
  auto* study = app.add_subcommand("study", "bias or tail study against an exact oracle");
  common(study);
  study->add_option("--study", opt.study, "study kind")->required()->check(CLI::IsMember({"bias", "tail"}));
  study->add_option("--trace", opt.trace, "trace from a previous fit (tail study)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (sim->parsed()) return cmd_simulate(opt);
    if (fit_cmd->parsed()) return cmd_fit(opt);
    return cmd_study(opt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
