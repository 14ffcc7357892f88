#ifndef RML_CONFIG_HPP
#define RML_CONFIG_HPP

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rml/core.hpp"
#include "rml/models.hpp"

namespace rml {

struct ModelConfig {
  std::string family;  // ar1 | sv | grid_ar1
  Box state_box;
  Box obs_box;
  std::map<std::string, double> constants;
  std::vector<std::string> free;
  Vector theta0;
  Box theta_box;
  Vector grid_points;  // grid_ar1 only
  double grid_atom = 1.0;
};

struct SmcConfig {
  std::size_t particles = 100;
  std::uint64_t seed = 1;
};

struct ScheduleConfig {
  double a0 = 0.1;
  double a = 1.0;
  std::uint64_t n0 = 0;
};

struct IoConfig {
  std::filesystem::path observations;
  std::filesystem::path output;
};

struct SimulateConfig {
  std::optional<Vector> theta;  // defaults to model.theta0
  std::size_t steps = 1000;
  std::uint64_t seed = 1;
};

struct StudyConfig {
  std::vector<std::size_t> particles;
  std::size_t seeds = 10;
  std::size_t steps = 50;  // n* for the bias study
  std::size_t window = 0;  // trailing updates averaged by the bias study; 0 means steps / 2
  double tail_fraction = 0.1;
  std::size_t max_evaluations = 200;
  std::optional<Vector> theta;       // fixed theta for the bias study
  std::optional<Vector> theta_true;  // law of held-out oracle data
  std::size_t oracle_length = 100000;
  std::uint64_t oracle_seed = 7;
};

struct RunConfig {
  ModelConfig model;
  SmcConfig smc;
  ScheduleConfig schedule;
  IoConfig io;
  SimulateConfig simulate;
  std::optional<StudyConfig> study;

  ParameterLayout layout() const;
  StepSchedule step_schedule() const { return StepSchedule(schedule.a0, schedule.a, schedule.n0); }
  ParameterPoint initial_point() const { return {model.theta0, model.theta_box}; }
  Vector simulation_theta() const { return simulate.theta.value_or(model.theta0); }
};

/// Parses and validates a JSON config. Unknown keys are rejected; every
/// error is a ConfigError naming the offending key. Relative paths in the
/// io section are resolved against base_dir.
RunConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);

/// Canonical JSON rendering of a validated config; parse(echo(c)) == c.
std::string echo_config(const RunConfig& config);

/// Builds the model named by the config.
std::shared_ptr<StateSpaceModel> make_model(const RunConfig& config);

/// Headerless comma-separated rows, one time step per row. Returns d x T.
Matrix read_observations(const std::filesystem::path& path);
void write_rows(const std::filesystem::path& path, const Matrix& columns);

}  // namespace rml

#endif  // RML_CONFIG_HPP
