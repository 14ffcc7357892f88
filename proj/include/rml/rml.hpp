#ifndef RML_RML_HPP
#define RML_RML_HPP

#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

#include "rml/core.hpp"
#include "rml/models.hpp"
#include "rml/smc.hpp"

namespace rml {

/// One completed parameter update.
struct TraceRecord {
  std::uint64_t n = 0;
  Vector theta;           // theta_n, the parameter the step was computed at
  Vector gradient;        // H_n = W_{n+1} C + D, built from Y_{n+1}
  double step_size = 0;   // alpha_n
  Vector theta_next;      // project(theta_n + alpha_n H_n)
  double centered_weight_norm = 0;  // ||W_{n+1} Lambda||_F
  double ess = 0;         // effective sample size of the q(Y_{n+1}|.) weights
  bool projected = false; // the projection moved theta
  std::optional<double> wall_seconds;
};

struct RunTrace {
  std::vector<TraceRecord> records;

  std::size_t projection_hits() const;
  Vector final_theta() const;
};

/// Writes one JSON object per line. Reals use 17 significant digits so a
/// reader recovers the exact doubles. wall_seconds is written only when set.
void write_trace(std::ostream& os, const RunTrace& trace);
void write_record(std::ostream& os, const TraceRecord& record);
RunTrace read_trace(std::istream& is);

/// Replacement for the particle gradient estimate: receives theta_n and the
/// particle H_n and returns the value actually used for the update.
using GradientOverride = std::function<Vector(const Vector& theta, const Vector& particle_estimate)>;

struct RmlOptions {
  std::size_t particles = 100;
  std::uint64_t seed = 1;
  bool record_wall_time = false;
  GradientOverride gradient_override;  // empty: use the particle estimate
};

/// Online estimator state: parameter, particle system and the buffered
/// observation Y_n still waiting for its successor.
class RmlState {
 public:
  RmlState(const StateSpaceModel& model, ParameterPoint theta0, StepSchedule schedule, const Vector& first_observation,
           RmlOptions options);

  /// One update from (Y_n, Y_{n+1}): propagate at (theta_n, Y_n), advance W,
  /// estimate H from Y_{n+1}, then theta_{n+1} = project(theta_n + alpha_n H).
  TraceRecord step(const Vector& next_observation);

  const ParameterPoint& parameter() const { return theta_; }
  const ParticleSystem& particles() const { return particles_; }
  const StepSchedule& schedule() const { return schedule_; }
  std::uint64_t n() const { return particles_.step; }
  std::size_t projection_hits() const { return projection_hits_; }
  const Vector& pending_observation() const { return pending_; }

 private:
  const StateSpaceModel& model_;
  ParameterPoint theta_;
  StepSchedule schedule_;
  RmlOptions options_;
  RngStream rng_;
  ParticleSystem particles_;
  Vector pending_;
  std::size_t projection_hits_ = 0;
};

/// Runs T-1 updates over observations (d_y x T, one column per time step).
RunTrace run(const StateSpaceModel& model, const ParameterPoint& theta0, const StepSchedule& schedule,
             const Matrix& observations, const RmlOptions& options);

/// Largest |theta_{n+1} - project(theta_n + alpha_n H_n)| over the trace.
double replay_residual(const RunTrace& trace, const Box& box);

}  // namespace rml

#endif  // RML_RML_HPP
