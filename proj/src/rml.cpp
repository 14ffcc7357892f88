#include "rml/rml.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace rml {

namespace {

std::string real(double x) {
  if (std::isnan(x)) return "null";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string real_array(const Vector& v) {
  std::string s = "[";
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += real(v[i]);
  }
  return s + "]";
}

Vector to_vector(const nlohmann::json& j) {
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  return v;
}

}  // namespace

std::size_t RunTrace::projection_hits() const {
  std::size_t hits = 0;
  for (const auto& r : records) hits += r.projected ? 1 : 0;
  return hits;
}

Vector RunTrace::final_theta() const {
  if (records.empty()) throw Error("empty trace");
  return records.back().theta_next;
}

void write_record(std::ostream& os, const TraceRecord& r) {
  os << "{\"n\":" << r.n << ",\"theta\":" << real_array(r.theta) << ",\"H\":" << real_array(r.gradient)
     << ",\"alpha\":" << real(r.step_size) << ",\"theta_next\":" << real_array(r.theta_next)
     << ",\"w_lambda_norm\":" << real(r.centered_weight_norm) << ",\"ess\":" << real(r.ess)
     << ",\"projected\":" << (r.projected ? "true" : "false");
  if (r.wall_seconds) os << ",\"wall_seconds\":" << real(*r.wall_seconds);
  os << "}\n";
}

void write_trace(std::ostream& os, const RunTrace& trace) {
  for (const auto& r : trace.records) write_record(os, r);
}

RunTrace read_trace(std::istream& is) {
  RunTrace trace;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TraceRecord r;
      r.n = j.at("n").get<std::uint64_t>();
      r.theta = to_vector(j.at("theta"));
      r.gradient = to_vector(j.at("H"));
      r.step_size = j.at("alpha").get<double>();
      r.theta_next = to_vector(j.at("theta_next"));
      r.centered_weight_norm = j.at("w_lambda_norm").get<double>();
      r.ess = j.at("ess").get<double>();
      r.projected = j.at("projected").get<bool>();
      if (j.contains("wall_seconds")) r.wall_seconds = j.at("wall_seconds").get<double>();
      trace.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw Error("trace line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return trace;
}

RmlState::RmlState(const StateSpaceModel& model, ParameterPoint theta0, StepSchedule schedule,
                   const Vector& first_observation, RmlOptions options)
    : model_(model),
      theta_(std::move(theta0)),
      schedule_(schedule),
      options_(std::move(options)),
      rng_(options_.seed),
      pending_(first_observation) {
  if (static_cast<std::size_t>(theta_.theta.size()) != model.param_dim() || theta_.box.dim() != model.param_dim()) {
    throw Error("parameter dimension does not match the model");
  }
  if (!theta_.box.contains(theta_.theta)) throw Error("initial parameter outside its box");
  if (!model.obs_box().contains(pending_)) throw Error("observation 0 outside the observation box");
  particles_ = initialize_particles(model, options_.particles, rng_);
}

TraceRecord RmlState::step(const Vector& next_observation) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  if (static_cast<std::size_t>(next_observation.size()) != model_.obs_dim()) {
    throw Error("observation dimension mismatch");
  }
  if (!model_.obs_box().contains(next_observation)) {
    throw Error("observation " + std::to_string(particles_.step + 1) + " outside the observation box");
  }
  const Vector& theta = theta_.theta;
  const std::uint64_t n = particles_.step;

  Matrix next_positions = propagate(model_, theta, particles_, as_state(pending_), rng_);
  Matrix next_weights = advance_weights(model_, theta, particles_.positions, next_positions, as_state(pending_),
                                        particles_.weights, n);
  const ObservationTerms obs = build_observation_terms(model_, theta, next_positions, as_state(next_observation), n + 1);
  Vector estimate = gradient_estimate(next_weights, obs);
  if (options_.gradient_override) estimate = options_.gradient_override(theta, estimate);

  TraceRecord rec;
  rec.n = n;
  rec.theta = theta;
  rec.gradient = estimate;
  rec.step_size = schedule_(n);
  const Vector raw = theta + rec.step_size * estimate;
  rec.theta_next = theta_.box.clamp(raw);
  rec.projected = (rec.theta_next.array() != raw.array()).any();
  rec.centered_weight_norm = centered_weight_norm(next_weights);
  rec.ess = 1.0 / ((obs.C.array() + 1.0 / static_cast<double>(obs.C.size())).matrix().squaredNorm());

  particles_.positions = std::move(next_positions);
  particles_.weights = std::move(next_weights);
  particles_.step = n + 1;
  theta_.theta = rec.theta_next;
  pending_ = next_observation;
  if (rec.projected) ++projection_hits_;
  if (options_.record_wall_time) rec.wall_seconds = std::chrono::duration<double>(clock::now() - start).count();
  return rec;
}

RunTrace run(const StateSpaceModel& model, const ParameterPoint& theta0, const StepSchedule& schedule,
             const Matrix& observations, const RmlOptions& options) {
  if (observations.cols() < 2) throw Error("need at least two observations");
  if (static_cast<std::size_t>(observations.rows()) != model.obs_dim()) {
    throw Error("observations have " + std::to_string(observations.rows()) + " columns, model expects " +
                std::to_string(model.obs_dim()));
  }
  RmlState state(model, theta0, schedule, observations.col(0), options);
  RunTrace trace;
  trace.records.reserve(static_cast<std::size_t>(observations.cols() - 1));
  for (Eigen::Index t = 1; t < observations.cols(); ++t) trace.records.push_back(state.step(observations.col(t)));
  return trace;
}

double replay_residual(const RunTrace& trace, const Box& box) {
  double worst = 0.0;
  for (const auto& r : trace.records) {
    const Vector expected = box.clamp(r.theta + r.step_size * r.gradient);
    worst = std::max(worst, (expected - r.theta_next).cwiseAbs().maxCoeff());
  }
  for (std::size_t k = 1; k < trace.records.size(); ++k) {
    worst = std::max(worst, (trace.records[k].theta - trace.records[k - 1].theta_next).cwiseAbs().maxCoeff());
  }
  return worst;
}

}  // namespace rml
