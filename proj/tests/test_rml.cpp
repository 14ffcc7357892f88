#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "rml/diagnostics.hpp"
#include "rml/oracle.hpp"
#include "rml/rml.hpp"
#include "support.hpp"

using namespace rml;
using namespace rml::test;

namespace {

struct Ar1Fixture {
  std::unique_ptr<TruncatedGaussModel> model =
      make_ar1_model(ar1_layout({"phi"}, {{"sigma_x", 1.0}, {"sigma_y", 1.0}}), interval(-14.0, 14.0),
                     interval(-16.0, 16.0));
  Box box = interval(-0.95, 0.95);
  Matrix data(std::size_t steps, std::uint64_t seed, double phi = 0.8) const {
    return simulate(*model, vec({phi}), steps, RngStream(seed)).observations;
  }
};

}  // namespace

TEST_CASE("a zero schedule freezes theta while the particles move") {
  Ar1Fixture f;
  const Matrix y = f.data(20, 1);
  RmlOptions opts;
  opts.particles = 20;
  RmlState state(*f.model, {vec({0.3}), f.box}, StepSchedule(0.0, 1.0), y.col(0), opts);
  const Matrix start = state.particles().positions;
  for (Eigen::Index t = 1; t < y.cols(); ++t) {
    const TraceRecord r = state.step(y.col(t));
    REQUIRE(r.theta_next[0] == 0.3);
    REQUIRE(r.step_size == 0.0);
  }
  CHECK(state.n() == 19);
  CHECK((state.particles().positions - start).norm() > 0.0);
  CHECK(state.pending_observation()[0] == y(0, 19));
}

TEST_CASE("a parameter-free model never moves theta") {
  const auto m = parameter_free_model();
  const Matrix y = simulate(*m, vec({0.0}), 30, RngStream(2)).observations;
  RmlOptions opts;
  opts.particles = 15;
  const RunTrace trace = run(*m, {vec({0.1}), interval(-1.0, 1.0)}, StepSchedule(1.0, 0.6), y, opts);
  REQUIRE(trace.records.size() == 29);
  for (const auto& r : trace.records) {
    REQUIRE(r.gradient[0] == 0.0);
    REQUIRE(r.theta_next[0] == 0.1);
    REQUIRE(r.centered_weight_norm == 0.0);
  }
}

TEST_CASE("one step on two particles matches hand arithmetic") {
  Ar1Fixture f;
  const Matrix y = f.data(2, 9);
  RmlOptions opts;
  opts.particles = 2;
  opts.seed = 13;
  const Vector theta0 = vec({0.4});
  const StepSchedule schedule(0.5, 0.7);
  RmlState state(*f.model, {theta0, f.box}, schedule, y.col(0), opts);
  const Matrix x0 = state.particles().positions;
  const TraceRecord rec = state.step(y.col(1));
  const Matrix x1 = state.particles().positions;

  // Densities of the truncated AR(1) written out directly.
  const double lo = -14.0, hi = 14.0, ylo = -16.0, yhi = 16.0;
  const auto Phi = [](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
  const auto phi_pdf = [](double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI); };
  const double th = theta0[0];
  auto p = [&](double x, double x_next) {
    const double mass = Phi(hi - th * x) - Phi(lo - th * x);
    return phi_pdf(x_next - th * x) / mass;
  };
  auto dp = [&](double x, double x_next) {  // d/dtheta of p
    const double mass = Phi(hi - th * x) - Phi(lo - th * x);
    const double dmass = -x * (phi_pdf(hi - th * x) - phi_pdf(lo - th * x));
    const double z = x_next - th * x;
    return (phi_pdf(z) * z * x * mass - phi_pdf(z) * dmass) / (mass * mass);
  };
  auto q = [&](double x, double obs) { return phi_pdf(obs - x) / (Phi(yhi - x) - Phi(ylo - x)); };

  const double y0 = y(0, 0), y1 = y(0, 1);
  double w[2];
  for (int i = 0; i < 2; ++i) {
    double num = 0.0, den = 0.0;
    for (int j = 0; j < 2; ++j) {
      num += dp(x0(0, j), x1(0, i)) * q(x0(0, j), y0);  // dq/dtheta = 0 here, W_0 = 0
      den += p(x0(0, j), x1(0, i)) * q(x0(0, j), y0);
    }
    w[i] = num / den;
  }
  const double q0 = q(x1(0, 0), y1), q1 = q(x1(0, 1), y1);
  const double mean = 0.5 * (w[0] + w[1]);
  const double h = (q0 * (w[0] - mean) + q1 * (w[1] - mean)) / (q0 + q1);
  const double theta1 = std::clamp(th + 0.5 * h, -0.95, 0.95);

  CHECK(std::abs(rec.gradient[0] - h) <= 1e-10);
  CHECK(std::abs(rec.theta_next[0] - theta1) <= 1e-10);
  CHECK(rec.step_size == 0.5);
}

TEST_CASE("run performs one update per observation pair") {
  Ar1Fixture f;
  RmlOptions opts;
  opts.particles = 10;
  const Matrix two = f.data(2, 3);
  CHECK(run(*f.model, {vec({0.2}), f.box}, StepSchedule(0.5, 0.7), two, opts).records.size() == 1);
  CHECK_THROWS_AS(run(*f.model, {vec({0.2}), f.box}, StepSchedule(0.5, 0.7), two.leftCols(1), opts), Error);
  CHECK_THROWS_AS(run(*f.model, {vec({0.2}), f.box}, StepSchedule(0.5, 0.7), Matrix(1, 0), opts), Error);
  CHECK_THROWS_AS(run(*f.model, {vec({1.2}), f.box}, StepSchedule(0.5, 0.7), two, opts), Error);
  Matrix bad = two;
  bad(0, 1) = 100.0;
  CHECK_THROWS_AS(run(*f.model, {vec({0.2}), f.box}, StepSchedule(0.5, 0.7), bad, opts), Error);
}

TEST_CASE("runs are bit-identical per seed and replay exactly") {
  Ar1Fixture f;
  const Matrix y = f.data(300, 4);
  RmlOptions opts;
  opts.particles = 30;
  opts.seed = 17;
  const ParameterPoint start{vec({0.9}), interval(-0.95, 0.95)};
  const StepSchedule schedule(2.0, 0.6);
  const RunTrace a = run(*f.model, start, schedule, y, opts);
  const RunTrace b = run(*f.model, start, schedule, y, opts);
  std::ostringstream sa, sb;
  write_trace(sa, a);
  write_trace(sb, b);
  CHECK(sa.str() == sb.str());
  CHECK(a.records.size() == 299);
  for (std::size_t k = 0; k < a.records.size(); ++k) REQUIRE(a.records[k].n == k);
  CHECK(replay_residual(a, start.box) <= 1e-12);
  // The large first step pushes theta into the boundary at least once.
  CHECK(a.projection_hits() > 0);

  opts.seed = 18;
  std::ostringstream sc;
  write_trace(sc, run(*f.model, start, schedule, y, opts));
  CHECK(sc.str() != sa.str());
}

TEST_CASE("traces round-trip through the line format") {
  Ar1Fixture f;
  RmlOptions opts;
  opts.particles = 12;
  opts.record_wall_time = true;
  const RunTrace a = run(*f.model, {vec({0.1}), f.box}, StepSchedule(0.5, 0.7), f.data(40, 6), opts);
  std::stringstream ss;
  write_trace(ss, a);
  const RunTrace b = read_trace(ss);
  REQUIRE(b.records.size() == a.records.size());
  for (std::size_t k = 0; k < a.records.size(); ++k) {
    REQUIRE(b.records[k].theta_next[0] == a.records[k].theta_next[0]);
    REQUIRE(b.records[k].gradient[0] == a.records[k].gradient[0]);
    REQUIRE(b.records[k].step_size == a.records[k].step_size);
    REQUIRE(b.records[k].wall_seconds.has_value());
  }
  CHECK(b.final_theta()[0] == a.final_theta()[0]);
}

TEST_CASE("the driver reaches a stationary point when fed the exact gradient") {
  Ar1Fixture f;
  const Matrix y = f.data(3000, 10);
  const Matrix held = f.data(1000, 11);
  const double width = 28.0;
  const diagnostics::KalmanOracle oracle(
      oracle::LinearGaussModel{ar1_layout({"phi"}, {{"sigma_x", 1.0}, {"sigma_y", 1.0}}), 0.0, width * width / 12.0},
      held);
  RmlOptions opts;
  opts.particles = 5;
  opts.gradient_override = [&](const Vector& theta, const Vector&) { return oracle.evaluate(theta).gradient; };
  const RunTrace trace = run(*f.model, {vec({0.0}), f.box}, StepSchedule(1.0, 0.6), y, opts);
  const Vector last = trace.final_theta();
  CHECK(oracle.evaluate(last).gradient.norm() < 1e-3);
  CHECK(std::abs(last[0] - 0.8) < 0.1);
}
