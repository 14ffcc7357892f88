#include "rml/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>

namespace rml::diagnostics {

namespace {

std::string real(double x) {
  if (!std::isfinite(x)) return "null";
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

}  // namespace

OracleValue KalmanOracle::evaluate(const Vector& theta) const {
  const oracle::KalmanResult r = oracle::kalman_tangent_gradient(model_, theta, observations_);
  return {r.average_log_likelihood, r.gradient};
}

OracleValue GridOracle::evaluate(const Vector& theta) const {
  const auto t = static_cast<double>(observations_.cols());
  const auto [log_likelihood, score] = oracle::grid_log_likelihood_and_score(*model_, theta, law_, observations_);
  return {log_likelihood / t, score / t};
}

BiasStudyResult bias_vs_particles(const StateSpaceModel& model, const ParameterPoint& theta,
                                  const Matrix& observations, const Matrix& exact, const BiasStudyOptions& options) {
  if (options.seeds < 10) throw Error("bias study: at least 10 seeds are required");
  if (options.particles.empty()) throw Error("bias study: no particle counts given");
  for (std::size_t k = 0; k < options.particles.size(); ++k) {
    if (options.particles[k] < 1 || (k > 0 && options.particles[k] <= options.particles[k - 1])) {
      throw Error("bias study: particle counts must be positive and strictly increasing");
    }
  }
  if (options.steps < 1) throw Error("bias study: steps must be at least 1");
  const std::size_t window = options.window ? options.window : std::max<std::size_t>(1, options.steps / 2);
  if (window > options.steps) throw Error("bias study: window longer than the run");
  const auto steps = static_cast<Eigen::Index>(options.steps);
  if (observations.cols() < steps + 1) throw Error("bias study: need steps + 1 observations");
  if (exact.cols() < steps) throw Error("bias study: exact values missing for the requested steps");
  const Matrix data = observations.leftCols(steps + 1);
  const auto d = static_cast<Eigen::Index>(model.param_dim());
  const std::size_t first = options.steps - window;
  const std::size_t late = options.steps - std::max<std::size_t>(1, window / 2);
  const Vector target = exact.col(steps - 1);

  BiasStudyResult result;
  result.steps = options.steps;
  result.window = window;
  for (std::size_t n : options.particles) {
    Matrix errors(d, static_cast<Eigen::Index>(options.seeds));
    Vector late_sum = Vector::Zero(d);
    Vector final_sum = Vector::Zero(d);
    for (std::size_t s = 0; s < options.seeds; ++s) {
      RmlOptions ro;
      ro.particles = n;
      ro.seed = options.first_seed + s;
      if (options.inject_oracle) {
        auto counter = std::make_shared<Eigen::Index>(0);
        ro.gradient_override = [&exact, counter](const Vector&, const Vector&) { return Vector(exact.col((*counter)++)); };
      }
      const RunTrace trace = run(model, theta, StepSchedule(0.0, 1.0), data, ro);
      Vector e = Vector::Zero(d);
      Vector e_late = Vector::Zero(d);
      for (std::size_t k = first; k < options.steps; ++k) {
        const Vector diff = trace.records[k].gradient - exact.col(static_cast<Eigen::Index>(k));
        e += diff;
        if (k >= late) e_late += diff;
      }
      errors.col(static_cast<Eigen::Index>(s)) = e / static_cast<double>(window);
      late_sum += e_late / static_cast<double>(options.steps - late);
      final_sum += trace.records.back().gradient;
    }
    const auto count = static_cast<double>(options.seeds);
    BiasRow row;
    row.particles = n;
    row.seeds = options.seeds;
    row.mean_estimate = final_sum / count;
    row.oracle = target;
    const Vector bias = errors.rowwise().mean();
    row.bias_norm = bias.norm();
    row.bias_norm_late = (late_sum / count).norm();
    const Matrix centered = errors.colwise() - bias;
    const Vector variance = centered.rowwise().squaredNorm() / (count - 1.0);
    row.stderr = std::sqrt(variance.sum() / count);
    result.rows.push_back(std::move(row));
  }

  std::vector<double> x;
  std::vector<double> y;
  bool positive = true;
  for (const auto& row : result.rows) {
    positive = positive && row.bias_norm > 0.0;
    x.push_back(std::log(static_cast<double>(row.particles)));
    y.push_back(std::log(row.bias_norm));
  }
  result.slope = positive && result.rows.size() >= 2 ? fit_line(x, y).slope : std::numeric_limits<double>::quiet_NaN();
  return result;
}

BiasStudyResult bias_vs_particles(const oracle::GridModel& model, const ParameterPoint& theta,
                                  const Matrix& observations, const BiasStudyOptions& options) {
  const auto steps = static_cast<Eigen::Index>(options.steps);
  if (observations.cols() < steps + 1) throw Error("bias study: need steps + 1 observations");
  const Matrix exact =
      oracle::grid_exact_estimates(model, theta.theta, model.uniform_law(), observations.leftCols(steps + 1));
  return bias_vs_particles(model, theta, observations, exact.rightCols(steps), options);
}

TailStudyResult tail_gradient_stats(const RunTrace& trace, const LikelihoodOracle& oracle, double tail_fraction,
                                    std::size_t max_evaluations) {
  if (!(tail_fraction > 0.0 && tail_fraction <= 1.0)) throw Error("tail study: tail fraction must lie in (0, 1]");
  if (max_evaluations < 1) throw Error("tail study: need at least one evaluation");
  const std::size_t total = trace.records.size();
  const auto length = static_cast<std::size_t>(std::ceil(tail_fraction * static_cast<double>(total)));
  if (total == 0 || length == 0) throw Error("tail study: empty tail window");

  TailStudyResult r;
  r.tail_length = length;
  r.tail_start = total - length;
  r.projection_hits = trace.projection_hits();
  for (std::size_t k = r.tail_start; k < total; ++k) r.tail_projection_hits += trace.records[k].projected ? 1 : 0;

  const std::size_t evals = std::min(length, max_evaluations);
  std::vector<double> norms;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  double ll_sum = 0.0;
  for (std::size_t e = 0; e < evals; ++e) {
    // Evenly spaced, always including the final record.
    const std::size_t offset = evals == 1 ? length - 1 : (e * (length - 1)) / (evals - 1);
    const OracleValue v = oracle.evaluate(trace.records[r.tail_start + offset].theta_next);
    norms.push_back(v.gradient.norm());
    lo = std::min(lo, v.average_log_likelihood);
    hi = std::max(hi, v.average_log_likelihood);
    ll_sum += v.average_log_likelihood;
  }
  r.evaluations = evals;
  r.mean_log_likelihood = ll_sum / static_cast<double>(evals);
  r.log_likelihood_oscillation = hi - lo;
  double mean = 0.0;
  for (double v : norms) mean += v;
  mean /= static_cast<double>(evals);
  r.mean_gradient_norm = mean;

  const std::size_t batches = std::min<std::size_t>(10, evals);
  if (batches >= 2) {
    const std::size_t per = evals / batches;
    std::vector<double> means;
    for (std::size_t b = 0; b < batches; ++b) {
      double m = 0.0;
      for (std::size_t k = b * per; k < (b + 1) * per; ++k) m += norms[k];
      means.push_back(m / static_cast<double>(per));
    }
    double bm = 0.0;
    for (double m : means) bm += m;
    bm /= static_cast<double>(batches);
    double ss = 0.0;
    for (double m : means) ss += (m - bm) * (m - bm);
    r.stderr = std::sqrt(ss / static_cast<double>(batches - 1) / static_cast<double>(batches));
  }
  return r;
}

LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw Error("fit_line: need at least two points");
  const auto n = static_cast<double>(x.size());
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0;
  double sxy = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0)) throw Error("fit_line: x values are all equal");
  LineFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r_squared = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  return f;
}

GeometricFit fit_geometric(const std::vector<double>& distances) {
  std::vector<double> k;
  std::vector<double> logd;
  for (std::size_t i = 0; i < distances.size(); ++i) {
    if (!(distances[i] > 0.0)) throw Error("fit_geometric: distances must be positive");
    k.push_back(static_cast<double>(i));
    logd.push_back(std::log(distances[i]));
  }
  const LineFit f = fit_line(k, logd);
  return {std::exp(f.slope), f.r_squared};
}

void write_bias_table(std::ostream& os, const BiasStudyResult& result) {
  os << "n_particles,bias_norm,stderr,bias_norm_late,seeds,steps,window,mean_estimate,oracle\n";
  for (const auto& r : result.rows) {
    auto join = [](const Vector& v) {
      std::string s;
      for (Eigen::Index i = 0; i < v.size(); ++i) s += (i ? " " : "") + real(v[i]);
      return s;
    };
    os << r.particles << ',' << real(r.bias_norm) << ',' << real(r.stderr) << ',' << real(r.bias_norm_late) << ','
       << r.seeds << ',' << result.steps << ',' << result.window << ',' << join(r.mean_estimate) << ',' << join(r.oracle) << '\n';
  }
}

void write_bias_records(std::ostream& os, const BiasStudyResult& result) {
  for (const auto& r : result.rows) {
    os << "{\"n_particles\":" << r.particles << ",\"bias_norm\":" << real(r.bias_norm) << ",\"stderr\":"
       << real(r.stderr) << ",\"bias_norm_late\":" << real(r.bias_norm_late) << ",\"seeds\":" << r.seeds
       << ",\"steps\":" << result.steps << ",\"window\":" << result.window << ",\"mean_estimate\":" << real_array(r.mean_estimate)
       << ",\"oracle\":" << real_array(r.oracle) << "}\n";
  }
  os << "{\"slope\":" << real(result.slope) << "}\n";
}

void write_tail_table(std::ostream& os, const std::vector<TailStudyResult>& results) {
  os << "n_particles,tail_grad_norm,stderr,loglik_mean,loglik_oscillation,tail_start,tail_length,evaluations,"
        "projection_hits,tail_projection_hits\n";
  for (const auto& r : results) {
    os << r.particles << ',' << real(r.mean_gradient_norm) << ',' << real(r.stderr) << ','
       << real(r.mean_log_likelihood) << ',' << real(r.log_likelihood_oscillation) << ',' << r.tail_start << ','
       << r.tail_length << ',' << r.evaluations << ',' << r.projection_hits << ',' << r.tail_projection_hits << '\n';
  }
}

void write_tail_records(std::ostream& os, const std::vector<TailStudyResult>& results) {
  for (const auto& r : results) {
    os << "{\"n_particles\":" << r.particles << ",\"tail_grad_norm\":" << real(r.mean_gradient_norm)
       << ",\"stderr\":" << real(r.stderr) << ",\"loglik_mean\":" << real(r.mean_log_likelihood)
       << ",\"loglik_oscillation\":" << real(r.log_likelihood_oscillation) << ",\"tail_start\":" << r.tail_start
       << ",\"tail_length\":" << r.tail_length << ",\"evaluations\":" << r.evaluations
       << ",\"projection_hits\":" << r.projection_hits << ",\"tail_projection_hits\":" << r.tail_projection_hits
       << "}\n";
  }
}

}  // namespace rml::diagnostics
