#ifndef RML_TESTS_SUPPORT_HPP
#define RML_TESTS_SUPPORT_HPP

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "rml/core.hpp"
#include "rml/models.hpp"

namespace rml::test {

inline Box interval(double lo, double hi) { return Box(Vector::Constant(1, lo), Vector::Constant(1, hi)); }

inline Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

inline ParameterLayout ar1_layout(std::vector<std::string> free, std::map<std::string, double> constants = {}) {
  std::map<std::string, double> c{{"phi", 0.7}, {"sigma_x", 1.0}, {"sigma_y", 0.8}};
  for (const auto& [k, v] : constants) c[k] = v;
  return ParameterLayout(ar1_parameter_names(), c, std::move(free));
}

inline ParameterLayout sv_layout(std::vector<std::string> free) {
  return ParameterLayout(sv_parameter_names(), {{"phi", 0.9}, {"sigma_x", 0.4}, {"beta", 0.7}}, std::move(free));
}

/// Central differences of a scalar function of theta.
inline Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& theta, double h = 1e-5) {
  Vector g(theta.size());
  for (Eigen::Index k = 0; k < theta.size(); ++k) {
    Vector up = theta, dn = theta;
    up[k] += h;
    dn[k] -= h;
    g[k] = (f(up) - f(dn)) / (2.0 * h);
  }
  return g;
}

inline double rel_err(const Vector& a, const Vector& b, double floor = 1e-8) {
  return (a - b).norm() / std::max(b.norm(), floor);
}

inline double rel_err(double a, double b, double floor = 1e-8) { return std::abs(a - b) / std::max(std::abs(b), floor); }

/// Model assembled from callables, for tests that need unusual densities.
class LambdaModel : public StateSpaceModel {
 public:
  using LogFn = std::function<double(const Vector&, State, State, Vector*)>;
  using SampleFn = std::function<void(const Vector&, State, RngStream&, std::span<double>)>;

  LambdaModel(std::size_t d, Box x, Box y, LogFn trans, LogFn obs, SampleFn sample_trans, SampleFn sample_obs = {})
      : d_(d), x_(std::move(x)), y_(std::move(y)), trans_(std::move(trans)), obs_(std::move(obs)),
        sample_trans_(std::move(sample_trans)), sample_obs_(std::move(sample_obs)) {}

  std::string family() const override { return "lambda"; }
  std::size_t state_dim() const override { return x_.dim(); }
  std::size_t obs_dim() const override { return y_.dim(); }
  std::size_t param_dim() const override { return d_; }
  const Box& state_box() const override { return x_; }
  const Box& obs_box() const override { return y_; }
  std::vector<std::string> parameter_names() const override {
    std::vector<std::string> names;
    for (std::size_t k = 0; k < d_; ++k) names.push_back("t" + std::to_string(k));
    return names;
  }
  double log_trans(const Vector& theta, State x, State x_next, Vector* grad) const override {
    if (grad) grad->setZero(static_cast<Eigen::Index>(d_));
    return trans_(theta, x, x_next, grad);
  }
  double log_obs(const Vector& theta, State x, State y, Vector* grad) const override {
    if (grad) grad->setZero(static_cast<Eigen::Index>(d_));
    return obs_(theta, x, y, grad);
  }
  void sample_trans(const Vector& theta, State x, RngStream& rng, std::span<double> out) const override {
    sample_trans_(theta, x, rng, out);
  }
  void sample_obs(const Vector& theta, State x, RngStream& rng, std::span<double> out) const override {
    sample_obs_(theta, x, rng, out);
  }

 private:
  std::size_t d_;
  Box x_;
  Box y_;
  LogFn trans_;
  LogFn obs_;
  SampleFn sample_trans_;
  SampleFn sample_obs_;
};

/// Densities that ignore theta: uniform transition on [0, 1] and a
/// Gaussian-shaped observation density. All gradients vanish.
inline std::shared_ptr<LambdaModel> parameter_free_model(std::size_t d = 1) {
  return std::make_shared<LambdaModel>(
      d, interval(0.0, 1.0), interval(-5.0, 5.0),
      [](const Vector&, State, State x1, Vector*) {
        return x1[0] >= 0.0 && x1[0] <= 1.0 ? 0.0 : -std::numeric_limits<double>::infinity();
      },
      [](const Vector&, State x, State y, Vector*) { return -0.5 * (y[0] - x[0]) * (y[0] - x[0]); },
      [](const Vector&, State, RngStream& rng, std::span<double> out) { out[0] = rng.uniform(); },
      [](const Vector&, State x, RngStream& rng, std::span<double> out) {
        out[0] = std::clamp(x[0] + rng.normal(), -5.0, 5.0);
      });
}

struct RandomSystem {
  Vector theta;
  Matrix old_positions;
  Matrix new_positions;
  Matrix weights;
  Vector y;
  Vector y_next;
};

inline RandomSystem random_system(RngStream& rng, Eigen::Index n, Eigen::Index d) {
  RandomSystem s;
  s.theta = vec({-0.9 + 1.8 * rng.uniform(), 0.5 + rng.uniform(), 0.5 + rng.uniform()}).head(d);
  s.old_positions.resize(1, n);
  s.new_positions.resize(1, n);
  s.weights.resize(d, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    s.old_positions(0, i) = -3.0 + 6.0 * rng.uniform();
    s.new_positions(0, i) = -3.0 + 6.0 * rng.uniform();
    for (Eigen::Index k = 0; k < d; ++k) s.weights(k, i) = rng.normal();
  }
  s.y = vec({-4.0 + 8.0 * rng.uniform()});
  s.y_next = vec({-4.0 + 8.0 * rng.uniform()});
  return s;
}

inline std::vector<std::string> first_names(Eigen::Index d) {
  const auto& all = ar1_parameter_names();
  return {all.begin(), all.begin() + d};
}

/// W_{n+1} and H from the ratio formulas, summing over ancestors directly.
struct DirectForm {
  Matrix weights;
  Vector gradient;
};

inline DirectForm direct_form(const StateSpaceModel& m, const RandomSystem& s) {
  const Eigen::Index n = s.old_positions.cols();
  const Eigen::Index d = s.theta.size();
  // Plain densities and gradients of the densities (not of their logs).
  Vector q(n), q_next(n);
  Matrix grad_q(d, n), grad_q_next(d, n);
  Matrix p(n, n);
  std::vector<Matrix> grad_p(static_cast<std::size_t>(n), Matrix(d, n));
  for (Eigen::Index j = 0; j < n; ++j) {
    Vector g;
    q[j] = std::exp(m.log_obs(s.theta, column_state(s.old_positions, j), as_state(s.y), &g));
    grad_q.col(j) = q[j] * g;
    q_next[j] = std::exp(m.log_obs(s.theta, column_state(s.new_positions, j), as_state(s.y_next), &g));
    grad_q_next.col(j) = q_next[j] * g;
    for (Eigen::Index i = 0; i < n; ++i) {
      // p(i, j) = p(x'_i | x_j)
      p(i, j) = std::exp(m.log_trans(s.theta, column_state(s.old_positions, j), column_state(s.new_positions, i), &g));
      grad_p[static_cast<std::size_t>(i)].col(j) = p(i, j) * g;
    }
  }

  Matrix direct_w(d, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    Vector num = Vector::Zero(d);
    double den = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      num += p(i, j) * grad_q.col(j) + grad_p[static_cast<std::size_t>(i)].col(j) * q[j] +
             p(i, j) * q[j] * s.weights.col(j);
      den += p(i, j) * q[j];
    }
    direct_w.col(i) = num / den;
  }
  const Vector mean_w = direct_w.rowwise().mean();
  Vector num = Vector::Zero(d);
  for (Eigen::Index j = 0; j < n; ++j) num += q_next[j] * (direct_w.col(j) - mean_w) + grad_q_next.col(j);
  const Vector direct_h = num / q_next.sum();
  return {direct_w, direct_h};
}

}  // namespace rml::test

#endif  // RML_TESTS_SUPPORT_HPP
