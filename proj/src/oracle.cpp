#include "rml/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace rml::oracle {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

class GridTransitionBlock : public TransitionBlock {
 public:
  GridTransitionBlock(const GridModel& gm, const GridKernel& kernel, const Matrix& sources)
      : gm_(gm), log_atom_(std::log(gm.atom())) {
    const Eigen::Index n = sources.cols();
    const auto m = static_cast<Eigen::Index>(gm.size());
    const auto d = static_cast<Eigen::Index>(gm.param_dim());
    rows_.resize(n, m);
    grads_.resize(d, n * m);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto src = static_cast<Eigen::Index>(gm.index_of(sources(0, i)));
      for (Eigen::Index j = 0; j < m; ++j) {
        rows_(i, j) = std::log(kernel.K(src, j)) - log_atom_;
        for (Eigen::Index k = 0; k < d; ++k) {
          grads_(k, i * m + j) = kernel.dK[static_cast<std::size_t>(k)](src, j) / kernel.K(src, j);
        }
      }
    }
  }

  std::size_t size() const override { return static_cast<std::size_t>(rows_.rows()); }

  void column(State target, Eigen::Ref<Vector> log_p, Eigen::Ref<Matrix> grad) const override {
    const auto j = static_cast<Eigen::Index>(gm_.index_of(target[0]));
    const Eigen::Index m = rows_.cols();
    log_p = rows_.col(j);
    for (Eigen::Index i = 0; i < rows_.rows(); ++i) grad.col(i) = grads_.col(i * m + j);
  }

 private:
  const GridModel& gm_;
  double log_atom_;
  Matrix rows_;   // log p(g_j | source_i)
  Matrix grads_;  // d x (n * M)
};

std::size_t sample_index(const Vector& probabilities, RngStream& rng) {
  const double u = rng.uniform() * probabilities.sum();
  double acc = 0.0;
  for (Eigen::Index j = 0; j < probabilities.size(); ++j) {
    acc += probabilities[j];
    if (u < acc) return static_cast<std::size_t>(j);
  }
  return static_cast<std::size_t>(probabilities.size() - 1);
}

class GridSampler : public TransitionSampler {
 public:
  GridSampler(const GridModel& gm, const Matrix& rows) : gm_(gm), m_(rows.cols()), cumulative_(rows.size()) {
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
      double acc = 0.0;
      for (Eigen::Index j = 0; j < m_; ++j) {
        acc += rows(i, j);
        cumulative_[static_cast<std::size_t>(i * m_ + j)] = acc;
      }
    }
  }

  // Same draw as sample_index on the row: first j with u < cumulative mass.
  void sample(State x, RngStream& rng, std::span<double> out) const override {
    const auto i = static_cast<Eigen::Index>(gm_.index_of(x[0]));
    const double* row = cumulative_.data() + i * m_;
    const double u = rng.uniform() * row[m_ - 1];
    const double* it = std::upper_bound(row, row + m_, u);
    out[0] = gm_.points()[std::min<Eigen::Index>(it - row, m_ - 1)];
  }

 private:
  const GridModel& gm_;
  Eigen::Index m_;
  std::vector<double> cumulative_;
};

}  // namespace

GridModel::GridModel(std::shared_ptr<const StateSpaceModel> base, Vector points, double atom)
    : base_(std::move(base)), points_(std::move(points)), atom_(atom) {
  if (!base_ || base_->state_dim() != 1) throw Error("grid model: base must have a scalar state");
  if (points_.size() < 2) throw Error("grid model: need at least two grid points");
  if (!(atom_ > 0.0)) throw Error("grid model: atom weight must be positive");
  for (Eigen::Index i = 1; i < points_.size(); ++i) {
    if (!(points_[i] > points_[i - 1])) throw Error("grid model: points must be strictly increasing");
  }
  for (Eigen::Index i = 0; i < points_.size(); ++i) {
    if (!base_->state_box().contains(State(&points_[i], 1))) throw Error("grid model: point outside the state box");
  }
  box_ = Box(Vector::Constant(1, points_[0]), Vector::Constant(1, points_[points_.size() - 1]));
}

std::size_t GridModel::index_of(double x) const {
  const double* begin = points_.data();
  const double* end = begin + points_.size();
  const double* it = std::lower_bound(begin, end, x);
  if (it == end || *it != x) throw ModelError("grid model: state is not a grid point");
  return static_cast<std::size_t>(it - begin);
}

void GridModel::kernel_row(const Vector& theta, std::size_t i, Vector& log_row, Matrix& grad_log_row) const {
  const auto m = points_.size();
  log_row.resize(m);
  grad_log_row.resize(static_cast<Eigen::Index>(param_dim()), m);
  Vector g(static_cast<Eigen::Index>(param_dim()));
  const State x(&points_[static_cast<Eigen::Index>(i)], 1);
  for (Eigen::Index j = 0; j < m; ++j) {
    log_row[j] = base_->log_trans(theta, x, State(&points_[j], 1), &g);
    grad_log_row.col(j) = g;
  }
  const double lse = log_sum_exp({log_row.data(), static_cast<std::size_t>(m)});
  if (!std::isfinite(lse)) throw ModelError("grid model: transition row has zero mass");
  log_row.array() -= lse;
  const Vector mean_grad = grad_log_row * log_row.array().exp().matrix();
  grad_log_row.colwise() -= mean_grad;
}

GridKernel GridModel::kernel(const Vector& theta) const {
  const auto m = points_.size();
  const auto d = static_cast<Eigen::Index>(param_dim());
  GridKernel out{Matrix(m, m), std::vector<Matrix>(static_cast<std::size_t>(d), Matrix(m, m))};
  Vector log_row;
  Matrix grad_row;
  for (Eigen::Index i = 0; i < m; ++i) {
    kernel_row(theta, static_cast<std::size_t>(i), log_row, grad_row);
    const Vector row = log_row.array().exp().matrix();
    out.K.row(i) = row.transpose();
    for (Eigen::Index k = 0; k < d; ++k) {
      out.dK[static_cast<std::size_t>(k)].row(i) = (row.array() * grad_row.row(k).transpose().array()).transpose();
    }
  }
  return out;
}

double GridModel::log_trans(const Vector& theta, State x, State x_next, Vector* grad) const {
  const std::size_t i = index_of(x[0]);
  if (grad) grad->setZero(static_cast<Eigen::Index>(param_dim()));
  const double* begin = points_.data();
  const double* end = begin + points_.size();
  const double* it = std::lower_bound(begin, end, x_next[0]);
  if (it == end || *it != x_next[0]) return kNegInf;
  const auto j = it - begin;
  Vector log_row;
  Matrix grad_row;
  kernel_row(theta, i, log_row, grad_row);
  if (grad) *grad = grad_row.col(j);
  return log_row[j] - std::log(atom_);
}

double GridModel::log_obs(const Vector& theta, State x, State y, Vector* grad) const {
  return base_->log_obs(theta, x, y, grad);
}

void GridModel::sample_trans(const Vector& theta, State x, RngStream& rng, std::span<double> out) const {
  Vector log_row;
  Matrix grad_row;
  kernel_row(theta, index_of(x[0]), log_row, grad_row);
  out[0] = points_[static_cast<Eigen::Index>(sample_index(log_row.array().exp().matrix(), rng))];
}

void GridModel::sample_obs(const Vector& theta, State x, RngStream& rng, std::span<double> out) const {
  base_->sample_obs(theta, x, rng, out);
}

void GridModel::sample_initial(RngStream& rng, std::span<double> out) const {
  out[0] = points_[static_cast<Eigen::Index>(rng.index(size()))];
}

std::unique_ptr<TransitionBlock> GridModel::transition_block(const Vector& theta, const Matrix& sources) const {
  return std::make_unique<GridTransitionBlock>(*this, kernel(theta), sources);
}

std::unique_ptr<TransitionSampler> GridModel::transition_sampler(const Vector& theta) const {
  return std::make_unique<GridSampler>(*this, kernel(theta).K);
}

void GridModel::observation(const Vector& theta, State y, Vector& q, Matrix& grad_q) const {
  const auto m = points_.size();
  const auto d = static_cast<Eigen::Index>(param_dim());
  q.resize(m);
  grad_q.resize(d, m);
  Vector g(d);
  for (Eigen::Index i = 0; i < m; ++i) {
    q[i] = std::exp(base_->log_obs(theta, State(&points_[i], 1), y, &g));
    grad_q.col(i) = q[i] * g;
  }
}

Vector GridModel::uniform_law() const {
  return Vector::Constant(points_.size(), 1.0 / static_cast<double>(points_.size()));
}

GridFilterState initial_state(const Vector& law, std::size_t param_dim) {
  return {law, Matrix::Zero(static_cast<Eigen::Index>(param_dim), law.size())};
}

namespace {

// Unnormalized masses u, derivative masses v and the normalizer.
struct FilterTerms {
  Vector u;
  Matrix v;
  double z;
};

struct ObservationColumn {
  Vector q;
  Matrix grad_q;
};

ObservationColumn observe(const GridModel& gm, const Vector& theta, State y) {
  ObservationColumn o;
  gm.observation(theta, y, o.q, o.grad_q);
  return o;
}

FilterTerms filter_terms(const GridKernel& kernel, const ObservationColumn& o, const GridFilterState& s) {
  const Vector& q = o.q;
  const Vector prior = kernel.K.transpose() * s.xi;  // sum_i K(i,j) xi_i
  FilterTerms t;
  t.u = q.cwiseProduct(prior);
  t.z = t.u.sum();
  if (!(t.z > 0.0)) throw ModelError("grid filter: zero normalizer");
  // v_j = q_j (zeta K)_j + grad q_j (xi K)_j + q_j sum_i dK(i,j) xi_i
  t.v = (s.zeta * kernel.K) * q.asDiagonal();
  t.v += o.grad_q * prior.asDiagonal();
  for (std::size_t k = 0; k < kernel.dK.size(); ++k) {
    t.v.row(static_cast<Eigen::Index>(k)) += (kernel.dK[k].transpose() * s.xi).cwiseProduct(q).transpose();
  }
  return t;
}

FilterTerms predictor_terms(const GridKernel& kernel, const ObservationColumn& o, const GridFilterState& s) {
  const Vector weighted = o.q.cwiseProduct(s.xi);
  FilterTerms t;
  t.u = kernel.K.transpose() * weighted;
  t.z = weighted.sum();
  if (!(t.z > 0.0)) throw ModelError("grid predictor: zero normalizer");
  // v_j = sum_i K(i,j) q_i zeta_i + sum_i (dK(i,j) q_i + K(i,j) grad q_i) xi_i
  t.v = (s.zeta * o.q.asDiagonal()) * kernel.K;
  t.v += (o.grad_q * s.xi.asDiagonal()) * kernel.K;
  for (std::size_t k = 0; k < kernel.dK.size(); ++k) {
    t.v.row(static_cast<Eigen::Index>(k)) += (kernel.dK[k].transpose() * weighted).transpose();
  }
  return t;
}

GridFilterState normalize(const FilterTerms& t) {
  GridFilterState out;
  out.xi = t.u / t.z;
  const Vector total = t.v.rowwise().sum() / t.z;
  out.zeta = t.v / t.z - total * out.xi.transpose();
  return out;
}

Vector total_derivative(const FilterTerms& t) { return t.v.rowwise().sum() / t.z; }

}  // namespace

GridFilterState grid_filter_update(const GridModel& gm, const Vector& theta, State y, const GridFilterState& s) {
  return normalize(filter_terms(gm.kernel(theta), observe(gm, theta, y), s));
}

GridFilterState grid_predictor_update(const GridModel& gm, const Vector& theta, State y, const GridFilterState& s) {
  return normalize(predictor_terms(gm.kernel(theta), observe(gm, theta, y), s));
}

Vector grid_gradient(const GridModel& gm, const Vector& theta, State y, const GridFilterState& s) {
  return total_derivative(predictor_terms(gm.kernel(theta), observe(gm, theta, y), s));
}

Vector grid_filter_gradient(const GridModel& gm, const Vector& theta, State y, const GridFilterState& s) {
  return total_derivative(filter_terms(gm.kernel(theta), observe(gm, theta, y), s));
}

double grid_filter_log_normalizer(const GridModel& gm, const Vector& theta, State y, const GridFilterState& s) {
  return std::log(filter_terms(gm.kernel(theta), observe(gm, theta, y), s).z);
}

GridFilterState push_forward(const GridModel& gm, const Vector& theta, const GridFilterState& s) {
  const GridKernel kernel = gm.kernel(theta);
  GridFilterState out{kernel.K.transpose() * s.xi, s.zeta * kernel.K};
  for (std::size_t k = 0; k < kernel.dK.size(); ++k) {
    out.zeta.row(static_cast<Eigen::Index>(k)) += (kernel.dK[k].transpose() * s.xi).transpose();
  }
  return out;
}

GridFilterState reweight(const GridModel& gm, const Vector& theta, State y, const GridFilterState& s) {
  Vector q;
  Matrix grad_q;
  gm.observation(theta, y, q, grad_q);
  FilterTerms t;
  t.u = q.cwiseProduct(s.xi);
  t.z = t.u.sum();
  if (!(t.z > 0.0)) throw ModelError("grid reweight: zero normalizer");
  t.v = s.zeta * q.asDiagonal() + grad_q * s.xi.asDiagonal();
  return normalize(t);
}

double grid_log_likelihood(const GridModel& gm, const Vector& theta, const Vector& law, const Matrix& observations) {
  const GridKernel kernel = gm.kernel(theta);
  GridFilterState s = initial_state(law, gm.param_dim());
  double total = 0.0;
  for (Eigen::Index k = 0; k < observations.cols(); ++k) {
    const FilterTerms t = filter_terms(kernel, observe(gm, theta, column_state(observations, k)), s);
    total += std::log(t.z);
    s = normalize(t);
  }
  return total;
}

Vector grid_score(const GridModel& gm, const Vector& theta, const Vector& law, const Matrix& observations) {
  const GridKernel kernel = gm.kernel(theta);
  GridFilterState s = push_forward(gm, theta, initial_state(law, gm.param_dim()));
  Vector total = Vector::Zero(static_cast<Eigen::Index>(gm.param_dim()));
  for (Eigen::Index k = 0; k < observations.cols(); ++k) {
    const FilterTerms t = predictor_terms(kernel, observe(gm, theta, column_state(observations, k)), s);
    total += total_derivative(t);
    s = normalize(t);
  }
  return total;
}

std::pair<double, Vector> grid_log_likelihood_and_score(const GridModel& gm, const Vector& theta, const Vector& law,
                                                        const Matrix& observations) {
  const GridKernel kernel = gm.kernel(theta);
  GridFilterState s = push_forward(gm, theta, initial_state(law, gm.param_dim()));
  double log_likelihood = 0.0;
  Vector score = Vector::Zero(static_cast<Eigen::Index>(gm.param_dim()));
  for (Eigen::Index k = 0; k < observations.cols(); ++k) {
    const FilterTerms t = predictor_terms(kernel, observe(gm, theta, column_state(observations, k)), s);
    log_likelihood += std::log(t.z);
    score += total_derivative(t);
    s = normalize(t);
  }
  return {log_likelihood, score};
}

Matrix grid_exact_estimates(const GridModel& gm, const Vector& theta, const Vector& law, const Matrix& observations) {
  if (observations.cols() < 1) throw Error("grid_exact_estimates: need at least one observation");
  const GridKernel kernel = gm.kernel(theta);
  GridFilterState s = initial_state(law, gm.param_dim());
  Matrix out(static_cast<Eigen::Index>(gm.param_dim()), observations.cols());
  for (Eigen::Index k = 0; k < observations.cols(); ++k) {
    const FilterTerms t = predictor_terms(kernel, observe(gm, theta, column_state(observations, k)), s);
    out.col(k) = total_derivative(t);
    s = normalize(t);
  }
  return out;
}

Vector grid_exact_estimate(const GridModel& gm, const Vector& theta, const Vector& law, const Matrix& observations) {
  if (observations.cols() < 1) throw Error("grid_exact_estimate: need at least one observation");
  return grid_exact_estimates(gm, theta, law, observations).rightCols(1);
}

double total_variation(const Vector& a, const Vector& b) { return 0.5 * (a - b).cwiseAbs().sum(); }

KalmanResult kalman_tangent_gradient(const LinearGaussModel& model, const Vector& theta, const Matrix& observations,
                                     bool keep_step_scores) {
  const ParameterLayout& layout = model.layout;
  if (layout.names() != ar1_parameter_names()) throw Error("kalman: layout must be phi, sigma_x, sigma_y");
  if (observations.rows() != 1 || observations.cols() < 1) throw Error("kalman: need a 1 x T observation matrix");
  const auto d = static_cast<Eigen::Index>(layout.dim());
  if (theta.size() != d) throw Error("kalman: parameter dimension mismatch");

  const double phi = layout.value(0, theta);
  const double sx = layout.value(1, theta);
  const double sy = layout.value(2, theta);
  const Vector dphi = layout.unit(0).transpose();
  const Vector dq = 2.0 * sx * layout.unit(1).transpose();
  const Vector dr = 2.0 * sy * layout.unit(2).transpose();
  const double q_var = sx * sx;
  const double r_var = sy * sy;

  const Eigen::Index steps = observations.cols();
  KalmanResult out;
  out.gradient = Vector::Zero(d);
  if (keep_step_scores) out.step_scores.resize(d, steps);

  double m = model.prior_mean;
  double p = model.prior_variance;
  Vector dm = Vector::Zero(d);
  Vector dp = Vector::Zero(d);
  double total = 0.0;
  constexpr double log_2pi = 1.8378770664093454836;
  for (Eigen::Index t = 0; t < steps; ++t) {
    const double y = observations(0, t);
    const double s = p + r_var;
    if (!(s > 0.0)) throw ModelError("kalman: non-positive innovation variance");
    const double e = y - m;
    const Vector ds = dp + dr;
    const Vector de = -dm;
    total += -0.5 * (log_2pi + std::log(s) + e * e / s);
    const Vector score = -0.5 * (ds / s + (2.0 * e / s) * de - (e * e / (s * s)) * ds);
    out.gradient += score;
    if (keep_step_scores) out.step_scores.col(t) = score;

    // Update: gain k = p / s, filtered mean/variance.
    const double k = p / s;
    const Vector dk = (dp * s - p * ds) / (s * s);
    const double mf = m + k * e;
    const Vector dmf = dm + dk * e + k * de;
    const double pf = p * r_var / s;
    const Vector dpf = (dp * r_var + p * dr) / s - (p * r_var / (s * s)) * ds;
    // Predict.
    m = phi * mf;
    dm = dphi * mf + phi * dmf;
    p = phi * phi * pf + q_var;
    dp = (2.0 * phi * pf) * dphi + (phi * phi) * dpf + dq;
  }
  out.average_log_likelihood = total / static_cast<double>(steps);
  out.gradient /= static_cast<double>(steps);
  return out;
}

}  // namespace rml::oracle
