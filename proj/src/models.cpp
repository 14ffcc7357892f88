#include "rml/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace rml {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kHalfLog2Pi = 0.91893853320467274178;  // log(2 pi) / 2
constexpr double kMinScale = 1e-300;

void require_finite(State v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw ModelError(std::string("non-finite ") + what);
  }
}

void require_finite(const Vector& v, const char* what) {
  if (!v.allFinite()) throw ModelError(std::string("non-finite ") + what);
}

// Scales of a diagonal noise matrix must be positive with |det| above the floor.
void check_scale(const Coefficient& s) {
  double log_det = 0.0;
  for (Eigen::Index k = 0; k < s.value.size(); ++k) {
    if (!(s.value[k] > 0.0) || !std::isfinite(s.value[k])) {
      throw ModelError("noise scale must be positive and finite");
    }
    log_det += std::log(s.value[k]);
  }
  if (log_det < std::log(kMinScale)) throw ModelError("degenerate noise scale (|det| below 1e-300)");
}

// Truncated diagonal Gaussian log-density of v given mean/scale coefficients,
// restricted to box. Adds its theta-gradient to grad when non-null.
double truncated_gauss_log(const Coefficient& mean, const Coefficient& scale, const Box& box, State v,
                           Vector* grad) {
  check_scale(scale);
  double total = 0.0;
  for (std::size_t k = 0; k < v.size(); ++k) {
    const double m = mean.value[k];
    const double s = scale.value[k];
    const double z = (v[k] - m) / s;
    const double l = (box.lower()[k] - m) / s;
    const double u = (box.upper()[k] - m) / s;
    const LogMass mass = log_normal_mass(l, u);
    if (!std::isfinite(mass.value)) throw ModelError("truncation normalizer underflows; box too far from the mean");
    total += -0.5 * z * z - kHalfLog2Pi - std::log(s) - mass.value;
    if (grad) {
      // d z = -(dm + z ds)/s, same form for l and u.
      const auto dm = mean.jacobian.row(k);
      const auto ds = scale.jacobian.row(k);
      *grad += ((z / s) * dm + ((z * z - 1.0) / s) * ds).transpose();
      *grad -= (mass.d_lower * (-(dm + l * ds) / s) + mass.d_upper * (-(dm + u * ds) / s)).transpose();
    }
  }
  return total;
}

void sample_truncated(const Coefficient& mean, const Coefficient& scale, const Box& box, RngStream& rng,
                      std::span<double> out, std::size_t cap) {
  check_scale(scale);
  for (std::size_t attempt = 0; attempt < cap; ++attempt) {
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = mean.value[k] + scale.value[k] * rng.normal();
    if (box.contains(State(out.data(), out.size()))) return;
  }
  throw ModelError("rejection sampling exceeded " + std::to_string(cap) + " attempts; box mis-specified");
}

class GenericTransitionBlock : public TransitionBlock {
 public:
  GenericTransitionBlock(const StateSpaceModel& model, Vector theta, const Matrix& sources)
      : model_(model), theta_(std::move(theta)), sources_(sources) {}

  std::size_t size() const override { return static_cast<std::size_t>(sources_.cols()); }

  void column(State target, Eigen::Ref<Vector> log_p, Eigen::Ref<Matrix> grad) const override {
    Vector g(theta_.size());
    for (Eigen::Index i = 0; i < sources_.cols(); ++i) {
      log_p[i] = model_.log_trans(theta_, column_state(sources_, i), target, &g);
      grad.col(i) = g;
    }
  }

 private:
  const StateSpaceModel& model_;
  Vector theta_;
  Matrix sources_;
};

// Per-source quantities of the truncated Gaussian kernel precomputed once,
// so each (source, target) pair costs a few multiply-adds and no erfc.
class GaussTransitionBlock : public TransitionBlock {
 public:
  GaussTransitionBlock(const GaussFamilyFunctions& fn, const Box& box, const Vector& theta, const Matrix& sources)
      : box_(box), dx_(sources.rows()), n_(sources.cols()), d_(theta.size()) {
    mean_.resize(dx_, n_);
    inv_scale_.resize(dx_, n_);
    grad_mean_.resize(d_, dx_ * n_);
    grad_scale_.resize(d_, dx_ * n_);
    offset_.resize(n_);
    grad_offset_.setZero(d_, n_);
    Coefficient m, s;
    for (Eigen::Index i = 0; i < n_; ++i) {
      State x = column_state(sources, i);
      fn.drift(theta, x, m);
      fn.drift_scale(theta, x, s);
      check_scale(s);
      double off = 0.0;
      for (Eigen::Index k = 0; k < dx_; ++k) {
        const double sk = s.value[k];
        const double l = (box.lower()[k] - m.value[k]) / sk;
        const double u = (box.upper()[k] - m.value[k]) / sk;
        const LogMass mass = log_normal_mass(l, u);
        if (!std::isfinite(mass.value)) throw ModelError("truncation normalizer underflows");
        mean_(k, i) = m.value[k];
        inv_scale_(k, i) = 1.0 / sk;
        grad_mean_.col(i * dx_ + k) = m.jacobian.row(k).transpose() / sk;
        grad_scale_.col(i * dx_ + k) = s.jacobian.row(k).transpose() / sk;
        off += kHalfLog2Pi + std::log(sk) + mass.value;
        grad_offset_.col(i) -= (mass.d_lower * (-(m.jacobian.row(k) + l * s.jacobian.row(k)) / sk) +
                                mass.d_upper * (-(m.jacobian.row(k) + u * s.jacobian.row(k)) / sk))
                                   .transpose();
      }
      offset_[i] = off;
    }
  }

  std::size_t size() const override { return static_cast<std::size_t>(n_); }

  double normalized_column(State target, const Vector& shift, Eigen::Ref<Vector> w,
                           Eigen::Ref<Vector> b) const override {
    if (dx_ != 1) return TransitionBlock::normalized_column(target, shift, w, b);
    if (!box_.contains(target)) return kNegInf;
    // The pair gradient is affine in z and z^2, so its w-average reduces to
    // three weighted sums over the sources.
    using Row = Eigen::Map<const Eigen::ArrayXd>;
    z_ = (target[0] - Row(mean_.data(), n_)) * Row(inv_scale_.data(), n_);
    e_ = shift.array() - offset_.array() - 0.5 * z_.square();
    const double m = e_.maxCoeff();
    if (!(m > kNegInf)) return kNegInf;
    e_ = (e_ - m).exp();
    const double total = e_.sum();
    w = e_.matrix() / total;
    if (d_ == 1) {
      b[0] = (e_ * (Row(grad_offset_.data(), n_) + z_ * Row(grad_mean_.data(), n_) +
                    (z_.square() - 1.0) * Row(grad_scale_.data(), n_)))
                 .sum() /
             total;
    } else {
      b.noalias() = grad_offset_ * w;
      b.noalias() += grad_mean_ * (z_ * w.array()).matrix();
      b.noalias() += grad_scale_ * ((z_.square() - 1.0) * w.array()).matrix();
    }
    return m + std::log(total);
  }

  double weighted_mean(State target, const Vector& shift, const Matrix& values,
                       Eigen::Ref<Vector> out) const override {
    if (dx_ != 1 || d_ != 1) return TransitionBlock::weighted_mean(target, shift, values, out);
    if (!box_.contains(target)) return kNegInf;
    using Row = Eigen::Map<const Eigen::ArrayXd>;
    const Row mu(mean_.data(), n_), inv(inv_scale_.data(), n_);
    const double t = target[0];
    // max_i (shift_i - offset_i) bounds the log terms from above, which
    // saves a pass; fall back to the exact maximum if that underflows.
    const double bound = (shift.array() - offset_.array()).maxCoeff();
    if (!(bound > kNegInf)) return kNegInf;
    e_ = (shift.array() - offset_.array() - bound - 0.5 * ((t - mu) * inv).square()).exp();
    double total = e_.sum();
    double m = bound;
    if (!(total > 1e-250)) {
      z_ = (t - mu) * inv;
      e_ = shift.array() - offset_.array() - 0.5 * z_.square();
      m = e_.maxCoeff();
      if (!(m > kNegInf)) return kNegInf;
      e_ = (e_ - m).exp();
      total = e_.sum();
    }
    const Row v(values.data(), n_), go(grad_offset_.data(), n_), gm(grad_mean_.data(), n_),
        gs(grad_scale_.data(), n_);
    const auto z = (t - mu) * inv;
    out[0] = (e_ * (v + go + z * gm + (z.square() - 1.0) * gs)).sum() / total;
    return m + std::log(total);
  }

  void column(State target, Eigen::Ref<Vector> log_p, Eigen::Ref<Matrix> grad) const override {
    if (!box_.contains(target)) {
      log_p.setConstant(kNegInf);
      grad.setZero();
      return;
    }
    if (dx_ == 1) {
      const double t = target[0];
      const auto z = ((t - mean_.row(0).array()) * inv_scale_.row(0).array()).eval();
      log_p = (-0.5 * z.square()).matrix().transpose() - offset_;
      grad = grad_offset_;
      grad.noalias() += grad_mean_ * z.matrix().asDiagonal();
      grad.noalias() += grad_scale_ * (z.square() - 1.0).matrix().asDiagonal();
      return;
    }
    for (Eigen::Index i = 0; i < n_; ++i) {
      double lp = -offset_[i];
      grad.col(i) = grad_offset_.col(i);
      for (Eigen::Index k = 0; k < dx_; ++k) {
        const double z = (target[k] - mean_(k, i)) * inv_scale_(k, i);
        lp -= 0.5 * z * z;
        grad.col(i) += z * grad_mean_.col(i * dx_ + k) + (z * z - 1.0) * grad_scale_.col(i * dx_ + k);
      }
      log_p[i] = lp;
    }
  }

 private:
  const Box& box_;
  Eigen::Index dx_, n_, d_;
  Matrix mean_, inv_scale_;
  Matrix grad_mean_, grad_scale_;  // d x (n * dx), already divided by the scale
  Vector offset_;                  // log normalizing constant per source
  Matrix grad_offset_;             // d x n, minus gradient of the box log-mass
  mutable Eigen::ArrayXd z_, e_;   // per-column scratch
};

}  // namespace

LogMass log_normal_mass(double l, double u) {
  constexpr double r2 = std::numbers::sqrt2;
  double z;
  if (l >= 0.0) {
    z = 0.5 * (std::erfc(l / r2) - std::erfc(u / r2));
  } else if (u <= 0.0) {
    z = 0.5 * (std::erfc(-u / r2) - std::erfc(-l / r2));
  } else {
    z = 1.0 - 0.5 * std::erfc(u / r2) - 0.5 * std::erfc(-l / r2);
  }
  if (!(z > 0.0)) return {kNegInf, 0.0, 0.0};
  const double log_z = std::log(z);
  const double pu = std::isfinite(u) ? std::exp(-0.5 * u * u - kHalfLog2Pi - log_z) : 0.0;
  const double pl = std::isfinite(l) ? std::exp(-0.5 * l * l - kHalfLog2Pi - log_z) : 0.0;
  return {log_z, -pl, pu};
}

void StateSpaceModel::sample_initial(RngStream& rng, std::span<double> out) const {
  const Box& box = state_box();
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = box.lower()[k] + (box.upper()[k] - box.lower()[k]) * rng.uniform();
  }
}

namespace {

class ForwardingSampler : public TransitionSampler {
 public:
  ForwardingSampler(const StateSpaceModel& model, Vector theta) : model_(model), theta_(std::move(theta)) {}
  void sample(State x, RngStream& rng, std::span<double> out) const override {
    model_.sample_trans(theta_, x, rng, out);
  }

 private:
  const StateSpaceModel& model_;
  Vector theta_;
};

}  // namespace

double TransitionBlock::normalized_column(State target, const Vector& shift, Eigen::Ref<Vector> w,
                                          Eigen::Ref<Vector> b) const {
  const auto n = static_cast<Eigen::Index>(size());
  Vector log_p(n);
  Matrix grad(b.size(), n);
  column(target, log_p, grad);
  log_p += shift;
  const double m = log_p.maxCoeff();
  if (!(m > kNegInf)) return kNegInf;
  w = (log_p.array() - m).exp().matrix();
  const double total = w.sum();
  w /= total;
  b.noalias() = grad * w;
  return m + std::log(total);
}

double TransitionBlock::weighted_mean(State target, const Vector& shift, const Matrix& values,
                                      Eigen::Ref<Vector> out) const {
  Vector w(static_cast<Eigen::Index>(size()));
  const double log_mass = normalized_column(target, shift, w, out);
  if (log_mass > kNegInf) out.noalias() += values * w;
  return log_mass;
}

std::unique_ptr<TransitionSampler> StateSpaceModel::transition_sampler(const Vector& theta) const {
  return std::make_unique<ForwardingSampler>(*this, theta);
}

std::unique_ptr<TransitionBlock> StateSpaceModel::transition_block(const Vector& theta, const Matrix& sources) const {
  return std::make_unique<GenericTransitionBlock>(*this, theta, sources);
}

DensityEval trans_density(const StateSpaceModel& model, const Vector& theta, State x, State x_next) {
  DensityEval out{0.0, Vector::Zero(model.param_dim())};
  out.log_density = model.log_trans(theta, x, x_next, &out.gradient);
  return out;
}

DensityEval obs_density(const StateSpaceModel& model, const Vector& theta, State x, State y) {
  DensityEval out{0.0, Vector::Zero(model.param_dim())};
  out.log_density = model.log_obs(theta, x, y, &out.gradient);
  return out;
}

ParameterLayout::ParameterLayout(std::vector<std::string> names, std::map<std::string, double> constants,
                                 std::vector<std::string> free)
    : names_(std::move(names)), free_(std::move(free)), constant_(names_.size(), 0.0), slot_(names_.size(), -1) {
  for (std::size_t f = 0; f < free_.size(); ++f) {
    auto it = std::find(names_.begin(), names_.end(), free_[f]);
    if (it == names_.end()) throw ConfigError("model.free", "unknown parameter '" + free_[f] + "'");
    auto k = static_cast<std::size_t>(it - names_.begin());
    if (slot_[k] >= 0) throw ConfigError("model.free", "parameter '" + free_[f] + "' listed twice");
    slot_[k] = static_cast<int>(f);
  }
  for (const auto& [name, value] : constants) {
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) throw ConfigError("model.constants." + name, "unknown parameter");
    constant_[static_cast<std::size_t>(it - names_.begin())] = value;
  }
  for (std::size_t k = 0; k < names_.size(); ++k) {
    if (slot_[k] < 0 && !constants.contains(names_[k])) {
      throw ConfigError("model.constants." + names_[k], "parameter is neither free nor fixed");
    }
  }
}

double ParameterLayout::value(std::size_t k, const Vector& theta) const {
  return slot_[k] >= 0 ? theta[slot_[k]] : constant_[k];
}

Eigen::RowVectorXd ParameterLayout::unit(std::size_t k) const {
  Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(free_.size()));
  if (slot_[k] >= 0) r[slot_[k]] = 1.0;
  return r;
}

TruncatedGaussModel::TruncatedGaussModel(std::string family, std::size_t state_dim, std::size_t obs_dim,
                                         std::vector<std::string> param_names, Box state_box, Box obs_box,
                                         GaussFamilyFunctions functions)
    : family_(std::move(family)),
      state_dim_(state_dim),
      obs_dim_(obs_dim),
      names_(std::move(param_names)),
      state_box_(std::move(state_box)),
      obs_box_(std::move(obs_box)),
      fn_(std::move(functions)) {
  if (state_box_.dim() != state_dim_) throw ConfigError("model.box.state", "dimension mismatch");
  if (obs_box_.dim() != obs_dim_) throw ConfigError("model.box.obs", "dimension mismatch");
}

namespace {

// Reused across calls to keep the per-particle paths allocation-free;
// coefficient callbacks never re-enter the model.
struct CoefficientPair {
  Coefficient mean, scale;
};
CoefficientPair& coefficient_scratch() {
  thread_local CoefficientPair pair;
  return pair;
}

}  // namespace

double TruncatedGaussModel::log_trans(const Vector& theta, State x, State x_next, Vector* grad) const {
  require_finite(theta, "parameter");
  require_finite(x, "state");
  require_finite(x_next, "state");
  if (grad) grad->setZero(static_cast<Eigen::Index>(names_.size()));
  auto& [m, s] = coefficient_scratch();
  fn_.drift(theta, x, m);
  fn_.drift_scale(theta, x, s);
  if (!state_box_.contains(x_next)) {
    check_scale(s);
    return kNegInf;
  }
  return truncated_gauss_log(m, s, state_box_, x_next, grad);
}

double TruncatedGaussModel::log_obs(const Vector& theta, State x, State y, Vector* grad) const {
  require_finite(theta, "parameter");
  require_finite(x, "state");
  require_finite(y, "observation");
  if (grad) grad->setZero(static_cast<Eigen::Index>(names_.size()));
  auto& [m, s] = coefficient_scratch();
  fn_.obs_mean(theta, x, m);
  fn_.obs_scale(theta, x, s);
  if (!obs_box_.contains(y)) {
    check_scale(s);
    return kNegInf;
  }
  return truncated_gauss_log(m, s, obs_box_, y, grad);
}

double TruncatedGaussModel::log_trans_normalizer(const Vector& theta, State x) const {
  auto& [m, s] = coefficient_scratch();
  fn_.drift(theta, x, m);
  fn_.drift_scale(theta, x, s);
  double total = 0.0;
  for (std::size_t k = 0; k < state_dim_; ++k) {
    total += log_normal_mass((state_box_.lower()[k] - m.value[k]) / s.value[k],
                             (state_box_.upper()[k] - m.value[k]) / s.value[k])
                 .value;
  }
  return total;
}

double TruncatedGaussModel::log_obs_normalizer(const Vector& theta, State x) const {
  auto& [m, s] = coefficient_scratch();
  fn_.obs_mean(theta, x, m);
  fn_.obs_scale(theta, x, s);
  double total = 0.0;
  for (std::size_t k = 0; k < obs_dim_; ++k) {
    total += log_normal_mass((obs_box_.lower()[k] - m.value[k]) / s.value[k],
                             (obs_box_.upper()[k] - m.value[k]) / s.value[k])
                 .value;
  }
  return total;
}

void TruncatedGaussModel::sample_trans(const Vector& theta, State x, RngStream& rng, std::span<double> out) const {
  auto& [m, s] = coefficient_scratch();
  fn_.drift(theta, x, m);
  fn_.drift_scale(theta, x, s);
  sample_truncated(m, s, state_box_, rng, out, rejection_cap_);
}

void TruncatedGaussModel::sample_obs(const Vector& theta, State x, RngStream& rng, std::span<double> out) const {
  auto& [m, s] = coefficient_scratch();
  fn_.obs_mean(theta, x, m);
  fn_.obs_scale(theta, x, s);
  sample_truncated(m, s, obs_box_, rng, out, rejection_cap_);
}

std::unique_ptr<TransitionBlock> TruncatedGaussModel::transition_block(const Vector& theta,
                                                                       const Matrix& sources) const {
  require_finite(theta, "parameter");
  return std::make_unique<GaussTransitionBlock>(fn_, state_box_, theta, sources);
}

namespace {

// Scalar coefficient c(theta) * f(x) for named parameter k of the layout.
void scalar_param(const ParameterLayout& layout, std::size_t k, const Vector& theta, double factor,
                  Coefficient& out) {
  out.value.resize(1);
  out.value[0] = layout.value(k, theta) * factor;
  out.jacobian.setZero(1, static_cast<Eigen::Index>(layout.dim()));
  if (layout.free_index(k) >= 0) out.jacobian(0, layout.free_index(k)) = factor;
}

}  // namespace

std::unique_ptr<TruncatedGaussModel> make_ar1_model(const ParameterLayout& layout, Box state_box, Box obs_box) {
  if (layout.names() != ar1_parameter_names()) throw ConfigError("model.family", "layout does not match ar1");
  GaussFamilyFunctions fn;
  fn.drift = [layout](const Vector& th, State x, Coefficient& out) { scalar_param(layout, 0, th, x[0], out); };
  fn.drift_scale = [layout](const Vector& th, State, Coefficient& out) { scalar_param(layout, 1, th, 1.0, out); };
  fn.obs_mean = [d = layout.dim()](const Vector&, State x, Coefficient& out) {
    out.value.resize(1);
    out.value[0] = x[0];
    out.jacobian = Matrix::Zero(1, static_cast<Eigen::Index>(d));
  };
  fn.obs_scale = [layout](const Vector& th, State, Coefficient& out) { scalar_param(layout, 2, th, 1.0, out); };
  return std::make_unique<TruncatedGaussModel>("ar1", 1, 1, layout.free_names(), std::move(state_box),
                                               std::move(obs_box), std::move(fn));
}

std::unique_ptr<TruncatedGaussModel> make_sv_model(const ParameterLayout& layout, Box state_box, Box obs_box) {
  if (layout.names() != sv_parameter_names()) throw ConfigError("model.family", "layout does not match sv");
  GaussFamilyFunctions fn;
  fn.drift = [layout](const Vector& th, State x, Coefficient& out) { scalar_param(layout, 0, th, x[0], out); };
  fn.drift_scale = [layout](const Vector& th, State, Coefficient& out) { scalar_param(layout, 1, th, 1.0, out); };
  fn.obs_mean = [d = layout.dim()](const Vector&, State, Coefficient& out) {
    out.value = Vector::Zero(1);
    out.jacobian = Matrix::Zero(1, static_cast<Eigen::Index>(d));
  };
  fn.obs_scale = [layout](const Vector& th, State x, Coefficient& out) {
    scalar_param(layout, 2, th, std::exp(0.5 * x[0]), out);
  };
  return std::make_unique<TruncatedGaussModel>("sv", 1, 1, layout.free_names(), std::move(state_box),
                                               std::move(obs_box), std::move(fn));
}

SimulatedPath simulate(const StateSpaceModel& model, const Vector& theta, std::size_t steps, const RngStream& rng) {
  if (steps < 1) throw Error("simulate: need at least one step");
  const auto dx = static_cast<Eigen::Index>(model.state_dim());
  const auto dy = static_cast<Eigen::Index>(model.obs_dim());
  SimulatedPath path{Matrix(dx, static_cast<Eigen::Index>(steps) + 1), Matrix(dy, static_cast<Eigen::Index>(steps))};
  RngStream init = rng.substream(0);
  model.sample_initial(init, {path.states.col(0).data(), static_cast<std::size_t>(dx)});
  for (std::size_t t = 1; t <= steps; ++t) {
    const auto ti = static_cast<Eigen::Index>(t);
    RngStream r = rng.substream(t);
    model.sample_trans(theta, column_state(path.states, ti - 1), r, {path.states.col(ti).data(), static_cast<std::size_t>(dx)});
    model.sample_obs(theta, column_state(path.states, ti), r, {path.observations.col(ti - 1).data(), static_cast<std::size_t>(dy)});
  }
  return path;
}

}  // namespace rml
