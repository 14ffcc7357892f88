#include "rml/smc.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>

namespace rml {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Normalized interaction weights for one target at a time over the grouped
// old particles: entry g is n_g r(x'|y,u_g) / sum_h n_h r(x'|y,u_h).
class InteractionKernel {
 public:
  InteractionKernel(const StateSpaceModel& model, const Vector& theta, const Matrix& old_positions, State y,
                    std::uint64_t step)
      : groups_(group_positions(old_positions)), step_(step) {
    const Eigen::Index g = groups_.unique.cols();
    const Eigen::Index d = theta.size();
    block_ = model.transition_block(theta, groups_.unique);
    log_base_.resize(g);
    grad_q_.resize(d, g);
    Vector grad(d);
    for (Eigen::Index k = 0; k < g; ++k) {
      log_base_[k] = model.log_obs(theta, column_state(groups_.unique, k), y, &grad) + std::log(groups_.count[k]);
      grad_q_.col(k) = grad;
    }
  }

  const PositionGroups& groups() const { return groups_; }

  void column(State target, Eigen::Ref<Vector> weights, Eigen::Ref<Vector> b) const {
    const double log_mass = block_->normalized_column(target, log_base_, weights, b);
    if (!(log_mass > kNegInf)) throw DegeneracyError(step_, "interaction column has zero mass");
    if (log_mass < kDegeneracyLogMass) throw DegeneracyError(step_, "interaction column log-mass below threshold");
    b.noalias() += grad_q_ * weights;
  }

  /// out = sum_g w_g (values.col(g) + grad log q(y|u_g) + grad log p(target|u_g)).
  void average(State target, const Matrix& values, Eigen::Ref<Vector> out) const {
    const double log_mass = block_->weighted_mean(target, log_base_, values, out);
    if (!(log_mass > kNegInf)) throw DegeneracyError(step_, "interaction column has zero mass");
    if (log_mass < kDegeneracyLogMass) throw DegeneracyError(step_, "interaction column log-mass below threshold");
  }

  const Matrix& grad_q() const { return grad_q_; }

 private:
  PositionGroups groups_;
  std::uint64_t step_;
  std::unique_ptr<TransitionBlock> block_;
  Vector log_base_;  // log q(y|u_g) + log n_g
  Matrix grad_q_;    // grad log q(y|u_g)
};

// Normalized observation weights q(y|x_i) / sum_k q(y|x_k) and gradients of log q.
struct ObservationWeights {
  Vector weights;
  Matrix grad_log_q;
  double log_mass;
};

ObservationWeights observation_weights(const StateSpaceModel& model, const Vector& theta, const Matrix& positions,
                                       State y, std::uint64_t step, bool with_gradient) {
  const Eigen::Index n = positions.cols();
  const PositionGroups groups = group_positions(positions);
  const Eigen::Index g = groups.unique.cols();
  Vector log_q(g);
  Matrix grad_q(with_gradient ? theta.size() : 0, g);
  Vector grad(theta.size());
  for (Eigen::Index k = 0; k < g; ++k) {
    log_q[k] = model.log_obs(theta, column_state(groups.unique, k), y, with_gradient ? &grad : nullptr);
    if (with_gradient) grad_q.col(k) = grad;
  }
  ObservationWeights out{Vector(n), Matrix(with_gradient ? theta.size() : 0, n), 0.0};
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto k = static_cast<Eigen::Index>(groups.group[static_cast<std::size_t>(i)]);
    out.weights[i] = log_q[k];
    if (with_gradient) out.grad_log_q.col(i) = grad_q.col(k);
  }
  const double m = out.weights.maxCoeff();
  if (!(m > kNegInf)) throw DegeneracyError(step, "all observation weights are zero");
  out.weights = (out.weights.array() - m).exp().matrix();
  const double total = out.weights.sum();
  out.log_mass = m + std::log(total);
  if (out.log_mass < kDegeneracyLogMass) throw DegeneracyError(step, "observation log-mass below threshold");
  out.weights /= total;
  return out;
}

}  // namespace

PositionGroups group_positions(const Matrix& positions) {
  const Eigen::Index n = positions.cols();
  const Eigen::Index dim = positions.rows();
  // Open-addressing table keyed on the coordinate bit patterns; groups are
  // numbered in order of first occurrence.
  std::size_t capacity = 16;
  while (capacity < 2 * static_cast<std::size_t>(n)) capacity *= 2;
  std::vector<Eigen::Index> slots(capacity, -1);
  auto hash = [&](Eigen::Index i) {
    std::uint64_t h = 0x9e3779b97f4a7c15ULL;
    for (Eigen::Index k = 0; k < dim; ++k) {
      double v = positions(k, i);
      if (v == 0.0) v = 0.0;  // +0 and -0 are the same position
      h = mix64(h ^ std::bit_cast<std::uint64_t>(v));
    }
    return h;
  };
  auto same = [&](Eigen::Index a, Eigen::Index b) { return (positions.col(a).array() == positions.col(b).array()).all(); };

  PositionGroups out;
  out.group.resize(static_cast<std::size_t>(n));
  std::vector<Eigen::Index> representatives;
  std::vector<double> counts;
  for (Eigen::Index i = 0; i < n; ++i) {
    std::size_t slot = hash(i) & (capacity - 1);
    while (slots[slot] >= 0 && !same(representatives[static_cast<std::size_t>(slots[slot])], i)) {
      slot = (slot + 1) & (capacity - 1);
    }
    if (slots[slot] < 0) {
      slots[slot] = static_cast<Eigen::Index>(representatives.size());
      representatives.push_back(i);
      counts.push_back(0.0);
    }
    const auto g = static_cast<std::size_t>(slots[slot]);
    out.group[static_cast<std::size_t>(i)] = g;
    counts[g] += 1.0;
  }
  out.unique.resize(dim, static_cast<Eigen::Index>(representatives.size()));
  out.count.resize(static_cast<Eigen::Index>(counts.size()));
  for (std::size_t g = 0; g < representatives.size(); ++g) {
    out.unique.col(static_cast<Eigen::Index>(g)) = positions.col(representatives[g]);
    out.count[static_cast<Eigen::Index>(g)] = counts[g];
  }
  return out;
}

ParticleSystem initialize_particles(const StateSpaceModel& model, std::size_t n, const RngStream& rng) {
  if (n < 1) throw Error("particle count must be at least 1");
  ParticleSystem sys;
  const auto dx = static_cast<Eigen::Index>(model.state_dim());
  sys.positions.resize(dx, static_cast<Eigen::Index>(n));
  sys.weights = Matrix::Zero(static_cast<Eigen::Index>(model.param_dim()), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    RngStream r = rng.substream(~std::uint64_t{0}, i);
    model.sample_initial(r, {sys.positions.col(static_cast<Eigen::Index>(i)).data(), static_cast<std::size_t>(dx)});
  }
  return sys;
}

Eigen::Index draw_ancestor(const std::vector<double>& cumulative, RngStream& rng) {
  const double u = rng.uniform() * cumulative.back();
  auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  return std::min<Eigen::Index>(it - cumulative.begin(), static_cast<Eigen::Index>(cumulative.size()) - 1);
}

Matrix propagate(const StateSpaceModel& model, const Vector& theta, const ParticleSystem& system, State y,
                 const RngStream& rng) {
  if (!model.obs_box().contains(y)) throw Error("observation outside the observation box");
  const ObservationWeights ow = observation_weights(model, theta, system.positions, y, system.step, false);
  const Eigen::Index n = system.positions.cols();
  std::vector<double> cumulative(static_cast<std::size_t>(n));
  std::partial_sum(ow.weights.data(), ow.weights.data() + n, cumulative.begin());

  const auto sampler = model.transition_sampler(theta);
  Matrix next(system.positions.rows(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    RngStream r = rng.substream(system.step, static_cast<std::uint64_t>(i));
    const Eigen::Index ancestor = draw_ancestor(cumulative, r);
    sampler->sample(column_state(system.positions, ancestor), r,
                    {next.col(i).data(), static_cast<std::size_t>(next.rows())});
  }
  return next;
}

TransitionTerms build_interaction(const StateSpaceModel& model, const Vector& theta, const Matrix& old_positions,
                                  const Matrix& new_positions, State y, std::uint64_t step) {
  InteractionKernel kernel(model, theta, old_positions, y, step);
  const PositionGroups& groups = kernel.groups();
  const Eigen::Index n_old = old_positions.cols();
  const Eigen::Index n_new = new_positions.cols();
  TransitionTerms out{Matrix(n_old, n_new), Matrix(theta.size(), n_new)};
  Vector w(groups.unique.cols());
  Vector b(theta.size());
  for (Eigen::Index j = 0; j < n_new; ++j) {
    kernel.column(column_state(new_positions, j), w, b);
    for (Eigen::Index i = 0; i < n_old; ++i) {
      const auto g = static_cast<Eigen::Index>(groups.group[static_cast<std::size_t>(i)]);
      out.A(i, j) = w[g] / groups.count[g];
    }
    out.B.col(j) = b;
  }
  return out;
}

ObservationTerms build_observation_terms(const StateSpaceModel& model, const Vector& theta, const Matrix& positions,
                                         State y, std::uint64_t step) {
  const ObservationWeights ow = observation_weights(model, theta, positions, y, step, true);
  const auto n = static_cast<double>(positions.cols());
  return {(ow.weights.array() - 1.0 / n).matrix(), ow.grad_log_q * ow.weights};
}

Matrix update_weights(const Matrix& weights, const TransitionTerms& terms) {
  Matrix out = weights * terms.A + terms.B;
  if (!out.allFinite()) throw Error("non-finite particle weights");
  return out;
}

Vector gradient_estimate(const Matrix& weights, const ObservationTerms& terms) {
  return weights * terms.C + terms.D;
}

Matrix advance_weights(const StateSpaceModel& model, const Vector& theta, const Matrix& old_positions,
                       const Matrix& new_positions, State y, const Matrix& weights, std::uint64_t step) {
  InteractionKernel kernel(model, theta, old_positions, y, step);
  const PositionGroups& groups = kernel.groups();
  const Eigen::Index g_old = groups.unique.cols();
  const Eigen::Index d = theta.size();

  // Per-group mean weight vector.
  Matrix mean_w = Matrix::Zero(d, g_old);
  for (Eigen::Index i = 0; i < weights.cols(); ++i) {
    mean_w.col(static_cast<Eigen::Index>(groups.group[static_cast<std::size_t>(i)])) += weights.col(i);
  }
  mean_w *= groups.count.cwiseInverse().asDiagonal();
  mean_w += kernel.grad_q();

  const PositionGroups targets = group_positions(new_positions);
  Matrix per_target(d, targets.unique.cols());
  Vector b(d);
  for (Eigen::Index t = 0; t < targets.unique.cols(); ++t) {
    kernel.average(column_state(targets.unique, t), mean_w, b);
    per_target.col(t) = b;
  }
  Matrix out(d, new_positions.cols());
  for (Eigen::Index j = 0; j < new_positions.cols(); ++j) {
    out.col(j) = per_target.col(static_cast<Eigen::Index>(targets.group[static_cast<std::size_t>(j)]));
  }
  if (!out.allFinite()) throw Error("non-finite particle weights");
  return out;
}

double centered_weight_norm(const Matrix& weights) {
  return (weights.colwise() - weights.rowwise().mean()).norm();
}

double effective_sample_size(const StateSpaceModel& model, const Vector& theta, const Matrix& positions, State y) {
  const ObservationWeights ow = observation_weights(model, theta, positions, y, 0, false);
  return 1.0 / ow.weights.squaredNorm();
}

}  // namespace rml
