#ifndef RML_SMC_HPP
#define RML_SMC_HPP

#include <cstdint>
#include <vector>

#include "rml/core.hpp"
#include "rml/models.hpp"

namespace rml {

/// Particles X_{n,1..N} (columns of positions) and their filter-derivative
/// weights W_n (d x N, column i belongs to particle i).
struct ParticleSystem {
  Matrix positions;
  Matrix weights;
  std::uint64_t step = 0;

  std::size_t size() const { return static_cast<std::size_t>(positions.cols()); }
};

/// N particles drawn from the model's initial law, weights zero.
ParticleSystem initialize_particles(const StateSpaceModel& model, std::size_t n, const RngStream& rng);

/// Column-stochastic A (N x N) and B (d x N) of the weight recursion.
struct TransitionTerms {
  Matrix A;
  Matrix B;
};

/// Centered normalized observation weights C (sums to zero) and the
/// normalized observation gradient D.
struct ObservationTerms {
  Vector C;
  Vector D;
};

/// Multinomial draw from unnormalized cumulative weights using one uniform
/// from rng: the first index whose cumulative weight exceeds u * total.
Eigen::Index draw_ancestor(const std::vector<double>& cumulative, RngStream& rng);

/// New positions drawn i.i.d. from the mixture
///   sum_j p(x | X_j) q(y | X_j) / sum_j q(y | X_j):
/// ancestor j by multinomial draw on q(y|X_j), then x ~ p(. | X_j).
/// Particle i uses rng.substream(system.step, i).
Matrix propagate(const StateSpaceModel& model, const Vector& theta, const ParticleSystem& system, State y,
                 const RngStream& rng);

/// A[i][j] = r(x'_j | y, x_i) / sum_k r(x'_j | y, x_k) and
/// B_j = sum_k grad r(x'_j | y, x_k) / sum_k r(x'_j | y, x_k), with
/// r(x'|y,x) = p(x'|x) q(y|x). Dense; O(d N^2) memory, meant for small N.
TransitionTerms build_interaction(const StateSpaceModel& model, const Vector& theta, const Matrix& old_positions,
                                  const Matrix& new_positions, State y, std::uint64_t step = 0);

ObservationTerms build_observation_terms(const StateSpaceModel& model, const Vector& theta, const Matrix& positions,
                                         State y, std::uint64_t step = 0);

/// W A + B.
Matrix update_weights(const Matrix& weights, const TransitionTerms& terms);

/// W C + D.
Vector gradient_estimate(const Matrix& weights, const ObservationTerms& terms);

/// Same result as update_weights(W, build_interaction(...)) without storing
/// A: columns are formed one target at a time, and particles that share a
/// position are handled once.
Matrix advance_weights(const StateSpaceModel& model, const Vector& theta, const Matrix& old_positions,
                       const Matrix& new_positions, State y, const Matrix& weights, std::uint64_t step = 0);

/// Frobenius norm of W Lambda, Lambda = I - e e^T / N.
double centered_weight_norm(const Matrix& weights);

/// Effective sample size of the normalized observation weights.
double effective_sample_size(const StateSpaceModel& model, const Vector& theta, const Matrix& positions, State y);

/// Particles grouped by identical position.
struct PositionGroups {
  Matrix unique;                    // d_x x G
  std::vector<std::size_t> group;   // particle -> group
  Vector count;                     // particles per group
};
PositionGroups group_positions(const Matrix& positions);

}  // namespace rml

#endif  // RML_SMC_HPP
