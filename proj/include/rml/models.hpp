#ifndef RML_MODELS_HPP
#define RML_MODELS_HPP

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "rml/core.hpp"

namespace rml {

using State = std::span<const double>;

inline State as_state(const Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
inline State column_state(const Matrix& m, Eigen::Index j) {
  return {m.col(j).data(), static_cast<std::size_t>(m.rows())};
}

struct DensityEval {
  double log_density;
  Vector gradient;
};

/// Transition log-densities from a fixed set of source states to one target
/// at a time. Models override this to hoist per-source work out of the
/// O(N^2) interaction loop.
class TransitionBlock {
 public:
  virtual ~TransitionBlock() = default;
  virtual std::size_t size() const = 0;
  // log p(target | source_i) into log_p[i], its theta-gradient into grad.col(i).
  virtual void column(State target, Eigen::Ref<Vector> log_p, Eigen::Ref<Matrix> grad) const = 0;
  // Normalizes exp(log p(target | source_i) + shift[i]) into w and sets
  // b = sum_i w_i grad log p(target | source_i). Returns the log of the
  // total mass before normalization (-inf when it is zero, w then unset).
  virtual double normalized_column(State target, const Vector& shift, Eigen::Ref<Vector> w,
                                   Eigen::Ref<Vector> b) const;
  // Same weights, but returns only out = sum_i w_i (values.col(i) + grad log p(target | source_i)).
  virtual double weighted_mean(State target, const Vector& shift, const Matrix& values, Eigen::Ref<Vector> out) const;
};

/// Draws from p_theta(. | x) for a fixed theta. Models override this to
/// reuse per-theta work across the particles of one step.
class TransitionSampler {
 public:
  virtual ~TransitionSampler() = default;
  virtual void sample(State x, RngStream& rng, std::span<double> out) const = 0;
};

/// A parameterized state-space model on compact boxes X and Y. Densities
/// are with respect to the model's reference measure on X (Lebesgue, or
/// counting measure for grid models) and Lebesgue measure on Y.
class StateSpaceModel {
 public:
  virtual ~StateSpaceModel() = default;

  virtual std::string family() const = 0;
  virtual std::size_t state_dim() const = 0;
  virtual std::size_t obs_dim() const = 0;
  virtual std::size_t param_dim() const = 0;
  virtual const Box& state_box() const = 0;
  virtual const Box& obs_box() const = 0;
  virtual std::vector<std::string> parameter_names() const = 0;

  // log p_theta(x'|x); -inf when x' is outside X. When grad is non-null it
  // receives the theta-gradient (zero outside the support).
  virtual double log_trans(const Vector& theta, State x, State x_next, Vector* grad = nullptr) const = 0;
  // log q_theta(y|x); -inf when y is outside Y.
  virtual double log_obs(const Vector& theta, State x, State y, Vector* grad = nullptr) const = 0;

  virtual void sample_trans(const Vector& theta, State x, RngStream& rng, std::span<double> out) const = 0;
  virtual void sample_obs(const Vector& theta, State x, RngStream& rng, std::span<double> out) const = 0;
  // Initial law lambda; uniform on the state box unless overridden.
  virtual void sample_initial(RngStream& rng, std::span<double> out) const;

  // Default implementation loops over log_trans.
  virtual std::unique_ptr<TransitionBlock> transition_block(const Vector& theta, const Matrix& sources) const;
  // Default implementation forwards to sample_trans.
  virtual std::unique_ptr<TransitionSampler> transition_sampler(const Vector& theta) const;
};

DensityEval trans_density(const StateSpaceModel& model, const Vector& theta, State x, State x_next);
DensityEval obs_density(const StateSpaceModel& model, const Vector& theta, State x, State y);

/// Maps a family's named parameters onto the free vector theta; names not
/// listed as free take their value from constants.
class ParameterLayout {
 public:
  ParameterLayout(std::vector<std::string> names, std::map<std::string, double> constants,
                  std::vector<std::string> free);

  std::size_t dim() const { return free_.size(); }
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<std::string>& free_names() const { return free_; }

  // Value of the k-th named parameter at theta.
  double value(std::size_t k, const Vector& theta) const;
  // Position of the k-th named parameter in theta, or -1 when fixed.
  int free_index(std::size_t k) const { return slot_[k]; }
  // Unit gradient row of the k-th named parameter (zero when fixed).
  Eigen::RowVectorXd unit(std::size_t k) const;

 private:
  std::vector<std::string> names_;
  std::vector<std::string> free_;
  std::vector<double> constant_;
  std::vector<int> slot_;
};

/// Value and theta-Jacobian (rows = components, cols = parameters).
struct Coefficient {
  Vector value;
  Matrix jacobian;
};
using CoefficientFn = std::function<void(const Vector& theta, State x, Coefficient& out)>;

/// Additive-noise family X' = A(X) + B(X) V, Y = C(X) + D(X) W with standard
/// Gaussian V, W, diagonal positive B and D, truncated to the boxes X, Y.
struct GaussFamilyFunctions {
  CoefficientFn drift;        // A_theta(x), d_x entries
  CoefficientFn drift_scale;  // diag B_theta(x), d_x entries
  CoefficientFn obs_mean;     // C_theta(x), d_y entries
  CoefficientFn obs_scale;    // diag D_theta(x), d_y entries
};

class TruncatedGaussModel : public StateSpaceModel {
 public:
  TruncatedGaussModel(std::string family, std::size_t state_dim, std::size_t obs_dim,
                      std::vector<std::string> param_names, Box state_box, Box obs_box,
                      GaussFamilyFunctions functions);

  std::string family() const override { return family_; }
  std::size_t state_dim() const override { return state_dim_; }
  std::size_t obs_dim() const override { return obs_dim_; }
  std::size_t param_dim() const override { return names_.size(); }
  const Box& state_box() const override { return state_box_; }
  const Box& obs_box() const override { return obs_box_; }
  std::vector<std::string> parameter_names() const override { return names_; }

  double log_trans(const Vector& theta, State x, State x_next, Vector* grad = nullptr) const override;
  double log_obs(const Vector& theta, State x, State y, Vector* grad = nullptr) const override;
  void sample_trans(const Vector& theta, State x, RngStream& rng, std::span<double> out) const override;
  void sample_obs(const Vector& theta, State x, RngStream& rng, std::span<double> out) const override;
  std::unique_ptr<TransitionBlock> transition_block(const Vector& theta, const Matrix& sources) const override;

  /// log of the box mass of the untruncated kernel, per coordinate summed
  /// (log of the normalizer in the truncated density).
  double log_trans_normalizer(const Vector& theta, State x) const;
  double log_obs_normalizer(const Vector& theta, State x) const;

  void set_rejection_cap(std::size_t cap) { rejection_cap_ = cap; }

 private:
  std::string family_;
  std::size_t state_dim_;
  std::size_t obs_dim_;
  std::vector<std::string> names_;
  Box state_box_;
  Box obs_box_;
  GaussFamilyFunctions fn_;
  std::size_t rejection_cap_ = 100000;
};

/// Truncated-Gaussian AR(1): X' = phi X + sigma_x V, Y = X + sigma_y W.
/// Named parameters: phi, sigma_x, sigma_y.
std::unique_ptr<TruncatedGaussModel> make_ar1_model(const ParameterLayout& layout, Box state_box, Box obs_box);

/// Stochastic-volatility-style model: X' = phi X + sigma_x V,
/// Y = beta exp(X/2) W. Named parameters: phi, sigma_x, beta.
std::unique_ptr<TruncatedGaussModel> make_sv_model(const ParameterLayout& layout, Box state_box, Box obs_box);

inline const std::vector<std::string>& ar1_parameter_names() {
  static const std::vector<std::string> names{"phi", "sigma_x", "sigma_y"};
  return names;
}
inline const std::vector<std::string>& sv_parameter_names() {
  static const std::vector<std::string> names{"phi", "sigma_x", "beta"};
  return names;
}

/// log of the standard normal mass of [l, u] together with its partial
/// derivatives in l and u. Accurate in both tails.
struct LogMass {
  double value;
  double d_lower;
  double d_upper;
};
LogMass log_normal_mass(double l, double u);

struct SimulatedPath {
  Matrix states;        // d_x x (T+1): X_0 .. X_T
  Matrix observations;  // d_y x T: Y_1 .. Y_T, Y_t drawn given X_t
};

/// Simulates the (truncated) model with X_0 drawn from the initial law.
SimulatedPath simulate(const StateSpaceModel& model, const Vector& theta, std::size_t steps, const RngStream& rng);

}  // namespace rml

#endif  // RML_MODELS_HPP
