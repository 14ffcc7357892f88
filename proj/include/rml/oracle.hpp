#ifndef RML_ORACLE_HPP
#define RML_ORACLE_HPP

#include <memory>
#include <utility>
#include <vector>

#include "rml/core.hpp"
#include "rml/models.hpp"

namespace rml::oracle {

/// Row-stochastic transition matrix on a grid with its theta-derivatives.
struct GridKernel {
  Matrix K;                 // K(i, j) = mass of g_j given g_i
  std::vector<Matrix> dK;   // dK[k](i, j) = d K(i, j) / d theta_k
};

/// A scalar-state model restricted to grid points g_1 < ... < g_M.
///
/// The reference measure on X is the counting measure with atom weight
/// `atom`; p(g_j | g_i) = K(i, j) / atom where row i of K is the base
/// model's transition density at the grid points, renormalized over the
/// grid. Observations keep the base model's density. Usable both as an
/// exact-filter oracle and as an ordinary model for the particle code.
class GridModel : public StateSpaceModel {
 public:
  GridModel(std::shared_ptr<const StateSpaceModel> base, Vector points, double atom = 1.0);

  std::string family() const override { return "grid_" + base_->family(); }
  std::size_t state_dim() const override { return 1; }
  std::size_t obs_dim() const override { return base_->obs_dim(); }
  std::size_t param_dim() const override { return base_->param_dim(); }
  const Box& state_box() const override { return box_; }
  const Box& obs_box() const override { return base_->obs_box(); }
  std::vector<std::string> parameter_names() const override { return base_->parameter_names(); }

  double log_trans(const Vector& theta, State x, State x_next, Vector* grad = nullptr) const override;
  double log_obs(const Vector& theta, State x, State y, Vector* grad = nullptr) const override;
  void sample_trans(const Vector& theta, State x, RngStream& rng, std::span<double> out) const override;
  void sample_obs(const Vector& theta, State x, RngStream& rng, std::span<double> out) const override;
  void sample_initial(RngStream& rng, std::span<double> out) const override;
  std::unique_ptr<TransitionBlock> transition_block(const Vector& theta, const Matrix& sources) const override;
  std::unique_ptr<TransitionSampler> transition_sampler(const Vector& theta) const override;

  std::size_t size() const { return static_cast<std::size_t>(points_.size()); }
  const Vector& points() const { return points_; }
  double atom() const { return atom_; }
  const StateSpaceModel& base() const { return *base_; }

  /// Index of grid point x; throws if x is not exactly a grid point.
  std::size_t index_of(double x) const;

  GridKernel kernel(const Vector& theta) const;
  /// q(y | g_i) for all i, and its theta-gradient (d x M).
  void observation(const Vector& theta, State y, Vector& q, Matrix& grad_q) const;

  /// Initial law lambda: uniform over the grid.
  Vector uniform_law() const;

 private:
  // Row i of log K and the gradients of log K(i, .), computed from the base.
  void kernel_row(const Vector& theta, std::size_t i, Vector& log_row, Matrix& grad_log_row) const;

  std::shared_ptr<const StateSpaceModel> base_;
  Vector points_;
  double atom_;
  Box box_;
};

/// Exact measure xi (probability masses on the grid) and its derivative
/// zeta (d x M signed masses).
struct GridFilterState {
  Vector xi;
  Matrix zeta;
};

GridFilterState initial_state(const Vector& law, std::size_t param_dim);

/// Optimal filter update (xi, zeta) -> (F~_{theta,y}(xi), G~_{theta,y}(xi, zeta))
/// with r~(y, x' | x) = q(y | x') p(x' | x).
GridFilterState grid_filter_update(const GridModel& gm, const Vector& theta, State y, const GridFilterState& s);

/// One-step predictor update (F_{theta,y}, G_{theta,y}) with
/// r(x' | y, x) = p(x' | x) q(y | x): conditions on y at the current
/// time, then moves one step forward.
GridFilterState grid_predictor_update(const GridModel& gm, const Vector& theta, State y, const GridFilterState& s);

/// H_{theta,y}(xi, zeta) = integral of h over mu, with xi the predictor.
Vector grid_gradient(const GridModel& gm, const Vector& theta, State y, const GridFilterState& s);

/// H~_{theta,y}(xi, zeta), with xi the filter at the previous time.
Vector grid_filter_gradient(const GridModel& gm, const Vector& theta, State y, const GridFilterState& s);

/// log of the filter normalizer: log int int q(y|x') p(x'|x) mu(dx') xi(dx).
double grid_filter_log_normalizer(const GridModel& gm, const Vector& theta, State y, const GridFilterState& s);

/// Moves a measure pair one step through the kernel: (xi K, zeta K + xi dK).
GridFilterState push_forward(const GridModel& gm, const Vector& theta, const GridFilterState& s);

/// Reweights by the observation density: (alpha~_{theta,y}(xi), beta~_{theta,y}(xi, zeta)).
GridFilterState reweight(const GridModel& gm, const Vector& theta, State y, const GridFilterState& s);

/// log q^n(y_{1:n} | lambda): X_0 ~ lambda unobserved, Y_k observed from X_k.
/// observations is d_y x n.
double grid_log_likelihood(const GridModel& gm, const Vector& theta, const Vector& law, const Matrix& observations);

/// Gradient of grid_log_likelihood accumulated as sum_k H_{theta,y_k} at the
/// exact predictor states (predictor of X_1 is lambda K).
Vector grid_score(const GridModel& gm, const Vector& theta, const Vector& law, const Matrix& observations);

/// Both of the above from one predictor pass: the predictor normalizers
/// multiply to the same likelihood as the filter normalizers.
std::pair<double, Vector> grid_log_likelihood_and_score(const GridModel& gm, const Vector& theta, const Vector& law,
                                                        const Matrix& observations);

/// Exact counterpart of the particle estimate H(theta, Z_n): predictor
/// started at (law, 0) at time 0, updated with y_0..y_{n-1}, H evaluated
/// at y_n, where n = observations.cols() - 1.
Vector grid_exact_estimate(const GridModel& gm, const Vector& theta, const Vector& law, const Matrix& observations);

/// Column k holds grid_exact_estimate on observations 0..k.
Matrix grid_exact_estimates(const GridModel& gm, const Vector& theta, const Vector& law, const Matrix& observations);

/// Total-variation distance (half l1) between two probability vectors.
double total_variation(const Vector& a, const Vector& b);

/// Scalar linear-Gaussian model X' = phi X + sigma_x V, Y = X + sigma_y W
/// (untruncated), parameters laid out as for the ar1 family, with a fixed
/// Gaussian law for the state at the first observation.
struct LinearGaussModel {
  ParameterLayout layout;
  double prior_mean = 0.0;
  double prior_variance = 1.0;
};

struct KalmanResult {
  double average_log_likelihood = 0.0;  // (1/T) log p(y_0..y_{T-1})
  Vector gradient;                      // its exact theta-gradient
  Matrix step_scores;                   // d x T per-observation scores, if requested
};

/// Kalman filter with tangent (sensitivity) recursions for the predicted
/// mean and variance. observations is 1 x T.
KalmanResult kalman_tangent_gradient(const LinearGaussModel& model, const Vector& theta, const Matrix& observations,
                                     bool keep_step_scores = false);

}  // namespace rml::oracle

#endif  // RML_ORACLE_HPP
