#ifndef RML_DIAGNOSTICS_HPP
#define RML_DIAGNOSTICS_HPP

#include <iosfwd>
#include <memory>
#include <vector>

#include "rml/core.hpp"
#include "rml/models.hpp"
#include "rml/oracle.hpp"
#include "rml/rml.hpp"

namespace rml::diagnostics {

/// Average log-likelihood and its gradient at theta over a fixed data stream.
struct OracleValue {
  double average_log_likelihood = 0.0;
  Vector gradient;
};

class LikelihoodOracle {
 public:
  virtual ~LikelihoodOracle() = default;
  virtual OracleValue evaluate(const Vector& theta) const = 0;
};

/// Tangent Kalman filter over a held-out stream (untruncated approximation).
class KalmanOracle : public LikelihoodOracle {
 public:
  KalmanOracle(oracle::LinearGaussModel model, Matrix observations)
      : model_(std::move(model)), observations_(std::move(observations)) {}
  OracleValue evaluate(const Vector& theta) const override;

 private:
  oracle::LinearGaussModel model_;
  Matrix observations_;
};

/// Exact grid filter over a held-out stream.
class GridOracle : public LikelihoodOracle {
 public:
  GridOracle(std::shared_ptr<const oracle::GridModel> model, Vector law, Matrix observations)
      : model_(std::move(model)), law_(std::move(law)), observations_(std::move(observations)) {}
  OracleValue evaluate(const Vector& theta) const override;

 private:
  std::shared_ptr<const oracle::GridModel> model_;
  Vector law_;
  Matrix observations_;
};

struct BiasStudyOptions {
  std::vector<std::size_t> particles;
  std::size_t seeds = 10;
  std::size_t steps = 50;        // n*: last parameter update whose H is used
  std::size_t window = 0;        // trailing updates averaged; 0 means steps / 2
  std::uint64_t first_seed = 1;  // seeds first_seed, first_seed + 1, ...
  bool inject_oracle = false;    // replace H by the oracle value
};

struct BiasRow {
  std::size_t particles = 0;
  Vector mean_estimate;
  Vector oracle;
  double bias_norm = 0.0;
  double stderr = 0.0;          // norm of the per-coordinate standard errors of the mean
  double bias_norm_late = 0.0;  // same statistic over the last half of the window only
  std::size_t seeds = 0;
};

struct BiasStudyResult {
  std::vector<BiasRow> rows;
  std::size_t steps = 0;
  std::size_t window = 0;
  double slope = 0.0;  // least-squares slope of log bias_norm on log N (NaN if a bias is zero)
};

/// Runs the particle system at fixed theta for `steps` updates on
/// observations 0..steps. Per seed, the error H_k - exact[:, k] is averaged
/// over the last `window` updates; the bias is the mean of that over seeds.
/// exact column k is the exact counterpart of the estimate built from
/// observations 0..k+1. With window = 1 this compares H at step n* only.
BiasStudyResult bias_vs_particles(const StateSpaceModel& model, const ParameterPoint& theta,
                                  const Matrix& observations, const Matrix& exact, const BiasStudyOptions& options);

/// Grid version: the exact values come from the grid predictor recursion.
BiasStudyResult bias_vs_particles(const oracle::GridModel& model, const ParameterPoint& theta,
                                  const Matrix& observations, const BiasStudyOptions& options);

struct TailStudyResult {
  std::size_t particles = 0;
  std::size_t tail_start = 0;   // index of the first tail record
  std::size_t tail_length = 0;
  std::size_t evaluations = 0;  // oracle evaluations inside the window
  double mean_gradient_norm = 0.0;
  double stderr = 0.0;  // batch-means standard error of mean_gradient_norm
  double mean_log_likelihood = 0.0;
  double log_likelihood_oscillation = 0.0;  // max - min over the evaluations
  std::size_t projection_hits = 0;
  std::size_t tail_projection_hits = 0;
};

/// Oracle statistics over the final tail_fraction of the trace, evaluated
/// at theta_next of at most max_evaluations evenly spaced tail records.
TailStudyResult tail_gradient_stats(const RunTrace& trace, const LikelihoodOracle& oracle, double tail_fraction = 0.1,
                                    std::size_t max_evaluations = 200);

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
};
LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y);

/// Geometric decay fit of a positive sequence: slope of log d_k on k.
/// ratio = exp(slope).
struct GeometricFit {
  double ratio = 0.0;
  double r_squared = 0.0;
};
GeometricFit fit_geometric(const std::vector<double>& distances);

void write_bias_table(std::ostream& os, const BiasStudyResult& result);
void write_bias_records(std::ostream& os, const BiasStudyResult& result);
void write_tail_table(std::ostream& os, const std::vector<TailStudyResult>& results);
void write_tail_records(std::ostream& os, const std::vector<TailStudyResult>& results);

}  // namespace rml::diagnostics

#endif  // RML_DIAGNOSTICS_HPP
