#ifndef RML_CORE_HPP
#define RML_CORE_HPP

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace rml {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Error hierarchy. Everything thrown by the library derives from Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration; key() names the offending entry, e.g. "model.box".
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

// A density could not be evaluated (degenerate scale, non-finite input, ...).
class ModelError : public Error {
 public:
  using Error::Error;
};

// Particle weights collapsed: a log-mass fell below the degeneracy threshold.
class DegeneracyError : public Error {
 public:
  DegeneracyError(std::uint64_t step, const std::string& what)
      : Error("degeneracy at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::uint64_t step() const { return step_; }

 private:
  std::uint64_t step_;
};

// Natural-log mass below which a normalizing sum is treated as collapsed.
inline constexpr double kDegeneracyLogMass = -700.0;

/// Axis-aligned compact box [lower, upper] in R^k.
class Box {
 public:
  Box() = default;
  Box(Vector lower, Vector upper);

  std::size_t dim() const { return static_cast<std::size_t>(lower_.size()); }
  const Vector& lower() const { return lower_; }
  const Vector& upper() const { return upper_; }
  double volume() const;

  bool contains(std::span<const double> x) const;
  bool contains(const Vector& x) const { return contains(std::span<const double>(x.data(), x.size())); }
  Vector clamp(const Vector& x) const;

 private:
  Vector lower_;
  Vector upper_;
};

/// A parameter vector together with the compact box Q it is kept in.
struct ParameterPoint {
  Vector theta;
  Box box;
};

/// Coordinate-wise clamp of theta into its box. Idempotent.
ParameterPoint project_to_box(const ParameterPoint& p);

/// Step sizes alpha_n = a0 / (n + n0 + 1)^a with a in (1/2, 1].
///
/// a0 = 0 is accepted and yields a frozen schedule (all steps zero); it is
/// only useful for running the particle system at a fixed parameter.
class StepSchedule {
 public:
  StepSchedule(double a0, double exponent, std::uint64_t n0 = 0);

  double operator()(std::uint64_t n) const;

  double scale() const { return a0_; }
  double exponent() const { return exponent_; }
  std::uint64_t offset() const { return n0_; }

 private:
  double a0_;
  double exponent_;
  std::uint64_t n0_;
};

double step_size(const StepSchedule& schedule, std::uint64_t n);

/// Counter-based random stream.
///
/// Draw k of stream (seed, id) is a pure function of (seed, id, k), so
/// results do not depend on the order in which streams are consumed.
/// Satisfies UniformRandomBitGenerator and works with <random> distributions.
class RngStream {
 public:
  using result_type = std::uint64_t;

  RngStream(std::uint64_t seed, std::uint64_t stream = 0);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }
  result_type operator()();

  /// Independent child stream identified by (this stream, a, b).
  RngStream substream(std::uint64_t a, std::uint64_t b = 0) const;

  double uniform();  // [0, 1)
  double normal();   // standard normal
  std::size_t index(std::size_t n);  // uniform on {0, ..., n-1}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t draws() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);

/// log(sum(exp(v))) with a max pivot; -inf for an empty or all -inf input.
double log_sum_exp(std::span<const double> v);

}  // namespace rml

#endif  // RML_CORE_HPP
