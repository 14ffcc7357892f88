#include "rml/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace rml {

Box::Box(Vector lower, Vector upper) : lower_(std::move(lower)), upper_(std::move(upper)) {
  if (lower_.size() != upper_.size() || lower_.size() == 0) {
    throw Error("box: lower and upper must have the same positive dimension");
  }
  for (Eigen::Index i = 0; i < lower_.size(); ++i) {
    if (!std::isfinite(lower_[i]) || !std::isfinite(upper_[i]) || !(lower_[i] < upper_[i])) {
      throw Error("box: need finite lower[i] < upper[i] in coordinate " + std::to_string(i));
    }
  }
}

double Box::volume() const { return (upper_ - lower_).prod(); }

bool Box::contains(std::span<const double> x) const {
  if (x.size() != dim()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] >= lower_[i] && x[i] <= upper_[i])) return false;
  }
  return true;
}

Vector Box::clamp(const Vector& x) const { return x.cwiseMax(lower_).cwiseMin(upper_); }

ParameterPoint project_to_box(const ParameterPoint& p) { return {p.box.clamp(p.theta), p.box}; }

StepSchedule::StepSchedule(double a0, double exponent, std::uint64_t n0)
    : a0_(a0), exponent_(exponent), n0_(n0) {
  if (!(a0 >= 0.0) || !std::isfinite(a0)) throw Error("step schedule: a0 must be finite and >= 0");
  if (!(exponent > 0.5 && exponent <= 1.0)) throw Error("step schedule: exponent must lie in (1/2, 1]");
}

double StepSchedule::operator()(std::uint64_t n) const {
  return a0_ * std::pow(static_cast<double>(n) + static_cast<double>(n0_) + 1.0, -exponent_);
}

double step_size(const StepSchedule& schedule, std::uint64_t n) { return schedule(n); }

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), key_(mix64(mix64(seed) ^ (stream * 0xd1342543de82ef95ULL + 1))) {}

RngStream::result_type RngStream::operator()() {
  return mix64(key_ + 0x9e3779b97f4a7c15ULL * counter_++);
}

RngStream RngStream::substream(std::uint64_t a, std::uint64_t b) const {
  return RngStream(seed_, mix64(mix64(stream_ ^ mix64(a)) + b));
}

double RngStream::uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

double RngStream::normal() {
  std::normal_distribution<double> dist;
  return dist(*this);
}

std::size_t RngStream::index(std::size_t n) {
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  return dist(*this);
}

double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace rml
