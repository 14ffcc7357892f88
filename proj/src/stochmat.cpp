#include "rml/stochmat.hpp"

#include <algorithm>

namespace rml::stochmat {

double dobrushin_tau(const Matrix& a) {
  double overlap = 1.0;
  for (Eigen::Index j1 = 0; j1 < a.cols(); ++j1) {
    for (Eigen::Index j2 = j1 + 1; j2 < a.cols(); ++j2) {
      overlap = std::min(overlap, a.col(j1).cwiseMin(a.col(j2)).sum());
    }
  }
  return std::clamp(1.0 - overlap, 0.0, 1.0);
}

double dobrushin_tau_half_l1(const Matrix& a) {
  double worst = 0.0;
  for (Eigen::Index j1 = 0; j1 < a.cols(); ++j1) {
    for (Eigen::Index j2 = j1 + 1; j2 < a.cols(); ++j2) {
      worst = std::max(worst, 0.5 * (a.col(j1) - a.col(j2)).cwiseAbs().sum());
    }
  }
  return worst;
}

Matrix centering(Eigen::Index n) {
  return Matrix::Identity(n, n) - Matrix::Constant(n, n, 1.0 / static_cast<double>(n));
}

double lambda_product_norm(const std::vector<Matrix>& matrices) {
  if (matrices.empty()) throw Error("lambda_product_norm: empty product");
  const Eigen::Index n = matrices.front().rows();
  Matrix acc = centering(n);
  for (auto it = matrices.rbegin(); it != matrices.rend(); ++it) {
    if (it->rows() != n || it->cols() != n) throw Error("lambda_product_norm: dimension mismatch");
    acc = (*it) * acc;
  }
  return acc.norm();
}

bool is_column_stochastic(const Matrix& a, double tol) {
  if ((a.array() < 0.0).any()) return false;
  return ((a.colwise().sum().array() - 1.0).abs() <= tol).all();
}

Vector random_probability(Eigen::Index n, RngStream& rng) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = -std::log1p(-rng.uniform());
  return v / v.sum();
}

Matrix random_floored(Eigen::Index n, double alpha, RngStream& rng) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("random_floored: alpha must lie in [0, 1]");
  Matrix a(n, n);
  const double floor = alpha / static_cast<double>(n);
  for (Eigen::Index j = 0; j < n; ++j) a.col(j) = floor + (1.0 - alpha) * random_probability(n, rng).array();
  return a;
}

double l1_norm(const Vector& v) { return v.cwiseAbs().sum(); }

}  // namespace rml::stochmat
