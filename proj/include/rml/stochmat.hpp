#ifndef RML_STOCHMAT_HPP
#define RML_STOCHMAT_HPP

#include <vector>

#include "rml/core.hpp"

namespace rml::stochmat {

/// Dobrushin coefficient of a column-stochastic matrix:
///   tau(A) = 1 - min_{j', j''} sum_i min(A(i, j'), A(i, j'')).
double dobrushin_tau(const Matrix& a);

/// Equivalent form max_{j', j''} (1/2) sum_i |A(i, j') - A(i, j'')|.
double dobrushin_tau_half_l1(const Matrix& a);

/// Frobenius norm of A_1 A_2 ... A_n Lambda with Lambda = I - e e^T / N.
double lambda_product_norm(const std::vector<Matrix>& matrices);

/// Centering projector Lambda = I - e e^T / N.
Matrix centering(Eigen::Index n);

/// True when entries are non-negative and columns sum to 1 within tol.
bool is_column_stochastic(const Matrix& a, double tol = 1e-10);

/// Random N x N column-stochastic matrix with every entry >= alpha / N.
Matrix random_floored(Eigen::Index n, double alpha, RngStream& rng);

/// Random probability vector of length n.
Vector random_probability(Eigen::Index n, RngStream& rng);

double l1_norm(const Vector& v);

}  // namespace rml::stochmat

#endif  // RML_STOCHMAT_HPP
