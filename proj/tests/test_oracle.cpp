#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <memory>

#include "rml/diagnostics.hpp"
#include "rml/oracle.hpp"
#include "rml/smc.hpp"
#include "support.hpp"

using namespace rml;
using namespace rml::oracle;
using namespace rml::test;

namespace {

std::shared_ptr<GridModel> grid(std::vector<std::string> free, Eigen::Index points = 7) {
  std::shared_ptr<const StateSpaceModel> base =
      make_ar1_model(ar1_layout(std::move(free), {{"sigma_x", 0.8}, {"sigma_y", 0.6}}), interval(-3.0, 3.0),
                     interval(-8.0, 8.0));
  return std::make_shared<GridModel>(base, Vector::LinSpaced(points, -2.0, 2.0), 0.5);
}

Matrix grid_data(const GridModel& gm, const Vector& theta, std::size_t steps, std::uint64_t seed) {
  return simulate(gm, theta, steps, RngStream(seed)).observations;
}

GridFilterState run_filter(const GridModel& gm, const Vector& theta, const Matrix& y, GridFilterState s) {
  for (Eigen::Index k = 0; k < y.cols(); ++k) s = grid_filter_update(gm, theta, as_state(Vector(y.col(k))), s);
  return s;
}

GridFilterState run_predictor(const GridModel& gm, const Vector& theta, const Matrix& y, GridFilterState s) {
  for (Eigen::Index k = 0; k < y.cols(); ++k) s = grid_predictor_update(gm, theta, as_state(Vector(y.col(k))), s);
  return s;
}

}  // namespace

TEST_CASE("grid kernel rows are probability vectors and sampling follows them") {
  const auto gm = grid({"phi", "sigma_x"});
  const Vector theta = vec({0.6, 0.8});
  const GridKernel k = gm->kernel(theta);
  CHECK((k.K.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-14);
  for (const Matrix& dk : k.dK) CHECK(dk.rowwise().sum().cwiseAbs().maxCoeff() <= 1e-14);
  // Density with respect to the counting measure: sum_j p(g_j | g_i) * atom = 1.
  double mass = 0.0;
  for (Eigen::Index j = 0; j < gm->points().size(); ++j) {
    mass += std::exp(gm->log_trans(theta, State(&gm->points()[2], 1), State(&gm->points()[j], 1))) * gm->atom();
  }
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-14));
  const double off = 0.3;
  CHECK(gm->log_trans(theta, State(&gm->points()[0], 1), State(&off, 1)) == -std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(gm->index_of(0.1), ModelError);

  // Empirical transition frequencies from the particle sampler.
  const auto sampler = gm->transition_sampler(theta);
  RngStream rng(3);
  Vector counts = Vector::Zero(gm->points().size());
  const int draws = 100000;
  double out = 0.0;
  for (int i = 0; i < draws; ++i) {
    sampler->sample(State(&gm->points()[3], 1), rng, {&out, 1});
    counts[static_cast<Eigen::Index>(gm->index_of(out))] += 1.0;
  }
  for (Eigen::Index j = 0; j < counts.size(); ++j) {
    const double p = k.K(3, j);
    CHECK(std::abs(counts[j] / draws - p) <= 4.0 * std::sqrt(p * (1 - p) / draws) + 1e-12);
  }
}

TEST_CASE("filter updates preserve total mass and zero derivative mass") {
  const auto gm = grid({"phi", "sigma_x"});
  const Vector theta = vec({0.7, 0.9});
  const Matrix y = grid_data(*gm, theta, 40, 2);
  GridFilterState s = initial_state(gm->uniform_law(), 2);
  for (Eigen::Index k = 0; k < y.cols(); ++k) {
    s = grid_filter_update(*gm, theta, as_state(Vector(y.col(k))), s);
    REQUIRE(std::abs(s.xi.sum() - 1.0) <= 1e-12);
    REQUIRE((s.xi.array() >= 0.0).all());
    REQUIRE(s.zeta.rowwise().sum().cwiseAbs().maxCoeff() * gm->atom() <= 1e-12);
  }
}

TEST_CASE("filter forgets its initialization geometrically") {
  // Sticky chain: slow mixing keeps the distance above rounding for all 30 steps.
  std::shared_ptr<const StateSpaceModel> base = make_ar1_model(
      ar1_layout({"sigma_x"}, {{"phi", 0.9}, {"sigma_y", 0.5}}), interval(-3.0, 3.0), interval(-8.0, 8.0));
  const auto gm = std::make_shared<GridModel>(base, Vector::LinSpaced(9, -2.0, 2.0));
  const Vector theta = vec({0.3});
  const Matrix y = grid_data(*gm, theta, 30, 8);
  const Eigen::Index m = gm->points().size();
  GridFilterState a = initial_state(Vector::Unit(m, 0), 1);
  GridFilterState b = initial_state(Vector::Unit(m, m - 1), 1);
  std::vector<double> tv;
  for (Eigen::Index k = 0; k < y.cols(); ++k) {
    a = grid_filter_update(*gm, theta, as_state(Vector(y.col(k))), a);
    b = grid_filter_update(*gm, theta, as_state(Vector(y.col(k))), b);
    tv.push_back(total_variation(a.xi, b.xi));
  }
  const diagnostics::GeometricFit fit = diagnostics::fit_geometric(tv);
  CHECK(fit.ratio < 1.0);
  CHECK(fit.r_squared >= 0.95);
  CHECK(tv.back() < tv.front());
}

TEST_CASE("parameter-free densities give a zero gradient") {
  const auto gm = std::make_shared<GridModel>(parameter_free_model(), Vector::LinSpaced(4, 0.0, 1.0));
  const GridFilterState s = initial_state(gm->uniform_law(), 1);
  const Vector y = vec({0.4});
  CHECK(grid_gradient(*gm, vec({0.0}), as_state(y), s).norm() == 0.0);
  CHECK(grid_filter_gradient(*gm, vec({0.0}), as_state(y), s).norm() == 0.0);
}

TEST_CASE("the derivative recursion is the theta-derivative of the filter") {
  const auto gm = grid({"phi", "sigma_x", "sigma_y"});
  const Vector theta = vec({0.6, 0.9, 0.7});
  const Matrix y = grid_data(*gm, theta, 25, 4);
  const GridFilterState start = initial_state(gm->uniform_law(), 3);
  const GridFilterState exact = run_filter(*gm, theta, y, start);
  const double h = 1e-5;
  double worst = 0.0;
  for (Eigen::Index k = 0; k < 3; ++k) {
    Vector up = theta, dn = theta;
    up[k] += h;
    dn[k] -= h;
    const Vector fd = (run_filter(*gm, up, y, start).xi - run_filter(*gm, dn, y, start).xi) / (2 * h);
    for (Eigen::Index j = 0; j < fd.size(); ++j) {
      worst = std::max(worst, std::abs(exact.zeta(k, j) - fd[j]) / std::max(std::abs(fd[j]), 1e-6));
    }
  }
  CHECK(worst <= 1e-5);
}

TEST_CASE("summed gradients equal the derivative of the exact log-likelihood") {
  const auto gm = grid({"phi", "sigma_x", "sigma_y"});
  const Vector theta = vec({0.6, 0.9, 0.7});
  const Vector law = gm->uniform_law();
  const Matrix y = grid_data(*gm, theta, 50, 6);
  const Vector score = grid_score(*gm, theta, law, y);
  const Vector fd = fd_gradient([&](const Vector& t) { return grid_log_likelihood(*gm, t, law, y); }, theta);
  CHECK(rel_err(score, fd) <= 1e-4);

  const auto [ll, fused] = grid_log_likelihood_and_score(*gm, theta, law, y);
  CHECK(ll == doctest::Approx(grid_log_likelihood(*gm, theta, law, y)).epsilon(1e-12));
  CHECK(rel_err(fused, score) <= 1e-12);

  // Column k: predictor started at (law, 0), updated with y_0..y_{k-1}, H at y_k.
  const Matrix all = grid_exact_estimates(*gm, theta, law, y);
  GridFilterState s = initial_state(law, 3);
  for (Eigen::Index k = 0; k < y.cols(); ++k) {
    const Vector yk = y.col(k);
    REQUIRE(rel_err(Vector(all.col(k)), grid_gradient(*gm, theta, as_state(yk), s), 1e-8) <= 1e-12);
    s = grid_predictor_update(*gm, theta, as_state(yk), s);
  }
  CHECK(rel_err(Vector(all.col(all.cols() - 1)), grid_exact_estimate(*gm, theta, law, y)) <= 1e-14);
}

TEST_CASE("predictor equals the filter moved one step") {
  const auto gm = grid({"phi", "sigma_y"});
  const Vector theta = vec({0.5, 0.8});
  const Matrix y = grid_data(*gm, theta, 30, 12);
  const GridFilterState law = initial_state(gm->uniform_law(), 2);
  GridFilterState filter = law;
  GridFilterState predictor = push_forward(*gm, theta, law);
  for (Eigen::Index k = 0; k < y.cols(); ++k) {
    const Vector yk = y.col(k);
    filter = grid_filter_update(*gm, theta, as_state(yk), filter);
    predictor = grid_predictor_update(*gm, theta, as_state(yk), predictor);
    const GridFilterState moved = push_forward(*gm, theta, filter);
    REQUIRE((moved.xi - predictor.xi).cwiseAbs().maxCoeff() <= 1e-12);
    REQUIRE((moved.zeta - predictor.zeta).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, moved.zeta.norm()));
  }
  // Reweighting then moving is the predictor update.
  const Vector yn = y.col(0);
  const GridFilterState two = push_forward(*gm, theta, reweight(*gm, theta, as_state(yn), predictor));
  const GridFilterState one = grid_predictor_update(*gm, theta, as_state(yn), predictor);
  CHECK((two.xi - one.xi).cwiseAbs().maxCoeff() <= 1e-14);
  CHECK((two.zeta - one.zeta).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("two-point instance matches hand arithmetic") {
  const auto base = make_ar1_model(ar1_layout({"phi"}, {{"sigma_x", 1.0}, {"sigma_y", 1.0}}), interval(-2.0, 2.0),
                                   interval(-5.0, 5.0));
  const GridModel gm(std::shared_ptr<const StateSpaceModel>(base.get(), [](const StateSpaceModel*) {}),
                     vec({-1.0, 1.0}));
  const double th = 0.5;
  const Vector theta = vec({th});
  const double y0 = 0.3, y1 = -0.8;

  // Unnormalized Gaussian kernel rows renormalized over {-1, 1}:
  // K(i, j) ∝ exp(-(g_j - th g_i)^2 / 2), so K(i, same) = 1 / (1 + exp(-2 th)).
  const double same = 1.0 / (1.0 + std::exp(-2.0 * th));
  const double dsame = 2.0 * std::exp(-2.0 * th) * same * same;
  Matrix K(2, 2), dK(2, 2);
  K << same, 1 - same, 1 - same, same;
  dK << dsame, -dsame, -dsame, dsame;
  // Truncated observation density; the truncation mass is the same for both points by symmetry.
  const auto q = [](double x, double y) { return std::exp(-0.5 * (y - x) * (y - x)); };

  // Predictor of X_1 given y_0 from the uniform law, then H at y_1.
  const double q00 = q(-1, y0), q01 = q(1, y0);
  const double z0 = 0.5 * q00 + 0.5 * q01;
  Vector xi(2), zeta(2);
  for (int j = 0; j < 2; ++j) {
    xi[j] = (0.5 * q00 * K(0, j) + 0.5 * q01 * K(1, j)) / z0;
    zeta[j] = (0.5 * q00 * dK(0, j) + 0.5 * q01 * dK(1, j)) / z0;
  }
  zeta -= xi * zeta.sum();  // derivative of the normalized predictor; sum of zeta is already 0
  const double q10 = q(-1, y1), q11 = q(1, y1);
  const double h = (q10 * zeta[0] + q11 * zeta[1]) / (q10 * xi[0] + q11 * xi[1]);

  Matrix y(1, 2);
  y << y0, y1;
  const Vector est = grid_exact_estimate(gm, theta, gm.uniform_law(), y);
  CHECK(std::abs(est[0] - h) <= 1e-12);
  const GridFilterState s = grid_predictor_update(gm, theta, as_state(vec({y0})), initial_state(gm.uniform_law(), 1));
  CHECK((s.xi - xi).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("grid gradient on empirical measures equals the particle estimate") {
  const auto gm = grid({"phi", "sigma_y"});
  const Vector theta = vec({0.6, 0.7});
  RngStream rng(19);
  for (int t = 0; t < 50; ++t) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.index(12));
    Matrix positions(1, n), weights(2, n);
    GridFilterState s{Vector::Zero(gm->points().size()), Matrix::Zero(2, gm->points().size())};
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto g = static_cast<Eigen::Index>(rng.index(gm->size()));
      positions(0, i) = gm->points()[g];
      weights.col(i) = vec({rng.normal(), rng.normal()});
    }
    const Vector mean_w = weights.rowwise().mean();
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto g = static_cast<Eigen::Index>(gm->index_of(positions(0, i)));
      s.xi[g] += 1.0 / static_cast<double>(n);
      s.zeta.col(g) += (weights.col(i) - mean_w) / static_cast<double>(n);
    }
    const Vector y = vec({-2.0 + 4.0 * rng.uniform()});
    const Vector particle = gradient_estimate(weights, build_observation_terms(*gm, theta, positions, as_state(y)));
    REQUIRE(rel_err(grid_gradient(*gm, theta, as_state(y), s), particle, 1.0) <= 1e-12);
  }
}

TEST_CASE("mean particle estimate agrees with the exact grid value") {
  const auto gm = grid({"phi"}, 5);
  const Vector theta = vec({0.7});
  const Matrix y = grid_data(*gm, theta, 21, 3);
  for (std::size_t n : {1u, 5u, 20u}) {
    diagnostics::BiasStudyOptions opts;
    opts.particles = {400};
    opts.seeds = 40;
    opts.steps = n;
    opts.window = 1;
    const auto result = diagnostics::bias_vs_particles(*gm, {theta, interval(-0.95, 0.95)},
                                                       y.leftCols(static_cast<Eigen::Index>(n) + 1), opts);
    const auto& row = result.rows.front();
    CHECK(row.stderr > 0.0);
    CHECK(row.bias_norm <= 3.0 * row.stderr);
  }
}

TEST_CASE("Kalman gradient matches finite differences") {
  const auto model = make_ar1_model(ar1_layout({"phi", "sigma_x", "sigma_y"}), interval(-14.0, 14.0),
                                    interval(-16.0, 16.0));
  const Vector truth = vec({0.8, 1.0, 0.7});
  const Matrix y = simulate(*model, truth, 500, RngStream(5)).observations;
  const LinearGaussModel lg{ar1_layout({"phi", "sigma_x", "sigma_y"}), 0.0, 2.0};
  for (const Vector& theta : {vec({0.5, 1.2, 0.9}), vec({0.8, 1.0, 0.7}), vec({-0.3, 0.6, 1.5})}) {
    const KalmanResult r = kalman_tangent_gradient(lg, theta, y);
    const Vector fd = fd_gradient(
        [&](const Vector& t) { return kalman_tangent_gradient(lg, t, y).average_log_likelihood; }, theta, 1e-4);
    CHECK(rel_err(r.gradient, fd) <= 1e-7);
  }
  CHECK_THROWS_AS(kalman_tangent_gradient(lg, vec({0.5, 1.0}), y), Error);
  CHECK_THROWS_AS(kalman_tangent_gradient(LinearGaussModel{ar1_layout({"phi"}), 0.0, -5.0}, vec({0.5}),
                                          Matrix::Constant(1, 1, 0.1)),
                  ModelError);
}

TEST_CASE("Kalman score vanishes at the true parameter within its standard error") {
  const auto model = make_ar1_model(ar1_layout({"phi", "sigma_x", "sigma_y"}), interval(-14.0, 14.0),
                                    interval(-16.0, 16.0));
  const Vector truth = vec({0.8, 1.0, 1.0});
  const Matrix y = simulate(*model, truth, 100000, RngStream(77)).observations;
  const double width = 28.0;
  const LinearGaussModel lg{ar1_layout({"phi", "sigma_x", "sigma_y"}), 0.0, width * width / 12.0};
  const KalmanResult r = kalman_tangent_gradient(lg, truth, y, true);
  const double t = static_cast<double>(y.cols());
  for (Eigen::Index k = 0; k < 3; ++k) {
    const Eigen::ArrayXd s = r.step_scores.row(k).transpose().array();
    const double se = std::sqrt((s - s.mean()).square().sum() / (t - 1.0) / t);
    CHECK(std::abs(r.gradient[k]) <= 3.0 * se);
  }
}

TEST_CASE("single-observation Kalman gradient matches the hand formula") {
  const double p0 = 1.7, sy = 0.6, y = 0.9;
  const LinearGaussModel lg{ar1_layout({"sigma_y"}), 0.0, p0};
  const KalmanResult r = kalman_tangent_gradient(lg, vec({sy}), Matrix::Constant(1, 1, y));
  const double s = p0 + sy * sy;
  CHECK(r.average_log_likelihood == doctest::Approx(-0.5 * (std::log(2 * M_PI * s) + y * y / s)).epsilon(1e-14));
  const double hand = -0.5 * (2 * sy / s - y * y * 2 * sy / (s * s));
  CHECK(r.gradient[0] == doctest::Approx(hand).epsilon(1e-14));
}
