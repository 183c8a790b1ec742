#include <cmath>
#include <random>

#include "doctest.h"
#include "sgma/inference.hpp"

using namespace sgma;
using Matd = Mat<double>;
using Vecd = Vec<double>;

namespace {

Matd random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Plain gradient descent on |U - W S|^2 + lambda |W|^2 until the gradient vanishes.
Matd descend_ridge(const Matd& U, const Matd& S, double lambda) {
  Matd W = Matd::Zero(U.rows(), S.rows());
  const double L = 2.0 * ((S * S.transpose()).eigenvalues().real().maxCoeff() + lambda);
  for (int it = 0; it < 2000000; ++it) {
    const Matd g = -2.0 * (U - W * S) * S.transpose() + 2.0 * lambda * W;
    if (g.norm() < 1e-13) break;
    W -= g / L;
  }
  return W;
}

}  // namespace

TEST_CASE("ridge closed-form fixtures") {
  Matd U = random_matrix(2, 3, 1);
  Matd W = solve_ridge<double>(U, Matd::Identity(3, 3), 0.0);
  CHECK((W - U).cwiseAbs().maxCoeff() <= 1e-14);

  Matd S = random_matrix(3, 4, 2);
  Matd big = solve_ridge<double>(random_matrix(2, 4, 3), S, 1e12);
  CHECK(big.cwiseAbs().maxCoeff() < 1e-6);

  // Rank-deficient seen matrix at lambda = 0.
  Matd dup(2, 3);
  dup << 1, 2, 3, 2, 4, 6;
  CHECK_THROWS_WITH_AS(solve_ridge<double>(random_matrix(1, 3, 4), dup, 0.0), doctest::Contains("lambda > 0"),
                       SingularSystemError);
  CHECK_NOTHROW(solve_ridge<double>(random_matrix(1, 3, 4), dup, 0.1));

  CHECK_THROWS_AS(solve_ridge<double>(random_matrix(2, 3, 5), S, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(solve_ridge<double>(random_matrix(2, 4, 5), S, -1.0), std::invalid_argument);
  Matd zero_row = random_matrix(2, 4, 6);
  zero_row.row(1).setZero();
  CHECK_THROWS_AS(solve_ridge<double>(zero_row, S, 0.1), std::invalid_argument);
}

TEST_CASE("ridge matches an iterative minimizer") {
  Matd S = random_matrix(3, 4, 7), U = random_matrix(2, 4, 8);
  Matd W = solve_ridge<double>(U, S, 0.1);
  Matd oracle = descend_ridge(U, S, 0.1);
  CHECK((W - oracle).cwiseAbs().maxCoeff() <= 1e-6);
  CHECK(ridge_residual<double>(W, U, S, 0.1) <= 1e-8);
}

TEST_CASE("ridge optimality, shrinkage and self-reconstruction") {
  Matd S = random_matrix(4, 6, 9), U = random_matrix(3, 6, 10);
  const double lambda = 0.5;
  Matd W = solve_ridge<double>(U, S, lambda);
  const double f0 = ridge_objective<double>(W, U, S, lambda);
  for (Eigen::Index i = 0; i < W.size(); ++i) {
    for (double d : {1e-3, -1e-3}) {
      Matd P = W;
      P.data()[i] += d;
      CHECK(ridge_objective<double>(P, U, S, lambda) > f0);
    }
  }
  double prev = std::numeric_limits<double>::infinity();
  for (double l : {0.0, 0.01, 0.1, 1.0, 10.0, 100.0}) {
    const double n = solve_ridge<double>(U, S, l).norm();
    CHECK(n <= prev);
    prev = n;
  }
  for (double l : {1e-9, 0.0}) {
    Matd I = solve_ridge<double>(S, S, l);
    CHECK((I - Matd::Identity(4, 4)).cwiseAbs().maxCoeff() <= 1e-6);
  }
}

TEST_CASE("ridge works on single precision") {
  Eigen::MatrixXf S = random_matrix(3, 5, 11).cast<float>(), U = random_matrix(2, 5, 12).cast<float>();
  Eigen::MatrixXf W = solve_ridge<float>(U, S, 1.0f);
  Matd Wd = solve_ridge<double>(U.cast<double>(), S.cast<double>(), 1.0);
  CHECK((W.cast<double>() - Wd).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("prototypes") {
  Matd f(3, 3);
  f << 1, 2, 3, 4, 5, 6, -1, 0, 2;
  Matd one = seen_prototypes<double>(f, {0, 1, 2}, 3);
  CHECK(one == f);
  Matd pair(2, 2);
  pair << 1, -2, -1, 2;
  CHECK(seen_prototypes<double>(pair, {0, 0}, 1).cwiseAbs().maxCoeff() == 0.0);
  Matd mean = seen_prototypes<double>(f, {0, 0, 0}, 1);
  CHECK(mean(0, 0) == doctest::Approx(4.0 / 3.0));
  CHECK(mean(0, 1) == doctest::Approx(7.0 / 3.0));
  CHECK(mean(0, 2) == doctest::Approx(11.0 / 3.0));
  CHECK_THROWS_AS(seen_prototypes<double>(f, {0, 0, 0}, 2), std::invalid_argument);
  CHECK_THROWS_AS(seen_prototypes<double>(f, {0, 5, 0}, 2), std::out_of_range);

  Matd P(3, 4);
  P << 1, 2, 3, 4, 0, 1, 0, 1, 2, 0, 2, 0;
  CHECK(unseen_prototypes<double>(Matd::Identity(3, 3), P) == P);
  Matd sel = Matd::Zero(1, 3);
  sel(0, 2) = 1;
  CHECK(unseen_prototypes<double>(sel, P) == P.row(2));
  Matd W(2, 3);
  W << 1, 0, 2, -1, 1, 0.5;
  Matd expected(2, 4);
  expected << 5, 2, 7, 4, 0, -1, -2, -3;
  CHECK((unseen_prototypes<double>(W, P) - expected).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("predict") {
  Matd protos(3, 3);
  protos << 1, 0, 0, 0, 1, 0, 0, 0, 1;
  Vecd s(3);
  s << 0.2, 0.9, 0.5;
  Vecd phi(3);
  phi << 0, 0, 4;
  CHECK(predict<double>(s, phi, protos, 0.0) == 1);
  Vecd flat = Vecd::Constant(3, 0.3);
  CHECK(predict<double>(flat, phi, protos, 0.5) == 2);

  // Three-class fixture: combined scores by hand are 0.2 + 0.5*0.6, 0.9 + 0.5*0, 0.5 + 0.5*0.8.
  Vecd v(3);
  v << 0.6, 0.0, 0.8;
  CHECK(predict<double>(s, v, protos, 0.5) == 1);
  CHECK(predict<double>(s, v, protos, 1.0) == 2);  // 0.8, 0.9, 1.3

  // Ties go to the lowest index.
  CHECK(predict<double>(Vecd::Zero(3), Vecd::Zero(3), protos, 1.0) == 0);

  // Invariances: shift of all scores; beta scaling equals scaling the similarity term.
  Matd R(4, 5);
  R.setRandom();
  Vecd rs = Vecd::Random(4), rp = Vecd::Random(5);
  const int base = predict<double>(rs, rp, R, 0.7);
  CHECK(predict<double>((rs.array() + 3.0).matrix(), rp, R, 0.7) == base);
  const Vecd a = fused_prediction_scores<double>(rs, rp, R, 1.4);
  const Vecd b = fused_prediction_scores<double>(rs, rp, R, 0.7);
  CHECK(((a - rs) - 2.0 * (b - rs)).cwiseAbs().maxCoeff() <= 1e-14);
  CHECK_THROWS(predict<double>(Vecd::Zero(2), rp, R, 1.0));
}

TEST_CASE("generalized prediction over the joint label space") {
  Matd seen(2, 2), unseen(2, 2);
  seen << 1, 0, 0, 1;
  unseen << -1, 0, 0.6, 0.8;
  Matd all = joint_prototypes<double>(seen, unseen);
  CHECK(all.rows() == 4);
  Vecd phi(2);
  phi << 0.3, 0.9;
  Vecd scores(4);
  scores << 0.1, 0.2, 0.4, 0.15;
  for (double beta : {0.0, 0.5, 1.0, 3.0}) {
    int best = 0;
    double bv = -1e300;
    for (int y = 0; y < 4; ++y) {
      const double cosv = all.row(y).dot(phi) / (all.row(y).norm() * phi.norm());
      const double v = scores(y) + beta * cosv;
      if (v > bv) {
        bv = v;
        best = y;
      }
    }
    CHECK(gzsl_predict<double>(scores, phi, all, beta) == best);
  }
  CHECK(gzsl_predict<double>(scores, phi, all, 0.0) == 2);
  // Dropping unseen classes reduces to seen classification.
  CHECK(gzsl_predict<double>(scores.head(2), phi, seen, 1.0) == predict<double>(scores.head(2), phi, seen, 1.0));

  Matd batch_s(2, 4), batch_f(2, 2);
  batch_s << scores.transpose(), scores.transpose();
  batch_f << phi.transpose(), -phi.transpose();
  auto preds = predict_batch<double>(batch_s, batch_f, all, 1.0);
  CHECK(preds[0] == gzsl_predict<double>(scores, phi, all, 1.0));
  CHECK(preds[1] == gzsl_predict<double>(scores, Vecd(-phi), all, 1.0));
}
