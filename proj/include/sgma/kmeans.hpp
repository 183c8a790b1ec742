#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

namespace sgma {

template <typename Scalar>
struct KMeansResult {
  std::vector<int> labels;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> centers;  // k x dim
  Scalar inertia = 0;
};

/// Number of distinct rows (exact comparison).
template <typename Derived>
int count_distinct_rows(const Eigen::MatrixBase<Derived>& points) {
  int distinct = 0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    bool seen = false;
    for (Eigen::Index j = 0; j < i && !seen; ++j) seen = (points.row(i) == points.row(j));
    if (!seen) ++distinct;
  }
  return distinct;
}

/// Lloyd's algorithm with k-means++ seeding, restarted `restarts` times from
/// one seeded generator; the lowest-inertia run wins (ties keep the earlier run).
///
/// Each restart stops after `max_iterations` or when assignments stop changing.
/// Empty clusters are re-seeded with the point farthest from its center.
template <typename Scalar>
KMeansResult<Scalar> kmeans(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& points, int k, std::uint64_t seed,
                            int max_iterations = 100, int restarts = 8) {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const Eigen::Index n = points.rows();
  if (k < 1) throw std::invalid_argument("kmeans: k must be >= 1");
  if (n < k) throw std::invalid_argument("kmeans: fewer points than clusters");
  if (count_distinct_rows(points) < k) {
    throw std::invalid_argument("kmeans: only " + std::to_string(count_distinct_rows(points)) +
                                " distinct points for " + std::to_string(k) +
                                " clusters; try a different seed or a larger init batch");
  }

  std::mt19937_64 rng(seed);
  KMeansResult<Scalar> best;
  best.inertia = std::numeric_limits<Scalar>::infinity();

  for (int run = 0; run < restarts; ++run) {
    Matrix centers(k, points.cols());
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    centers.row(0) = points.row(pick(rng));
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> d2(n);
    for (int c = 1; c < k; ++c) {
      for (Eigen::Index i = 0; i < n; ++i) {
        Scalar m = std::numeric_limits<Scalar>::infinity();
        for (int j = 0; j < c; ++j) m = std::min(m, (points.row(i) - centers.row(j)).squaredNorm());
        d2(i) = m;
      }
      std::uniform_real_distribution<double> u(0.0, static_cast<double>(d2.sum()));
      double target = u(rng);
      Eigen::Index chosen = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        target -= static_cast<double>(d2(i));
        if (target < 0 && d2(i) > 0) {
          chosen = i;
          break;
        }
      }
      centers.row(c) = points.row(chosen);
    }

    std::vector<int> labels(static_cast<std::size_t>(n), -1);
    for (int iter = 0; iter < max_iterations; ++iter) {
      bool changed = false;
      for (Eigen::Index i = 0; i < n; ++i) {
        int arg = 0;
        Scalar m = std::numeric_limits<Scalar>::infinity();
        for (int c = 0; c < k; ++c) {
          const Scalar d = (points.row(i) - centers.row(c)).squaredNorm();
          if (d < m) {
            m = d;
            arg = c;
          }
        }
        if (labels[static_cast<std::size_t>(i)] != arg) {
          labels[static_cast<std::size_t>(i)] = arg;
          changed = true;
        }
      }
      Matrix sums = Matrix::Zero(k, points.cols());
      std::vector<int> counts(static_cast<std::size_t>(k), 0);
      for (Eigen::Index i = 0; i < n; ++i) {
        sums.row(labels[static_cast<std::size_t>(i)]) += points.row(i);
        ++counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
      }
      for (int c = 0; c < k; ++c) {
        if (counts[static_cast<std::size_t>(c)] > 0) {
          centers.row(c) = sums.row(c) / static_cast<Scalar>(counts[static_cast<std::size_t>(c)]);
          continue;
        }
        Eigen::Index far = 0;
        Scalar fd = -1;
        for (Eigen::Index i = 0; i < n; ++i) {
          const Scalar d = (points.row(i) - centers.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
          if (d > fd) {
            fd = d;
            far = i;
          }
        }
        centers.row(c) = points.row(far);
        labels[static_cast<std::size_t>(far)] = c;
        changed = true;
      }
      if (!changed) break;
    }

    Scalar inertia = 0;
    for (Eigen::Index i = 0; i < n; ++i) inertia += (points.row(i) - centers.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
    if (inertia < best.inertia) {
      best.labels = labels;
      best.centers = centers;
      best.inertia = inertia;
    }
  }
  return best;
}

}  // namespace sgma
