#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgma {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct InferenceConfig {
  double ridge_lambda = 1.0;
  double beta = 1.0;

  void validate() const {
    if (ridge_lambda < 0) throw std::invalid_argument("ridge lambda must be >= 0");
    if (beta < 0) throw std::invalid_argument("fusion beta must be >= 0");
  }
};

class SingularSystemError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
void require_semantic_matrix(const Mat<Scalar>& m, const char* role) {
  if (m.rows() == 0 || m.cols() == 0) throw std::invalid_argument(std::string(role) + " semantic matrix is empty");
  if (!m.allFinite()) throw std::invalid_argument(std::string(role) + " semantic matrix has non-finite entries");
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (m.row(i).squaredNorm() == Scalar(0)) {
      throw std::invalid_argument(std::string(role) + " semantic matrix row " + std::to_string(i) + " is all zero");
    }
  }
}

/// Relative residual of the normal equations W (S S^T + lambda I) = U S^T.
template <typename Scalar>
Scalar ridge_residual(const Mat<Scalar>& W, const Mat<Scalar>& unseen, const Mat<Scalar>& seen, Scalar lambda) {
  Mat<Scalar> gram = seen * seen.transpose();
  gram.diagonal().array() += lambda;
  const Mat<Scalar> rhs = unseen * seen.transpose();
  const Scalar scale = W.norm() * gram.norm() + rhs.norm();
  return scale > 0 ? (W * gram - rhs).norm() / scale : Scalar(0);
}

/// Minimizer of |U - W S|^2 + lambda |W|^2, W = U S^T (S S^T + lambda I)^{-1},
/// through an LDLT factorization of the symmetric system.
template <typename Scalar>
Mat<Scalar> solve_ridge(const Mat<Scalar>& unseen, const Mat<Scalar>& seen, Scalar lambda) {
  require_semantic_matrix(unseen, "unseen");
  require_semantic_matrix(seen, "seen");
  if (unseen.cols() != seen.cols()) {
    throw std::invalid_argument("solve_ridge: semantic dimensions differ (" + std::to_string(unseen.cols()) + " vs " +
                                std::to_string(seen.cols()) + ")");
  }
  if (!(lambda >= 0)) throw std::invalid_argument("solve_ridge: lambda must be >= 0");
  Mat<Scalar> gram = seen * seen.transpose();
  gram.diagonal().array() += lambda;
  Eigen::LDLT<Mat<Scalar>> ldlt(gram);
  const Scalar tiny = Scalar(1e3) * Eigen::NumTraits<Scalar>::epsilon();
  // LDLT solves treat zero pivots as a pseudo-inverse, so its rcond estimate
  // can look healthy on an exactly singular system; check the pivots too.
  const auto pivots = ldlt.vectorD().cwiseAbs();
  const bool degenerate_pivot = !(pivots.minCoeff() > tiny * pivots.maxCoeff());
  if (ldlt.info() != Eigen::Success || degenerate_pivot || !(ldlt.rcond() > tiny) || !ldlt.isPositive()) {
    throw SingularSystemError("solve_ridge: seen Gram matrix is singular or ill-conditioned (rcond " +
                              std::to_string(static_cast<double>(ldlt.rcond())) + "); use a ridge lambda > 0");
  }
  const Mat<Scalar> W = ldlt.solve(seen * unseen.transpose()).transpose();
  if (!W.allFinite()) throw SingularSystemError("solve_ridge: non-finite solution; use a larger ridge lambda");
  const Scalar res = ridge_residual<Scalar>(W, unseen, seen, lambda);
  const Scalar tolerance = std::max(Scalar(1e-8), tiny);
  if (res > tolerance) {
    throw SingularSystemError("solve_ridge: normal-equation residual " + std::to_string(static_cast<double>(res)) +
                              " exceeds tolerance; use a larger ridge lambda");
  }
  return W;
}

/// |U - W S|_F^2 + lambda |W|_F^2
template <typename Scalar>
Scalar ridge_objective(const Mat<Scalar>& W, const Mat<Scalar>& unseen, const Mat<Scalar>& seen, Scalar lambda) {
  return (unseen - W * seen).squaredNorm() + lambda * W.squaredNorm();
}

/// Per-class arithmetic mean of feature rows; labels index rows of the result.
template <typename Scalar>
Mat<Scalar> seen_prototypes(const Mat<Scalar>& features, const std::vector<int>& labels, int num_classes) {
  if (static_cast<std::size_t>(features.rows()) != labels.size()) {
    throw std::invalid_argument("seen_prototypes: one label per feature row is required");
  }
  Mat<Scalar> protos = Mat<Scalar>::Zero(num_classes, features.cols());
  std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= num_classes) throw std::out_of_range("seen_prototypes: label " + std::to_string(y) + " out of range");
    protos.row(y) += features.row(static_cast<Eigen::Index>(i));
    ++counts[static_cast<std::size_t>(y)];
  }
  for (int c = 0; c < num_classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) {
      throw std::invalid_argument("seen_prototypes: class " + std::to_string(c) + " has no features");
    }
    protos.row(c) /= static_cast<Scalar>(counts[static_cast<std::size_t>(c)]);
  }
  return protos;
}

template <typename Scalar>
Mat<Scalar> unseen_prototypes(const Mat<Scalar>& W, const Mat<Scalar>& seen_protos) {
  if (W.cols() != seen_protos.rows()) throw std::invalid_argument("unseen_prototypes: W columns must match seen classes");
  return W * seen_protos;
}

/// Row-wise L2 normalization; zero rows stay zero.
template <typename Scalar>
Mat<Scalar> normalize_rows(const Mat<Scalar>& m) {
  Mat<Scalar> out = m;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const Scalar n = out.row(i).norm();
    if (n > 0) out.row(i) /= n;
  }
  return out;
}

/// Combined score s_y + beta * cos(phi, proto_y) for every class.
template <typename Scalar>
Vec<Scalar> fused_prediction_scores(const Vec<Scalar>& scores, const Vec<Scalar>& phi_cct, const Mat<Scalar>& protos,
                                    Scalar beta) {
  if (scores.size() != protos.rows() || phi_cct.size() != protos.cols()) {
    throw std::invalid_argument("predict: scores, feature and prototypes disagree in size");
  }
  if (beta == Scalar(0)) return scores;
  const Scalar n = phi_cct.norm();
  const Vec<Scalar> unit = n > 0 ? Vec<Scalar>(phi_cct / n) : phi_cct;
  return scores + beta * (normalize_rows<Scalar>(protos) * unit);
}

/// argmax_y of the combined score; the first maximum wins on ties.
template <typename Scalar>
int predict(const Vec<Scalar>& scores, const Vec<Scalar>& phi_cct, const Mat<Scalar>& protos, Scalar beta) {
  const Vec<Scalar> combined = fused_prediction_scores<Scalar>(scores, phi_cct, protos, beta);
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < combined.size(); ++i)
    if (combined(i) > combined(best)) best = i;
  return static_cast<int>(best);
}

/// Stacks seen rows above unseen rows: the joint label space lists seen classes first.
template <typename Scalar>
Mat<Scalar> joint_prototypes(const Mat<Scalar>& seen_protos, const Mat<Scalar>& unseen_protos) {
  if (seen_protos.cols() != unseen_protos.cols()) throw std::invalid_argument("joint_prototypes: feature dims differ");
  Mat<Scalar> all(seen_protos.rows() + unseen_protos.rows(), seen_protos.cols());
  all << seen_protos, unseen_protos;
  return all;
}

/// Same rule as predict over seen + unseen classes; returns a joint index.
template <typename Scalar>
int gzsl_predict(const Vec<Scalar>& scores_all, const Vec<Scalar>& phi_cct, const Mat<Scalar>& all_protos, Scalar beta) {
  return predict<Scalar>(scores_all, phi_cct, all_protos, beta);
}

/// Row-wise predict over a batch: scores [N,C], features [N,D].
template <typename Scalar>
std::vector<int> predict_batch(const Mat<Scalar>& scores, const Mat<Scalar>& phi_cct, const Mat<Scalar>& protos,
                               Scalar beta) {
  if (scores.rows() != phi_cct.rows()) throw std::invalid_argument("predict_batch: row counts differ");
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    out.push_back(predict<Scalar>(scores.row(i).transpose(), phi_cct.row(i).transpose(), protos, beta));
  }
  return out;
}

}  // namespace sgma
