#include "sgma/embedding.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "sgma/ops.hpp"

namespace sgma {

Tensor semantic_columns(const Tensor& semantics) {
  if (semantics.rank() != 2) throw ShapeError("semantic matrix must be [classes, d], got " + shape_string(semantics.shape()));
  const std::size_t c = semantics.dim(0), d = semantics.dim(1);
  std::vector<double> t(c * d);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < d; ++j) t[j * c + i] = semantics[i * d + j];
  return Tensor::from({d, c}, std::move(t));
}

Tensor map_features(const Tensor& theta, const Tensor& W) {
  if (theta.rank() != 2 || W.rank() != 2 || theta.dim(1) != W.dim(0)) {
    throw ShapeError("map_features: theta " + shape_string(theta.shape()) + " does not chain with W " +
                     shape_string(W.shape()));
  }
  return matmul(theta, W);
}

Tensor compatibility(const Tensor& theta, const Tensor& W, const Tensor& semantics) {
  if (semantics.rank() != 2 || W.rank() != 2 || semantics.dim(1) != W.dim(1)) {
    throw ShapeError("compatibility: W " + shape_string(W.shape()) + " does not chain with semantics " +
                     shape_string(semantics.shape()));
  }
  return matmul(map_features(theta, W), semantic_columns(semantics));
}

Tensor fuse_scores(std::span<const Tensor> per_stream) {
  if (per_stream.empty()) throw std::invalid_argument("fuse_scores: no streams");
  return add_n(per_stream);
}

Tensor embedding_softmax_loss(const Tensor& fused, std::span<const int> labels) {
  return softmax_cross_entropy(fused, labels);
}

namespace {

// Hinge over L2-normalized rows; gradients w.r.t. the normalized inputs.
Tensor cct_normalized(const Tensor& phi, const Tensor& centers, std::span<const int> labels, double margin,
                      CctNegatives negatives) {
  const std::size_t n = phi.dim(0), d = phi.dim(1), k = centers.dim(0);
  auto dist = [&](std::size_t s, std::size_t c) {
    double acc = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = phi[s * d + j] - centers[c * d + j];
      acc += diff * diff;
    }
    return acc;
  };
  // Active (sample, negative) pairs.
  std::vector<std::pair<std::size_t, std::size_t>> active;
  double total = 0;
  for (std::size_t s = 0; s < n; ++s) {
    const auto y = static_cast<std::size_t>(labels[s]);
    const double dy = dist(s, y);
    if (negatives == CctNegatives::hardest) {
      std::size_t best = k;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        if (c == y) continue;
        const double dc = dist(s, c);
        if (dc < bd) {
          bd = dc;
          best = c;
        }
      }
      const double h = margin + dy - bd;
      if (h > 0) {
        total += h;
        active.emplace_back(s, best);
      }
    } else {
      for (std::size_t c = 0; c < k; ++c) {
        if (c == y) continue;
        const double h = margin + dy - dist(s, c);
        if (h > 0) {
          total += h;
          active.emplace_back(s, c);
        }
      }
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  Tensor out = Tensor::full({}, total * inv_n);
  detail::require_finite(out, "class_center_triplet_loss");
  if (detail::should_record({&phi, &centers})) {
    std::vector<int> lab(labels.begin(), labels.end());
    detail::record("class_center_triplet_loss", out, [phi, centers, lab, active, out, inv_n, d]() {
      const double g = out.grad()[0] * inv_n;
      for (const auto& [s, c] : active) {
        const auto y = static_cast<std::size_t>(lab[s]);
        for (std::size_t j = 0; j < d; ++j) {
          const double p = phi[s * d + j], cy = centers[y * d + j], ck = centers[c * d + j];
          if (phi.requires_grad()) phi.mutable_grad()[s * d + j] += g * 2.0 * (ck - cy);
          if (centers.requires_grad()) {
            centers.mutable_grad()[y * d + j] -= g * 2.0 * (p - cy);
            centers.mutable_grad()[c * d + j] += g * 2.0 * (p - ck);
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor class_center_triplet_loss(const Tensor& phi, const Tensor& centers, std::span<const int> labels, double margin,
                                 CctNegatives negatives) {
  if (phi.rank() != 2 || centers.rank() != 2 || phi.dim(1) != centers.dim(1)) {
    throw ShapeError("class_center_triplet_loss: phi " + shape_string(phi.shape()) + " and centers " +
                     shape_string(centers.shape()) + " disagree");
  }
  if (centers.dim(0) < 2) throw std::invalid_argument("class_center_triplet_loss: needs at least two seen classes");
  if (labels.size() != phi.dim(0)) throw ShapeError("class_center_triplet_loss: one label per sample is required");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= centers.dim(0)) {
      throw std::out_of_range("class_center_triplet_loss: label " + std::to_string(y) + " out of range");
    }
  }
  return cct_normalized(l2_normalize(phi), l2_normalize(centers), labels, margin, negatives);
}

void JointLossWeights::validate() const {
  if (alpha1 < 0 || alpha2 < 0) throw std::invalid_argument("joint loss weights must be >= 0");
  if (cct_margin < 0) throw std::invalid_argument("cct margin must be >= 0");
}

Tensor joint_objective(const Tensor& l_ma, const Tensor& l_cls, const Tensor& l_cct, const JointLossWeights& w) {
  std::vector<Tensor> terms;
  if (l_ma.defined()) terms.push_back(l_ma);
  if (l_cls.defined()) terms.push_back(w.alpha1 == 1.0 ? l_cls : scale(l_cls, w.alpha1));
  if (l_cct.defined()) terms.push_back(w.alpha2 == 1.0 ? l_cct : scale(l_cct, w.alpha2));
  if (terms.empty()) throw std::invalid_argument("joint_objective: no loss terms");
  return terms.size() == 1 ? terms.front() : add_n(terms);
}

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, SgdConfig config)
    : params_(std::move(params)), config_(config) {
  for (auto& p : params_) {
    if (!p.requires_grad()) throw std::invalid_argument("SgdOptimizer: parameter does not track gradients");
    velocity_.emplace_back(p.numel(), 0.0);
  }
}

void SgdOptimizer::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    for (double g : params_[i].grad()) {
      if (!std::isfinite(g)) {
        throw NonFiniteError("sgd step aborted: non-finite gradient in parameter " + std::to_string(i));
      }
    }
  }
  double factor = 1.0;
  if (config_.clip_norm > 0) {
    double sq = 0;
    for (const auto& p : params_)
      for (double g : p.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) factor = config_.clip_norm / norm;
  }
  const double lr = config_.lr, mu = config_.momentum, wd = config_.weight_decay;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i].mutable_data();
    auto g = params_[i].grad();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = mu * v[j] + factor * g[j] + wd * w[j];
      w[j] -= lr * v[j];
    }
  }
}

void SgdOptimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::vector<Tensor> parameter_tensors(const ParameterList& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.value);
  return out;
}

}  // namespace sgma
