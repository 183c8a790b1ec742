#pragma once

#include <span>
#include <vector>

#include "sgma/backbone.hpp"
#include "sgma/tensor.hpp"

namespace sgma {

/// Row-major [classes, d] semantic matrix as a constant tensor, transposed to
/// [d, classes] so that scores come out of a single matmul.
Tensor semantic_columns(const Tensor& semantics);

/// phi = theta W, [N,F] x [F,d] -> [N,d].
Tensor map_features(const Tensor& theta, const Tensor& W);

/// s[n,j] = theta_n W phi(y_j); semantics is [classes, d].
Tensor compatibility(const Tensor& theta, const Tensor& W, const Tensor& semantics);

/// Elementwise sum of per-stream score matrices.
Tensor fuse_scores(std::span<const Tensor> per_stream);

/// Mean negative log-softmax of the labelled class.
Tensor embedding_softmax_loss(const Tensor& fused, std::span<const int> labels);

enum class CctNegatives { hardest, sum };

/// max(0, mrg + |phi^ - C^_y|^2 - |phi^ - C^_k|^2) with k the hardest negative
/// (or summed over all k != y), averaged over the batch. Both phi and the
/// centers are L2-normalized inside the loss.
Tensor class_center_triplet_loss(const Tensor& phi, const Tensor& centers, std::span<const int> labels, double margin,
                                 CctNegatives negatives = CctNegatives::hardest);

struct JointLossWeights {
  double alpha1 = 1.0;
  double alpha2 = 1.0;
  double cct_margin = 0.8;

  void validate() const;
};

/// L_MA + alpha1 L_CLS + alpha2 L_CCT. Undefined terms are skipped, so an
/// ablation can drop a loss by never computing it.
Tensor joint_objective(const Tensor& l_ma, const Tensor& l_cls, const Tensor& l_cct, const JointLossWeights& w);

struct SgdConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double clip_norm = 0.0;  // global gradient-norm cap before weight decay; 0 disables
};

/// Momentum SGD: g += wd * w; v = mu v + g; w -= lr v. With clip_norm > 0 the
/// raw gradients are first rescaled so their global L2 norm is at most clip_norm.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor> params, SgdConfig config);

  /// Throws NonFiniteError before touching any parameter if a gradient is not finite.
  void step();
  void zero_grad();

  double lr() const { return config_.lr; }
  void set_lr(double lr) { config_.lr = lr; }
  const SgdConfig& config() const { return config_; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::vector<double>>& velocity() const { return velocity_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  SgdConfig config_;
};

std::vector<Tensor> parameter_tensors(const ParameterList& params);

}  // namespace sgma
