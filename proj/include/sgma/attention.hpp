#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "sgma/backbone.hpp"
#include "sgma/tensor.hpp"

namespace sgma {

struct MultiAttentionConfig {
  int num_parts = 2;
  double lambda = 1.0;      // weight of the diversity term
  double margin = 0.2;      // diversity hinge margin
  double sigma = 0.0;       // Gaussian target width in map cells; <= 0 means side / 8
  int hidden = 0;           // head hidden width; <= 0 means C / 2
  bool mean_over_channels = false;

  void validate() const;
  double sigma_for(std::size_t map_side) const;
  int hidden_for(int channels) const;
};

/// Per-part channel gate a_i = sigmoid(W2 relu(W1 p)).
struct AttentionHead {
  Tensor w1;  // [hidden, C]
  Tensor w2;  // [C, hidden]
  int part_index = 0;

  ParameterList parameters(const std::string& prefix) const;
};

AttentionHead init_attention_head(int channels, int hidden, int part_index, std::uint64_t seed);

/// Spatial mean per channel: [N,C,H,W] -> [N,C].
Tensor channel_descriptor(const Tensor& features);

/// [N,C] descriptor -> [N,C] channel weights in (0,1).
Tensor channel_attention(const AttentionHead& head, const Tensor& descriptor);

/// sigmoid(sum_c a[n,c] * features[n,c,:,:]) -> [N,H,W]. With `mean_over_channels`
/// the pre-activation is divided by C.
Tensor attention_map(const Tensor& features, const Tensor& channel_weights, bool mean_over_channels = false);

/// Pre-sigmoid channel-weighted sum, [N,H,W].
Tensor channel_weighted_sum(const Tensor& features, const Tensor& channel_weights);

struct ChannelClusters {
  std::vector<int> labels;                        // cluster per channel
  std::vector<std::vector<double>> init_targets;  // [part][channel] indicator
  Eigen::MatrixXd centers;                        // part x 2, (row, col)
};

/// Per-channel argmax position (first row-major occurrence), averaged over the
/// batch. Returns C x 2 rows of (row, col).
Eigen::MatrixXd channel_peak_positions(const Tensor& features);

/// k-means over channel peak positions. Clusters are relabelled by ascending
/// (col, row) of their centers so that part indices are stable across seeds.
ChannelClusters init_channel_clusters(const Eigen::MatrixXd& peak_positions, int num_parts, std::uint64_t seed);

/// First row-major argmax of each [H,W] slice of an [N,H,W] map.
std::vector<std::pair<int, int>> map_peaks(const Tensor& maps);

/// exp(-|z - peak|^2 / (2 sigma^2)) per sample; a constant (never tracks gradients).
Tensor gaussian_target(const Tensor& maps, double sigma);

/// Mean over samples and positions of (m - target)^2.
Tensor compactness_loss(const Tensor& maps, const Tensor& target);

/// Batch mean of sum_z m_i^z * max(0, max_{k != i} m_k^z - margin).
Tensor diversity_loss(const std::vector<Tensor>& maps, std::size_t part, double margin);

namespace detail {
// Negative control for the gradient-check suite: while set, the diversity
// backward pass propagates the negated gradient.
extern thread_local bool flip_diversity_backward;
}  // namespace detail

/// Sum over parts of compactness + lambda * diversity; diversity is skipped
/// when only one part exists.
Tensor multi_attention_loss(const std::vector<Tensor>& maps, const MultiAttentionConfig& cfg);

/// mean_z min_i m_i / mean_z max_i m_i over all samples; 1 for identical maps.
double attention_overlap(const std::vector<Tensor>& maps);

/// Writes `sample{idx}_part{i}.pgm` for every sample of every part map.
void export_attention(const std::filesystem::path& dir, const std::vector<Tensor>& maps, std::size_t first_index = 0);

}  // namespace sgma
