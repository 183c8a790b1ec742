#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sgma/tensor.hpp"

namespace sgma {

/// A named trainable tensor; the name doubles as the checkpoint file stem.
struct NamedParameter {
  std::string name;
  Tensor value;
};

using ParameterList = std::vector<NamedParameter>;

/// Stack of (conv3x3 -> relu -> 2x2 average downsample) blocks.
struct BackboneConfig {
  int input_size = 64;
  int in_channels = 3;
  std::vector<int> channel_widths{16, 32, 32};

  int feature_dim() const { return channel_widths.empty() ? 0 : channel_widths.back(); }
  int final_extent() const;
  /// Throws std::invalid_argument when the configuration cannot host `num_parts` attention parts.
  void validate(int num_parts = 2) const;
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(BackboneConfig config, std::vector<Tensor> kernels, std::vector<Tensor> biases);

  const BackboneConfig& config() const { return config_; }

  /// [N,3,S,S] -> [N,C,S/2^B,S/2^B]. Without `final_relu` the last block
  /// skips its activation, so the maps can take negative values.
  Tensor forward_features(const Tensor& images, bool final_relu = true) const;
  /// Global-average-pooled features, [N,C].
  Tensor forward_vector(const Tensor& images) const;

  ParameterList parameters(const std::string& prefix) const;
  const std::vector<Tensor>& kernels() const { return kernels_; }
  const std::vector<Tensor>& biases() const { return biases_; }

 private:
  BackboneConfig config_;
  std::vector<Tensor> kernels_;
  std::vector<Tensor> biases_;
};

/// Kaiming-normal kernels (std = sqrt(2 / fan_in)) and zero biases.
Backbone init_backbone(const BackboneConfig& config, std::uint64_t seed);

}  // namespace sgma
