#include "sgma/backbone.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "sgma/ops.hpp"

namespace sgma {

int BackboneConfig::final_extent() const {
  int extent = input_size;
  for (std::size_t i = 0; i < channel_widths.size(); ++i) extent /= 2;
  return extent;
}

void BackboneConfig::validate(int num_parts) const {
  if (input_size < 1 || in_channels < 1) throw std::invalid_argument("backbone: input size and channels must be positive");
  if (channel_widths.empty()) throw std::invalid_argument("backbone: at least one conv block is required");
  for (int w : channel_widths) {
    if (w < 1) throw std::invalid_argument("backbone: channel widths must be positive");
  }
  if (input_size % (1 << channel_widths.size()) != 0) {
    throw std::invalid_argument("backbone: input size " + std::to_string(input_size) + " is not divisible by 2^" +
                                std::to_string(channel_widths.size()));
  }
  if (final_extent() < 4) {
    throw std::invalid_argument("backbone: final feature maps are " + std::to_string(final_extent()) +
                                " pixels wide, need at least 4");
  }
  if (feature_dim() < num_parts * 4) {
    throw std::invalid_argument("backbone: feature_dim " + std::to_string(feature_dim()) + " is below 4 x " +
                                std::to_string(num_parts) + " parts");
  }
}

Backbone::Backbone(BackboneConfig config, std::vector<Tensor> kernels, std::vector<Tensor> biases)
    : config_(std::move(config)), kernels_(std::move(kernels)), biases_(std::move(biases)) {
  if (kernels_.size() != config_.channel_widths.size() || biases_.size() != kernels_.size()) {
    throw std::invalid_argument("backbone: parameter count does not match the configured blocks");
  }
  int cin = config_.in_channels;
  for (std::size_t b = 0; b < kernels_.size(); ++b) {
    const auto cout = static_cast<std::size_t>(config_.channel_widths[b]);
    if (kernels_[b].shape() != Shape{cout, static_cast<std::size_t>(cin), 3, 3} || biases_[b].shape() != Shape{cout}) {
      throw ShapeError("backbone: block " + std::to_string(b) + " parameters have shapes " +
                       shape_string(kernels_[b].shape()) + " / " + shape_string(biases_[b].shape()));
    }
    cin = config_.channel_widths[b];
  }
}

Tensor Backbone::forward_features(const Tensor& images, bool final_relu) const {
  if (images.rank() != 4 || images.dim(1) != static_cast<std::size_t>(config_.in_channels) ||
      images.dim(2) != static_cast<std::size_t>(config_.input_size) ||
      images.dim(3) != static_cast<std::size_t>(config_.input_size)) {
    throw ShapeError("backbone expects images of shape [N," + std::to_string(config_.in_channels) + "," +
                     std::to_string(config_.input_size) + "," + std::to_string(config_.input_size) + "], got " +
                     shape_string(images.shape()));
  }
  Tensor x = images;
  for (std::size_t b = 0; b < kernels_.size(); ++b) {
    Tensor pre = add_channel_bias(conv2d(x, kernels_[b], 1, 1), biases_[b]);
    x = avg_pool2(final_relu || b + 1 < kernels_.size() ? relu(pre) : pre);
  }
  return x;
}

Tensor Backbone::forward_vector(const Tensor& images) const { return global_avg_pool(forward_features(images)); }

ParameterList Backbone::parameters(const std::string& prefix) const {
  ParameterList out;
  for (std::size_t b = 0; b < kernels_.size(); ++b) {
    out.push_back({prefix + ".conv" + std::to_string(b) + ".kernel", kernels_[b]});
    out.push_back({prefix + ".conv" + std::to_string(b) + ".bias", biases_[b]});
  }
  return out;
}

Backbone init_backbone(const BackboneConfig& config, std::uint64_t seed) {
  if (config.channel_widths.empty() || config.in_channels < 1) throw std::invalid_argument("backbone: invalid config");
  for (int w : config.channel_widths) {
    if (w < 1) throw std::invalid_argument("backbone: channel widths must be positive");
  }
  std::mt19937_64 rng(seed);
  std::vector<Tensor> kernels, biases;
  int cin = config.in_channels;
  for (int cout : config.channel_widths) {
    const double stddev = std::sqrt(2.0 / (cin * 9.0));
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> k(static_cast<std::size_t>(cout * cin * 9));
    for (auto& v : k) v = dist(rng);
    kernels.push_back(Tensor::parameter({static_cast<std::size_t>(cout), static_cast<std::size_t>(cin), 3, 3}, std::move(k)));
    biases.push_back(Tensor::parameter({static_cast<std::size_t>(cout)}, std::vector<double>(static_cast<std::size_t>(cout), 0.0)));
    cin = cout;
  }
  return Backbone(config, std::move(kernels), std::move(biases));
}

}  // namespace sgma
