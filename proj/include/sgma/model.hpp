#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sgma/attention.hpp"
#include "sgma/backbone.hpp"
#include "sgma/cropping.hpp"
#include "sgma/embedding.hpp"

namespace sgma {

/// Architecture and loss switches of the full pipeline. The ablations of the
/// CLI are expressed as changes to these fields.
struct ModelConfig {
  int image_size = 64;  // attention stream input
  int part_size = 32;   // embedding stream input
  std::vector<int> attention_widths{8, 16, 16};
  std::vector<int> stream_widths{8, 16, 16};
  // Pipeline defaults differ from the bare attention module: channel-mean
  // pre-activation and a diversity weight of 1/|Z| for the 8x8 map.
  MultiAttentionConfig attention{.num_parts = 2, .lambda = 1.0 / 64.0, .margin = 0.2, .mean_over_channels = true};
  int crop_hidden = 32;
  double boxcar_k = 10.0;
  CropMode crop_mode = CropMode::window;
  bool shared_backbone = false;
  bool use_parts = true;       // false: single global stream
  bool random_parts = false;   // parts are random S/4 boxes instead of predicted crops
  bool use_ma_loss = true;
  JointLossWeights loss;
  CctNegatives cct_negatives = CctNegatives::hardest;
  bool per_stream_cct = false;
  // Attention maps read the last conv layer before its ReLU.
  bool attention_pre_relu = true;
  // Per-channel input standardization; training fills these from the train split.
  std::vector<double> input_mean{0.0, 0.0, 0.0};
  std::vector<double> input_std{1.0, 1.0, 1.0};

  int num_parts() const { return attention.num_parts; }
  int num_streams() const { return use_parts ? 1 + num_parts() : 1; }
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
/// Applies the keys of `j` over `base`; unknown keys raise ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

/// Applies one named ablation: no-ma-loss, no-parts, random-parts, loss=softmax,
/// loss=cct, loss=combined, shared-backbone. Returns false for unknown names.
bool apply_ablation(const std::string& name, ModelConfig& config);

/// Per-channel mean and standard deviation of an [N,3,H,W] image batch.
std::pair<std::vector<double>, std::vector<double>> channel_statistics(const Tensor& images);

/// (x - mean) / std per channel, as a new constant tensor.
Tensor standardize(const Tensor& images, const ModelConfig& config);

/// Every trainable tensor of the pipeline.
struct SgmaModel {
  ModelConfig config;
  int num_seen = 0;
  int semantic_dim = 0;
  Backbone attention_backbone;
  std::vector<AttentionHead> heads;
  std::vector<CropNet> crop_nets;
  std::vector<Backbone> streams;    // one per stream, or a single shared one
  std::vector<Tensor> embeddings;   // W_i: [F, d]
  Tensor centers;                   // [num_seen, d]

  const Backbone& stream(int i) const { return streams[config.shared_backbone ? 0 : static_cast<std::size_t>(i)]; }

  ParameterList parameters() const;
  /// Parameters of the attention subnet (backbone and heads).
  ParameterList attention_parameters() const;
  ParameterList crop_parameters() const;
};

SgmaModel init_model(const ModelConfig& config, int num_seen, int semantic_dim, std::uint64_t seed);

/// Checkpoint config block: model config plus the class layout it was trained on.
nlohmann::json model_manifest(const SgmaModel& m);
void save_model(const std::filesystem::path& dir, const SgmaModel& m);
SgmaModel load_model(const std::filesystem::path& dir);

/// Intermediate values of one forward pass over a batch.
struct ForwardPass {
  Tensor features;                  // attention backbone output [N,C,h,w]
  std::vector<Tensor> maps;         // per part [N,h,w]
  std::vector<Tensor> crop_params;  // per part [N,3] pixel units
  std::vector<Tensor> inputs;       // stream inputs [N,3,P,P], global stream first
  std::vector<Tensor> theta;        // per stream [N,F]
  std::vector<Tensor> phi;          // per stream [N,d]
};

struct ForwardOptions {
  bool detach_maps = false;              // stop classification gradients at the crop net input
  std::span<const std::uint64_t> keys;   // per-sample identities, used by random parts
  std::uint64_t seed = 0;
  const std::vector<Tensor>* fixed_crops = nullptr;  // per-part [N,3]; bypasses the attention subnet
};

/// Attention-backbone feature maps of raw images (standardized here).
Tensor attention_features(const SgmaModel& m, const Tensor& images);

/// Runs the attention subnet (when parts are enabled), the crops and all streams.
ForwardPass forward(const SgmaModel& m, const Tensor& images, const ForwardOptions& opts = {});

/// Random S/4 crop parameters for random-parts mode; one [N,3] tensor per part.
std::vector<Tensor> random_part_params(int image_size, int num_parts, std::span<const std::uint64_t> keys,
                                       std::uint64_t seed);

/// Late-fused compatibility scores against the rows of `semantics` ([classes, d]).
Tensor fused_scores(const SgmaModel& m, const ForwardPass& pass, const Tensor& semantics);

/// Mapped feature used by the class-center loss: the mean of the per-stream phi.
Tensor mean_phi(const ForwardPass& pass);

/// Per-sample concatenation of per-stream phi, [N, streams * d].
std::vector<double> concat_phi(const ForwardPass& pass);

struct LossTerms {
  Tensor l_ma, l_cls, l_cct, total;
};

/// Joint objective of one batch. l_ma is defined whenever attention maps exist,
/// even when the config leaves it out of the total.
LossTerms compute_losses(const SgmaModel& m, const ForwardPass& pass, const Tensor& seen_semantics,
                         std::span<const int> labels);

}  // namespace sgma
