#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "sgma/model.hpp"
#include "sgma/synth.hpp"

namespace sgma {

struct TrainConfig {
  int batch_size = 32;
  int backbone_pretrain_epochs = 10;  // seen-class classification of the attention backbone
  int stage_a_steps = 200;   // attention-head pretraining
  int stage_b_steps = 2000;  // crop-net pretraining
  int stream_pretrain_epochs = 3;  // embedding streams on the pseudo-box crops
  int stage_c_epochs = 20;
  int kmeans_samples = 64;
  double pretrain_lr = 0.5;  // stages A and B
  SgdConfig sgd{.lr = 0.01, .momentum = 0.9, .weight_decay = 5e-4, .clip_norm = 1.0};
  double lr_floor = 5e-4;
  int plateau_patience = 5;
  double plateau_threshold = 0.01;  // relative improvement that resets the patience counter
  bool freeze_attention = false;    // classification losses stop at the crop-net input
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// One line of the metric log. Attention fields are absent without attention maps.
struct EpochRecord {
  int epoch = 0;
  std::optional<double> l_ma;
  double l_cls = 0, l_cct = 0, total = 0;
  std::optional<double> overlap;
  double val_mca = 0;
  double lr = 0;
};

nlohmann::json to_json(const EpochRecord& r);

struct StageSummary {
  double backbone_loss = 0;  // final softmax loss of the backbone pretraining
  std::vector<int> channel_labels;
  double stage_a_loss = 0;  // final BCE
  double stage_b_loss = 0;  // final pseudo-box MSE
  double stream_loss = 0;   // last epoch of the stream pretraining
};

/// Raised when a loss or gradient turns non-finite; the last good checkpoint is kept.
class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Copies the samples `rows` of an [N,...] tensor into a new constant tensor.
Tensor gather(const Tensor& t, std::span<const std::size_t> rows);

/// Stable identity of sample `index` of a split, for per-sample random streams.
std::uint64_t sample_key(const std::string& split, std::size_t index);
std::vector<std::uint64_t> sample_keys(const std::string& split, std::span<const std::size_t> rows);

/// Trains the attention backbone with the compatibility softmax on its pooled
/// features through a throwaway embedding; returns the last epoch's mean loss.
double pretrain_attention_backbone(SgmaModel& m, const ZslDataset& ds, const TrainConfig& cfg);

/// k-means channel clustering and BCE pretraining of the attention heads.
StageSummary stage_a(SgmaModel& m, const ZslDataset& ds, const TrainConfig& cfg);

/// Crop-net regression onto pseudo boxes at the attention peaks; returns the final loss.
double stage_b(SgmaModel& m, const ZslDataset& ds, const TrainConfig& cfg);

/// Pseudo boxes at the attention peaks of every train sample, [part][sample].
std::vector<std::vector<Box>> train_pseudo_boxes(const SgmaModel& m, const ZslDataset& ds, int batch_size);

/// Trains the streams, embeddings and centers on fixed crops (pseudo boxes,
/// or random boxes in random-parts mode) with the attention subnet idle.
/// Returns the last epoch's mean loss.
double pretrain_streams(SgmaModel& m, const ZslDataset& ds, const TrainConfig& cfg);

/// Validation metrics after an epoch: seen-class MCA on the val split (fused
/// scores) and the attention overlap of the val maps.
std::pair<double, std::optional<double>> validate_epoch(const SgmaModel& m, const ZslDataset& ds, int batch_size);

/// L2 norm of the gradient of every parameter after one Stage C step's backward pass.
std::map<std::string, double> gradient_norms(const SgmaModel& m, const ZslDataset& ds, const TrainConfig& cfg,
                                             std::size_t batch);

struct TrainOutputs {
  std::optional<std::filesystem::path> checkpoint_dir;  // last good model, rewritten every epoch
  std::optional<std::filesystem::path> log_path;        // newline-delimited JSON, one record per epoch
  std::ostream* progress = nullptr;
};

struct TrainResult {
  SgmaModel model;
  StageSummary stages;
  std::vector<EpochRecord> log;
};

/// Stages A, B and C with plateau learning-rate decay.
TrainResult train(const ZslDataset& ds, const ModelConfig& model_config, const TrainConfig& cfg,
                  const TrainOutputs& outputs = {});

}  // namespace sgma
