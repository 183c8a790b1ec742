#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sgma/box.hpp"
#include "sgma/inference.hpp"
#include "sgma/metrics.hpp"
#include "sgma/model.hpp"
#include "sgma/synth.hpp"

namespace sgma {

/// Model outputs over one split, computed once and shared by every protocol.
struct SplitFeatures {
  std::string split;
  std::vector<int> labels;              // dataset class ids, seen first
  Mat<double> scores;                   // [N, num_seen + num_unseen] fused compatibility, joint order
  Mat<double> phi;                      // [N, streams * d] per-stream features, concatenated
  std::vector<std::vector<Box>> boxes;  // [N][parts] predicted crops; empty without parts
  std::vector<std::uint64_t> keys;      // per-sample identities used for random boxes
};

/// Class layout and semantics needed to evaluate features without a model.
struct FeatureBundle {
  int num_seen = 0;
  int num_unseen = 0;
  Mat<double> semantics_seen;    // [num_seen, d]
  Mat<double> semantics_unseen;  // [num_unseen, d]
  std::vector<SplitFeatures> splits;

  const SplitFeatures& split(const std::string& name) const;
};

Mat<double> to_matrix(const Tensor& t);

/// Runs the model over a split in batches without recording gradients.
SplitFeatures extract_features(const SgmaModel& m, const ZslDataset& ds, const std::string& split, int batch_size = 32,
                               std::uint64_t seed = 0);

/// Extracts train, test_seen and test_unseen.
FeatureBundle extract_bundle(const SgmaModel& m, const ZslDataset& ds, int batch_size = 32, std::uint64_t seed = 0);

/// Rejects a checkpoint trained on a different class layout or semantic space.
void require_compatible(const SgmaModel& m, const ZslDataset& ds);

struct Prototypes {
  Mat<double> relation;  // ridge weights W, [num_unseen, num_seen]
  Mat<double> seen;      // class means of the train features
  Mat<double> unseen;    // W * seen
};

Prototypes build_prototypes(const FeatureBundle& b, double ridge_lambda);

/// Unseen-class MCA: scores restricted to the unseen classes.
double zsl_mca(const FeatureBundle& b, const Prototypes& p, double beta);
GzslResult gzsl_accuracy(const FeatureBundle& b, const Prototypes& p, double beta);

/// Uniformly placed boxes with the side of the ground-truth part, one per part.
std::vector<std::vector<Box>> random_boxes(const std::vector<std::vector<Box>>& ground_truth,
                                           const std::vector<std::uint64_t>& keys, int image_size,
                                           std::uint64_t seed);

/// One report per beta; detect ignores beta and yields a single report. The
/// detect protocol scores the test_seen and test_unseen crops together.
std::vector<EvalReport> evaluate(const FeatureBundle& b, const ZslDataset* ds, const std::string& mode,
                                 const InferenceConfig& cfg, const std::vector<double>& betas,
                                 std::uint64_t seed = 0);

/// Writes attention-map PGMs, crop PPMs and a box sidecar for the first n
/// samples of a split. Batches match extract_features, so the boxes equal the
/// detect inputs bit for bit. Returns the boxes, [n][parts].
std::vector<std::vector<Box>> export_samples(const SgmaModel& m, const ZslDataset& ds, const std::string& split,
                                             std::size_t n, const std::filesystem::path& dir, int batch_size = 32,
                                             std::uint64_t seed = 0);

/// Feature exchange directory: manifest.json plus score, feature and semantic blobs.
void save_features(const FeatureBundle& b, const std::filesystem::path& dir);
FeatureBundle load_features(const std::filesystem::path& dir);

}  // namespace sgma
