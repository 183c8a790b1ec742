#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sgma/box.hpp"

namespace sgma {

/// Per-class accuracy in percent for each class in `classes`; a class without
/// samples is an error.
std::vector<double> per_class_accuracy(std::span<const int> predictions, std::span<const int> labels,
                                       std::span<const int> classes);

/// Unweighted mean of per-class accuracies, in percent, over the classes in `classes`.
double mean_class_accuracy(std::span<const int> predictions, std::span<const int> labels, std::span<const int> classes);

/// Same, over the classes that occur in `labels`.
double mean_class_accuracy(std::span<const int> predictions, std::span<const int> labels);

/// 2 a_u a_s / (a_u + a_s); defined as 0 when either input is 0 (including both).
double harmonic_mean(double a_u, double a_s);

/// Intersection over union of two axis-aligned squares.
double iou(const Box& a, const Box& b);

struct DetectionResult {
  std::vector<double> per_part;  // percent, indexed by predicted part
  double average = 0;
  std::vector<int> assignment;   // predicted part -> ground-truth part
};

/// Predicted part p is matched to the ground-truth part it overlaps most in the
/// largest number of samples (ties go to the lower index); a sample counts as a
/// hit when IoU > threshold. A sample with fewer predictions than ground-truth
/// parts scores a miss for the absent parts.
DetectionResult detection_precision(const std::vector<std::vector<Box>>& predicted,
                                    const std::vector<std::vector<Box>>& ground_truth, double threshold = 0.5);

struct GzslResult {
  double a_u = 0, a_s = 0, h = 0;
};

struct EvalReport {
  std::string mode;  // zsl, gzsl or detect
  double beta = 1.0;
  std::optional<double> mca_unseen;
  std::optional<double> mca_seen;
  std::optional<GzslResult> gzsl;
  std::optional<DetectionResult> detection;
  std::optional<DetectionResult> random_baseline;
  std::map<int, int> class_counts;

  /// Range checks and the harmonic-mean identity.
  void validate() const;
};

nlohmann::json to_json(const EvalReport& r);
std::string format_table(const EvalReport& r);

}  // namespace sgma
