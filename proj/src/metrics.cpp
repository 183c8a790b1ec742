#include "sgma/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>

namespace sgma {

std::vector<double> per_class_accuracy(std::span<const int> predictions, std::span<const int> labels,
                                       std::span<const int> classes) {
  if (predictions.size() != labels.size()) throw std::invalid_argument("accuracy: predictions and labels differ in length");
  std::map<int, std::pair<int, int>> tally;  // class -> (correct, total)
  for (int c : classes) tally[c] = {0, 0};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = tally.find(labels[i]);
    if (it == tally.end()) continue;
    it->second.second += 1;
    it->second.first += predictions[i] == labels[i] ? 1 : 0;
  }
  std::vector<double> out;
  for (int c : classes) {
    const auto [correct, total] = tally.at(c);
    if (total == 0) throw std::invalid_argument("accuracy: class " + std::to_string(c) + " has no samples");
    out.push_back(100.0 * correct / total);
  }
  return out;
}

double mean_class_accuracy(std::span<const int> predictions, std::span<const int> labels, std::span<const int> classes) {
  if (classes.empty()) throw std::invalid_argument("mean_class_accuracy: no classes to evaluate");
  const auto acc = per_class_accuracy(predictions, labels, classes);
  double sum = 0;
  for (double a : acc) sum += a;
  return sum / static_cast<double>(acc.size());
}

double mean_class_accuracy(std::span<const int> predictions, std::span<const int> labels) {
  const std::set<int> present(labels.begin(), labels.end());
  const std::vector<int> classes(present.begin(), present.end());
  return mean_class_accuracy(predictions, labels, classes);
}

double harmonic_mean(double a_u, double a_s) {
  if (a_u < 0 || a_s < 0) throw std::invalid_argument("harmonic_mean: accuracies must be >= 0");
  if (a_u == 0 || a_s == 0) return 0.0;
  return 2.0 * a_u * a_s / (a_u + a_s);
}

double iou(const Box& a, const Box& b) {
  if (!(a.side > 0) || !(b.side > 0)) throw std::invalid_argument("iou: box sides must be positive");
  const double w = std::max(0.0, std::min(a.right(), b.right()) - std::max(a.left(), b.left()));
  const double h = std::max(0.0, std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top()));
  const double inter = w * h;
  const double sa = a.side * a.side, sb = b.side * b.side;
  return inter / (std::min(sa, sb) + std::max(sa, sb) - inter);
}

DetectionResult detection_precision(const std::vector<std::vector<Box>>& predicted,
                                    const std::vector<std::vector<Box>>& ground_truth, double threshold) {
  if (predicted.size() != ground_truth.size()) throw std::invalid_argument("detection: sample counts differ");
  if (ground_truth.empty()) throw std::invalid_argument("detection: no samples");
  const std::size_t parts = ground_truth.front().size();
  for (const auto& g : ground_truth) {
    if (g.size() != parts) throw std::invalid_argument("detection: inconsistent ground-truth part counts");
  }
  DetectionResult r;
  for (std::size_t p = 0; p < parts; ++p) {
    std::vector<int> votes(parts, 0);
    for (std::size_t i = 0; i < predicted.size(); ++i) {
      if (p >= predicted[i].size()) continue;
      int best = -1;
      double best_iou = 0;
      for (std::size_t g = 0; g < parts; ++g) {
        const double v = iou(predicted[i][p], ground_truth[i][g]);
        if (v > best_iou) best_iou = v, best = static_cast<int>(g);
      }
      if (best >= 0) ++votes[static_cast<std::size_t>(best)];
    }
    const int match = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    r.assignment.push_back(match);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
      if (p < predicted[i].size() && iou(predicted[i][p], ground_truth[i][static_cast<std::size_t>(match)]) > threshold) ++hits;
    }
    r.per_part.push_back(100.0 * static_cast<double>(hits) / static_cast<double>(predicted.size()));
  }
  for (double v : r.per_part) r.average += v;
  r.average /= static_cast<double>(parts);
  return r;
}

namespace {

void require_percent(double v, const char* what) {
  if (!(v >= 0 && v <= 100)) throw std::logic_error(std::string("report: ") + what + " outside [0, 100]");
}

nlohmann::json detection_json(const DetectionResult& d) {
  return {{"per_part", d.per_part}, {"average", d.average}, {"assignment", d.assignment}};
}

}  // namespace

void EvalReport::validate() const {
  if (mca_unseen) require_percent(*mca_unseen, "mca_unseen");
  if (mca_seen) require_percent(*mca_seen, "mca_seen");
  if (gzsl) {
    require_percent(gzsl->a_u, "A_U");
    require_percent(gzsl->a_s, "A_S");
    require_percent(gzsl->h, "H");
    if (std::abs(gzsl->h - harmonic_mean(gzsl->a_u, gzsl->a_s)) > 1e-9) {
      throw std::logic_error("report: H disagrees with A_U and A_S");
    }
  }
  for (const auto* d : {&detection, &random_baseline}) {
    if (!*d) continue;
    for (double v : (*d)->per_part) require_percent(v, "detection precision");
    require_percent((*d)->average, "detection average");
  }
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["mode"] = r.mode;
  j["beta"] = r.beta;
  if (r.mca_unseen) j["mca_unseen"] = *r.mca_unseen;
  if (r.mca_seen) j["mca_seen"] = *r.mca_seen;
  if (r.gzsl) j["gzsl"] = {{"a_u", r.gzsl->a_u}, {"a_s", r.gzsl->a_s}, {"h", r.gzsl->h}};
  if (r.detection) j["detection"] = detection_json(*r.detection);
  if (r.random_baseline) j["random_baseline"] = detection_json(*r.random_baseline);
  auto counts = nlohmann::json::object();
  for (const auto& [c, n] : r.class_counts) counts[std::to_string(c)] = n;
  j["class_counts"] = counts;
  return j;
}

std::string format_table(const EvalReport& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  auto row = [&](const std::string& name, double v) { out << std::left << std::setw(24) << name << std::right << std::setw(8) << v << "\n"; };
  out << "mode " << r.mode << "  beta " << r.beta << "\n";
  if (r.mca_unseen) row("MCA unseen (%)", *r.mca_unseen);
  if (r.mca_seen) row("MCA seen (%)", *r.mca_seen);
  if (r.gzsl) {
    row("A_U (%)", r.gzsl->a_u);
    row("A_S (%)", r.gzsl->a_s);
    row("H (%)", r.gzsl->h);
  }
  auto detection_rows = [&](const DetectionResult& d, const std::string& label) {
    for (std::size_t p = 0; p < d.per_part.size(); ++p) {
      row(label + " part " + std::to_string(p) + " (%)", d.per_part[p]);
    }
    row(label + " average (%)", d.average);
  };
  if (r.detection) detection_rows(*r.detection, "precision");
  if (r.random_baseline) detection_rows(*r.random_baseline, "random");
  return out.str();
}

}  // namespace sgma
