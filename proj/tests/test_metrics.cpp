#include <cmath>
#include <random>

#include "doctest.h"
#include "sgma/metrics.hpp"
#include "sgma/synth.hpp"

using namespace sgma;

namespace {

// Probability that a square of side `side`, centred uniformly where it fits in
// the image, has IoU > 0.5 with `gt`; midpoint rule on a 200 x 200 grid.
double random_hit_probability(const Box& gt, double side, int image_size) {
  const double lo = -0.5 + side / 2, width = image_size - side;
  const int n = 200;
  int hits = 0;
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) {
      const double cx = lo + width * (a + 0.5) / n, cy = lo + width * (b + 0.5) / n;
      const double ox = std::max(0.0, std::min(cx + side / 2, gt.cx + gt.side / 2) - std::max(cx - side / 2, gt.cx - gt.side / 2));
      const double oy = std::max(0.0, std::min(cy + side / 2, gt.cy + gt.side / 2) - std::max(cy - side / 2, gt.cy - gt.side / 2));
      const double inter = ox * oy;
      hits += inter > 0.5 * (side * side + gt.side * gt.side - inter) ? 1 : 0;
    }
  return double(hits) / (n * n);
}

}  // namespace

TEST_CASE("mean class accuracy") {
  const std::vector<int> y{0, 1, 2, 2, 1};
  CHECK(mean_class_accuracy(y, y) == 100.0);

  std::vector<int> labels(10, 0), preds(10, 0);
  labels.push_back(1);
  preds.push_back(0);
  CHECK(mean_class_accuracy(preds, labels) == 50.0);

  const std::vector<int> classes{0, 1, 2};
  CHECK_THROWS_AS(mean_class_accuracy(preds, labels, classes), std::invalid_argument);
  CHECK_THROWS_AS(mean_class_accuracy(std::vector<int>{0}, labels), std::invalid_argument);

  // Duplicating every sample of one class leaves MCA unchanged.
  const std::vector<int> l2{0, 0, 1, 1, 1, 2}, p2{0, 1, 1, 2, 1, 0};
  std::vector<int> l3 = l2, p3 = p2;
  for (std::size_t i = 0; i < l2.size(); ++i)
    if (l2[i] == 1) l3.push_back(1), p3.push_back(p2[i]);
  CHECK(mean_class_accuracy(p3, l3) == doctest::Approx(mean_class_accuracy(p2, l2)).epsilon(1e-14));
  CHECK(mean_class_accuracy(p2, l2) == doctest::Approx((50.0 + 200.0 / 3 + 0.0) / 3));
}

TEST_CASE("mean class accuracy of random guessing") {
  const int C = 5, n = 10000;
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> cls(0, C - 1);
  std::vector<int> labels(n), preds(n);
  for (int i = 0; i < n; ++i) labels[std::size_t(i)] = cls(rng), preds[std::size_t(i)] = cls(rng);
  const double mca = mean_class_accuracy(preds, labels);
  // Each per-class accuracy has variance p(1-p)/(n/C); the mean over C classes divides by C.
  const double p = 1.0 / C, sigma = 100.0 * std::sqrt(p * (1 - p) / n);
  CHECK(std::abs(mca - 100.0 / C) <= 3 * sigma);
}

TEST_CASE("harmonic mean") {
  CHECK(std::abs(harmonic_mean(36.7, 71.3) - 48.5) <= 0.05);
  CHECK(harmonic_mean(0, 90) == 0.0);
  CHECK(harmonic_mean(0, 0) == 0.0);
  for (double x : {0.5, 12.0, 100.0}) CHECK(harmonic_mean(x, x) == doctest::Approx(x));
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.1, 100.0);
  for (int i = 0; i < 200; ++i) {
    const double a = u(rng), b = u(rng);
    CHECK(harmonic_mean(a, b) <= std::sqrt(a * b) + 1e-12);
    CHECK(std::sqrt(a * b) <= (a + b) / 2 + 1e-12);
    CHECK(harmonic_mean(a, b) < (a + b) / 2);
  }
  CHECK_THROWS_AS(harmonic_mean(-1, 2), std::invalid_argument);
}

TEST_CASE("iou") {
  const Box a{0, 0, 1}, b{0.5, 0, 1};
  CHECK(iou(a, b) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, Box{5, 5, 1}) == 0.0);
  CHECK(iou(a, Box{1, 0, 1}) == 0.0);  // touching edges
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 10), s(0.5, 5);
  for (int i = 0; i < 100; ++i) {
    const Box p{u(rng), u(rng), s(rng)}, q{u(rng), u(rng), s(rng)};
    CHECK(iou(p, q) == iou(q, p));
    CHECK(iou(p, q) >= 0.0);
    CHECK(iou(p, q) <= 1.0);
    CHECK(iou(p, p) == doctest::Approx(1.0));
  }
  CHECK_THROWS_AS(iou(a, Box{0, 0, 0}), std::invalid_argument);
}

TEST_CASE("detection precision fixtures") {
  const std::vector<std::vector<Box>> gt{{{10, 10, 8}, {30, 10, 8}}, {{12, 20, 8}, {40, 20, 8}}};
  auto exact = detection_precision(gt, gt);
  CHECK(exact.per_part == std::vector<double>{100, 100});
  CHECK(exact.average == 100);
  CHECK(exact.assignment == std::vector<int>{0, 1});

  // Swapped predictions are matched back by majority overlap.
  std::vector<std::vector<Box>> swapped{{gt[0][1], gt[0][0]}, {gt[1][1], gt[1][0]}};
  auto sw = detection_precision(swapped, gt);
  CHECK(sw.assignment == std::vector<int>{1, 0});
  CHECK(sw.average == 100);

  // Shifted by a quarter side: IoU = 0.75 * 8 * 8 / (2 * 64 - 48) = 0.6 > 0.5.
  std::vector<std::vector<Box>> shifted = gt;
  for (auto& bs : shifted)
    for (auto& b : bs) b.cx += 2;
  CHECK(detection_precision(shifted, gt).average == 100);
  // Shifted by half a side: IoU = 1/3.
  for (auto& bs : shifted)
    for (auto& b : bs) b.cx += 2;
  auto half = detection_precision(shifted, gt);
  CHECK(half.average == 0);
  // Threshold 0 with overlapping predictions counts every sample.
  CHECK(detection_precision(shifted, gt, 0.0).average == 100);

  // Missing predictions are misses.
  std::vector<std::vector<Box>> partial{{gt[0][0], gt[0][1]}, {gt[1][0]}};
  auto pr = detection_precision(partial, gt);
  CHECK(pr.per_part == std::vector<double>{100, 50});
  CHECK_THROWS_AS(detection_precision(partial, {gt[0]}), std::invalid_argument);
}

TEST_CASE("random boxes match the analytic overlap rate") {
  SynthConfig cfg;
  const ZslDataset ds = generate(cfg);
  const auto& gt = ds.test_unseen.boxes;
  std::vector<std::vector<Box>> random(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i)
    for (std::size_t p = 0; p < gt[i].size(); ++p) {
      random[i].push_back(random_box(cfg.image_size, gt[i][p].side, derive_seed(9, i, p)));
    }
  const auto det = detection_precision(random, gt);
  for (std::size_t p = 0; p < 2; ++p) {
    double expected = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      expected += random_hit_probability(gt[i][std::size_t(det.assignment[p])], gt[i][p].side, cfg.image_size);
    }
    expected = 100.0 * expected / double(gt.size());
    MESSAGE("part " << p << ": measured " << det.per_part[p] << ", analytic " << expected);
    CHECK(std::abs(det.per_part[p] - expected) <= 5.0);
  }
}

TEST_CASE("eval report serialization") {
  EvalReport r;
  r.mode = "gzsl";
  r.gzsl = GzslResult{36.7, 71.3, harmonic_mean(36.7, 71.3)};
  r.mca_unseen = 60.0;
  r.class_counts = {{0, 10}, {3, 7}};
  CHECK_NOTHROW(r.validate());
  const auto j = to_json(r);
  CHECK(j.at("gzsl").at("h").get<double>() == doctest::Approx(48.46).epsilon(1e-3));
  CHECK(j.at("class_counts").at("3") == 7);
  const std::string table = format_table(r);
  CHECK(table.find("H (%)") != std::string::npos);
  CHECK(table.find("48.46") != std::string::npos);

  r.gzsl->h = 50;
  CHECK_THROWS_AS(r.validate(), std::logic_error);
  r.gzsl.reset();
  r.mca_unseen = 101;
  CHECK_THROWS_AS(r.validate(), std::logic_error);
}
